"""
SGD with momentum, the two-phase training protocol and cascade training.

Phase 1 trains every bank on class-balanced patches. Phase 2 retrains only
the output bank on patches drawn with the natural label distribution, which
recalibrates the class priors without touching the learned features.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import netgraph as ng
from .architectures import (
    ArchConfig,
    AverageNetwork,
    CascadeNetwork,
    Network,
    build,
    cascade_first_input_size,
    init_network,
    parse_arch_name,
)
from .datapipe import BrainVolume, LabelHistogram, PatchSet, sample_patches
from .kernels import KernelBank


class TrainingDiverged(FloatingPointError):
    """Raised when a gradient or loss becomes non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.005
    lr_decay: float = 0.1
    momentum_initial: float = 0.5
    momentum_final: float = 0.9
    l1: float = 0.0
    l2: float = 0.0
    weight_bound: float = 1.0
    batch_size: int = 128
    max_epochs: int = 10
    patience: int = 3
    seed: int = 0
    epoch_patches: int = 100_000
    validation_patches: int = 5_000
    flip: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"lr decay must lie in (0, 1], got {self.lr_decay}")
        for mu in (self.momentum_initial, self.momentum_final):
            if not 0 <= mu < 1:
                raise ValueError(f"momentum must lie in [0, 1), got {mu}")
        if self.patience < 1:
            raise ValueError(f"patience must be at least 1, got {self.patience}")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be positive")
        if self.l1 < 0 or self.l2 < 0 or not self.weight_bound > 0:
            raise ValueError("regularizer weights must be >= 0 and the weight bound > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training options {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# desk-scale protocol for phantom corpora (with architectures.DESK_ARCH)
DESK_PHASE1 = TrainConfig(learning_rate=0.005, lr_decay=0.5, max_epochs=4, patience=2,
                          batch_size=64, epoch_patches=4000, validation_patches=1000)
DESK_PHASE2 = TrainConfig(learning_rate=0.05, lr_decay=0.7, max_epochs=4, patience=2,
                          batch_size=64, epoch_patches=8000, validation_patches=2000)


def schedule(epoch: int, cfg: TrainConfig) -> tuple[float, float]:
    """Learning rate ``a0 * decay**epoch``; momentum linear from initial to final."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    alpha = cfg.learning_rate * cfg.lr_decay ** epoch
    if cfg.max_epochs == 1:
        mu = cfg.momentum_initial
    else:
        t = min(epoch / (cfg.max_epochs - 1), 1.0)
        mu = cfg.momentum_initial + t * (cfg.momentum_final - cfg.momentum_initial)
    return alpha, mu


@dataclass
class OptimizerState:
    velocity: dict[str, KernelBank]
    epoch: int = 0
    alpha: float = 0.0
    mu: float = 0.0

    @classmethod
    def zeros(cls, store: ng.ParameterStore, names=None) -> "OptimizerState":
        names = list(store.banks) if names is None else list(names)
        return cls({n: KernelBank(np.zeros_like(store[n].weights), np.zeros_like(store[n].bias))
                    for n in names})


def sgd_momentum_step(store: ng.ParameterStore, grads: ng.ParameterStore, state: OptimizerState,
                      weight_bound: float | None = None):
    """``V <- mu V - alpha grad``, ``W <- W + V``, then clip weights to ``[-c, c]``.

    Biases are not clipped. Updates ``store`` and ``state`` in place and
    returns both.
    """
    for name, g in grads.items():
        for part in (g.weights, g.bias):
            if not np.all(np.isfinite(part)):
                raise TrainingDiverged(
                    f"non-finite gradient in bank {name!r} at epoch {state.epoch} "
                    f"(alpha={state.alpha:g}, mu={state.mu:g})"
                )
    for name, g in grads.items():
        bank = store[name]
        if name not in state.velocity:
            raise KeyError(f"optimizer has no velocity for bank {name!r}")
        v = state.velocity[name]
        if v.weights.shape != g.weights.shape or bank.weights.shape != g.weights.shape:
            raise ValueError(
                f"bank {name!r}: gradient {g.weights.shape} vs weights {bank.weights.shape}"
            )
        mu = np.asarray(state.mu, dtype=v.weights.dtype)
        alpha = np.asarray(state.alpha, dtype=v.weights.dtype)
        v.weights = mu * v.weights - alpha * g.weights.astype(v.weights.dtype)
        v.bias = mu * v.bias - alpha * g.bias.astype(v.bias.dtype)
        w = bank.weights + v.weights
        if weight_bound is not None:
            np.clip(w, -weight_bound, weight_bound, out=w)
        bank.weights = w
        bank.bias = bank.bias + v.bias
    return store, state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

PatchSource = PatchSet | Callable[[int], PatchSet]
Features = Callable[[np.ndarray], object]


@dataclass
class TrainResult:
    store: ng.ParameterStore
    history: list[dict]
    best_epoch: int
    consumed: LabelHistogram = field(default_factory=lambda: LabelHistogram(np.zeros(5)))


class HistoryLog:
    """Line-delimited JSON training history."""

    def __init__(self, path=None):
        self.path = None if path is None else Path(path)
        self.entries: list[dict] = []
        if self.path is not None:
            self.path.write_text("")

    def write(self, entry: dict) -> None:
        self.entries.append(entry)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def _labels_grid(labels: np.ndarray) -> np.ndarray:
    return labels.astype(np.int64)[:, None, None]


def mean_nll(network: Network, patches: PatchSet, features: Features | None = None,
             batch_size: int = 256) -> float:
    """Mean per-patch negative log-likelihood in test mode."""
    if len(patches) == 0:
        raise ValueError("empty validation set")
    total = 0.0
    for sl in _batches(len(patches), batch_size):
        x = patches.patches(np.arange(sl.start, sl.stop))
        inputs = x if features is None else features(x)
        probs = ng.forward(network.graph, network.store, inputs, "test").probabilities
        lab = patches.labels[sl].astype(np.int64)
        p = probs[np.arange(len(lab)), lab, 0, 0].astype(np.float64)
        total += float(-np.log(np.maximum(p, np.finfo(np.float64).tiny)).sum())
    return total / len(patches)


def fit(network: Network, train: PatchSource, validation: PatchSet, cfg: TrainConfig,
        trainable=None, features: Features | None = None, log: HistoryLog | None = None,
        phase: str = "phase1") -> TrainResult:
    """Minibatch SGD with early stopping on validation NLL.

    ``train`` is a fixed patch set or a callable returning the patch set of
    a given epoch. ``features`` maps a batch of raw patches to graph inputs.
    ``network.store`` ends up holding the best-epoch parameters.
    """
    if len(validation) == 0:
        raise ValueError("empty validation set")
    graph, store = network.graph, network.store
    trainable = list(store.banks) if trainable is None else list(trainable)
    rng = np.random.default_rng([cfg.seed, _phase_code(phase)])
    state = OptimizerState.zeros(store, trainable)
    log = log if log is not None else HistoryLog()
    best_val, best_epoch, best_store, since = math.inf, -1, store.copy(), 0
    consumed = np.zeros(5, dtype=np.int64)
    history = []
    has_reg = cfg.l1 > 0 or cfg.l2 > 0
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        alpha, mu = schedule(epoch, cfg)
        state.epoch, state.alpha, state.mu = epoch, alpha, mu
        patches = train(epoch) if callable(train) else train
        if len(patches) == 0:
            raise ValueError("empty training stream")
        consumed += np.bincount(patches.labels, minlength=5)
        order = rng.permutation(len(patches))
        nll_sum = 0.0
        for sl in _batches(len(order), cfg.batch_size):
            idx = order[sl]
            x = patches.patches(idx)
            inputs = x if features is None else features(x)
            acts = ng.forward(graph, store, inputs, "train", rng)
            grads, loss = ng.backward(graph, store, acts, _labels_grid(patches.labels[idx]),
                                      cfg.l1, cfg.l2, trainable)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} ({phase})")
            if has_reg:
                w1, w2 = store.weight_norms()
                loss -= cfg.l1 * w1 + cfg.l2 * w2
            nll_sum += loss * len(idx)
            sgd_momentum_step(store, grads, state, cfg.weight_bound)
        val = mean_nll(network, validation, features)
        entry = {"phase": phase, "epoch": epoch, "alpha": alpha, "mu": mu,
                 "train_nll": nll_sum / len(order), "val_nll": val,
                 "wall_seconds": time.perf_counter() - t0}
        history.append(entry)
        log.write(entry)
        if val < best_val:
            best_val, best_epoch, best_store, since = val, epoch, store.copy(), 0
        else:
            since += 1
            if since >= cfg.patience:
                break
    network.store = best_store
    return TrainResult(best_store, history, best_epoch, LabelHistogram(consumed))


def _phase_code(phase: str) -> int:
    return sum(ord(c) * 31 ** i for i, c in enumerate(phase)) % (2 ** 31)


def train_phase1(network: Network, stream: PatchSource, validation: PatchSet, cfg: TrainConfig,
                 features: Features | None = None, log: HistoryLog | None = None,
                 phase: str = "phase1") -> TrainResult:
    """Train every bank (balanced patches expected)."""
    return fit(network, stream, validation, cfg, None, features, log, phase)


def train_phase2(network: Network, stream: PatchSource, validation: PatchSet, cfg: TrainConfig,
                 features: Features | None = None, log: HistoryLog | None = None,
                 phase: str = "phase2") -> TrainResult:
    """Retrain only the output bank; every hidden bank stays bit-identical."""
    return fit(network, stream, validation, cfg, [network.graph.sink], features, log, phase)


# ---------------------------------------------------------------------------
# protocols over volumes
# ---------------------------------------------------------------------------

def corpus_frequencies(volumes: list[BrainVolume]) -> tuple[float, ...]:
    """Label frequencies over brain voxels; absent classes get a tiny floor."""
    hist = sum((v.label_histogram() for v in volumes), LabelHistogram(np.zeros(5)))
    fr = np.maximum(hist.fractions, 1e-6)
    return tuple(float(f) for f in fr / fr.sum())


def _seed(cfg: TrainConfig, *parts: int) -> list[int]:
    return [cfg.seed, *parts]


def _sampler(volumes, mode, size, center, cfg: TrainConfig, tag: int):
    def draw(epoch: int) -> PatchSet:
        from .datapipe import flip_augment
        seed = np.random.SeedSequence(_seed(cfg, tag, epoch)).generate_state(1)[0]
        return flip_augment(sample_patches(volumes, mode, size, cfg.epoch_patches, int(seed),
                                           center=center), cfg.flip)
    return draw


def _validation(volumes, mode, size, center, cfg: TrainConfig, tag: int) -> PatchSet:
    seed = np.random.SeedSequence(_seed(cfg, tag, 10_007)).generate_state(1)[0]
    return sample_patches(volumes, mode, size, cfg.validation_patches, int(seed), center=center)


def _check_size(volumes: list[BrainVolume], size: int) -> None:
    for v in volumes:
        x, y, _ = v.dims
        if min(x, y) < (size + 1) // 2:
            raise ValueError(
                f"volume {v.patient_id!r} slices are {x}x{y}; too small for {size}x{size} patches"
            )


def train_network(network: Network, train_vols, val_vols, cfg: TrainConfig,
                  cfg2: TrainConfig | None = None, phases: str = "both",
                  features: Features | None = None, size: int | None = None,
                  center: int | None = None, log: HistoryLog | None = None, tag: int = 0,
                  name: str = "") -> dict[str, TrainResult]:
    """Two-phase training of one network on patches from labeled volumes."""
    if phases not in ("1", "2", "both"):
        raise ValueError(f"phases must be '1', '2' or 'both', got {phases!r}")
    if not train_vols or not val_vols:
        raise ValueError("training and validation volumes are both required")
    size = network.receptive_field if size is None else size
    _check_size(list(train_vols) + list(val_vols), size)
    cfg2 = cfg if cfg2 is None else cfg2
    results = {}
    prefix = f"{name}:" if name else ""
    if phases in ("1", "both"):
        results["phase1"] = train_phase1(
            network, _sampler(train_vols, "balanced", size, center, cfg, tag + 1),
            _validation(val_vols, "balanced", size, center, cfg, tag + 1), cfg, features, log,
            prefix + "phase1")
    if phases in ("2", "both"):
        results["phase2"] = train_phase2(
            network, _sampler(train_vols, "natural", size, center, cfg2, tag + 2),
            _validation(val_vols, "natural", size, center, cfg2, tag + 2), cfg2, features, log,
            prefix + "phase2")
    return results


def train_cascade(variant: str, first: Network, train_vols, val_vols, cfg: TrainConfig,
                  arch_cfg: ArchConfig = ArchConfig(), cfg2: TrainConfig | None = None,
                  phases: str = "both", seed: int | None = None, log: HistoryLog | None = None,
                  second: Network | None = None):
    """Train the second network of a cascade on top of a frozen first network.

    Returns ``(cascade, results)``; the first network's store is untouched.
    """
    variant = parse_arch_name(variant)
    graphs = build(variant, arch_cfg)
    if not isinstance(graphs, tuple) or variant == "AverageCNN":
        raise ValueError(f"{variant} is not a cascade")
    if second is None:
        freqs = first.label_frequencies or corpus_frequencies(train_vols)
        second = init_network(graphs[1], freqs, cfg.seed + 1 if seed is None else seed)
    model = CascadeNetwork(variant, first, second)
    size = cascade_first_input_size(variant, arch_cfg)
    results = train_network(second, train_vols, val_vols, cfg, cfg2, phases,
                            features=model.second_inputs, size=size, center=model.center,
                            log=log, tag=100, name="second")
    return model, results


def train_model(arch: str, train_vols, val_vols, cfg: TrainConfig,
                arch_cfg: ArchConfig = ArchConfig(), cfg2: TrainConfig | None = None,
                phases: str = "both", init=None, log: HistoryLog | None = None):
    """Build (or continue from ``init``) and train a model of any architecture.

    Cascades first train their ``TwoPathCNN`` with both phases (unless
    ``init`` supplies one), then the second network.
    """
    arch = parse_arch_name(arch)
    freqs = corpus_frequencies(train_vols)
    graphs = build(arch, arch_cfg)
    results: dict[str, TrainResult] = {}
    if arch == "AverageCNN":
        if isinstance(init, AverageNetwork):
            model = init
        else:
            model = AverageNetwork(init_network(graphs[0], freqs, cfg.seed),
                                   init_network(graphs[1], freqs, cfg.seed + 1))
        for tag, (key, net) in enumerate((("local", model.local), ("global", model.global_))):
            for ph, r in train_network(net, train_vols, val_vols, cfg, cfg2, phases,
                                       log=log, tag=10 * (tag + 1), name=key).items():
                results[f"{key}:{ph}"] = r
        return model, results
    if arch in ("InputCascadeCNN", "LocalCascadeCNN", "MFCascadeCNN"):
        if isinstance(init, CascadeNetwork):
            first, second = init.first, init.second
        else:
            first = init if isinstance(init, Network) else None
            second = None
        if first is None:
            first = init_network(graphs[0], freqs, cfg.seed)
            for ph, r in train_network(first, train_vols, val_vols, cfg, cfg2, "both",
                                       log=log, tag=50, name="first").items():
                results[f"first:{ph}"] = r
        model, res2 = train_cascade(arch, first, train_vols, val_vols, cfg, arch_cfg, cfg2,
                                    phases, log=log, second=second)
        results.update({f"second:{k}": v for k, v in res2.items()})
        return model, results
    model = init if isinstance(init, Network) else init_network(graphs, freqs, cfg.seed)
    results.update(train_network(model, train_vols, val_vols, cfg, cfg2, phases, log=log))
    return model, results


def with_options(cfg: TrainConfig, **changes) -> TrainConfig:
    return replace(cfg, **changes)
