"""
Builders for the seven segmentation networks and thin wrappers that run them.

Single-graph models (``LocalPathCNN``, ``GlobalPathCNN``, ``TwoPathCNN``) are
wrapped by :class:`Network`. ``AverageCNN`` averages the label distributions
of separately trained local and global path networks. The three cascades feed
the probabilities of a frozen ``TwoPathCNN`` into a second two-pathway network,
either as extra input channels, after the first local block, or right before
the output layer.

Every wrapper exposes the same small surface used by training and inference:
``receptive_field``, ``center`` (offset of the predicted pixel inside the
receptive field) and ``probabilities(x)`` for a ``(B, 4, H, W)`` batch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import netgraph as ng
from .kernels import ShapeError
from .netgraph import ModelGraph, NetworkRecord, ParameterStore

ARCH_NAMES = (
    "LocalPathCNN",
    "GlobalPathCNN",
    "TwoPathCNN",
    "AverageCNN",
    "InputCascadeCNN",
    "LocalCascadeCNN",
    "MFCascadeCNN",
)
CASCADES = ("InputCascadeCNN", "LocalCascadeCNN", "MFCascadeCNN")

IMAGE_CHANNELS = 4
LABELS = ng.LABEL_COUNT


def parse_arch_name(name: str) -> str:
    for known in ARCH_NAMES:
        if known.lower() == str(name).lower():
            return known
    raise ValueError(f"unknown architecture {name!r}; expected one of {', '.join(ARCH_NAMES)}")


@dataclass(frozen=True)
class ArchConfig:
    local_maps: tuple[int, int] = (64, 64)
    global_maps: int = 160
    maxout_k: int = 2
    local_kernels: tuple[int, int] = (7, 3)
    local_pools: tuple[int, int] = (4, 2)
    global_kernel: int = 13
    output_kernel: int = 21
    pool_stride: int = 1
    input_dropout: float = 0.0
    hidden_dropout: float = 0.2
    output_dropout: float = 0.5

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        for key in ("local_maps", "local_kernels", "local_pools"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("local_maps", "local_kernels", "local_pools"):
            d[key] = list(d[key])
        return d


# reduced widths that train on one CPU core in minutes; geometry is unchanged
DESK_ARCH = ArchConfig(local_maps=(8, 8), global_maps=16)


def _maybe_dropout(layers: list, name: str, source: str, prob: float) -> str:
    if prob > 0:
        layers.append(ng.dropout(name, source, prob))
        return name
    return source


def _local_path(cfg: ArchConfig, layers: list, source: str, prior: str | None = None) -> str:
    (n1, n2), (p1, p2) = cfg.local_kernels, cfg.local_pools
    layers.append(ng.conv_block("local1", source, n1, cfg.local_maps[0], cfg.maxout_k,
                                p1, cfg.pool_stride))
    top = _maybe_dropout(layers, "local1_drop", "local1", cfg.hidden_dropout)
    if prior is not None:
        layers.append(ng.concat("local1_prior", top, prior))
        top = "local1_prior"
    layers.append(ng.conv_block("local2", top, n2, cfg.local_maps[1], cfg.maxout_k,
                                p2, cfg.pool_stride))
    return "local2"


def _global_path(cfg: ArchConfig, layers: list, source: str) -> str:
    layers.append(ng.conv_block("global1", source, cfg.global_kernel, cfg.global_maps,
                                cfg.maxout_k, 1, 1))
    return "global1"


def _output(cfg: ArchConfig, layers: list, features: str, prior: str | None = None) -> None:
    top = _maybe_dropout(layers, "features_drop", features, cfg.output_dropout)
    if prior is not None:
        layers.append(ng.concat("features_prior", top, prior))
        top = "features_prior"
    layers.append(ng.softmax_output("output", top, cfg.output_kernel))


def _image_input(cfg: ArchConfig, layers: list, source: str = "image") -> str:
    return _maybe_dropout(layers, "input_drop", source, cfg.input_dropout)


def _check_concat(graph: ModelGraph) -> ModelGraph:
    # a graph whose pathways do not meet at equal sizes fails here with both sizes named
    rf = graph.receptive_field()
    sizes = {name: (rf, rf) for name in graph.inputs}
    if "prior" in graph.inputs:
        sizes["prior"] = (graph.receptive_field("prior"),) * 2
    graph.spatial_sizes(sizes)
    return graph


def build_graph(kind: str, cfg: ArchConfig = ArchConfig(), prior_at: str | None = None) -> ModelGraph:
    """Build one graph.

    ``kind`` is ``LocalPathCNN``, ``GlobalPathCNN`` or ``TwoPathCNN``.
    ``prior_at`` (two-path only) adds a 5-channel ``prior`` input concatenated
    at ``"input"``, ``"local"`` (after the first local block) or
    ``"preoutput"``.
    """
    layers: list = []
    inputs = {"image": IMAGE_CHANNELS}
    if prior_at is not None:
        if kind != "TwoPathCNN":
            raise ValueError("only the two-pathway network accepts a prior input")
        inputs["prior"] = LABELS
    source = _image_input(cfg, layers)
    if prior_at == "input":
        layers.append(ng.concat("input_prior", source, "prior"))
        source = "input_prior"
    elif prior_at not in (None, "local", "preoutput"):
        raise ValueError(f"unknown prior concatenation point {prior_at!r}")

    if kind == "LocalPathCNN":
        _output(cfg, layers, _local_path(cfg, layers, source))
    elif kind == "GlobalPathCNN":
        _output(cfg, layers, _global_path(cfg, layers, source))
    elif kind == "TwoPathCNN":
        local = _local_path(cfg, layers, source, "prior" if prior_at == "local" else None)
        glob = _global_path(cfg, layers, source)
        layers.append(ng.concat("paths", local, glob))
        _output(cfg, layers, "paths", "prior" if prior_at == "preoutput" else None)
    else:
        raise ValueError(f"{kind} is not a single-graph architecture")
    name = kind if prior_at is None else f"{kind}+prior@{prior_at}"
    try:
        graph = ModelGraph(name, inputs, layers)
    except ng.ReceptiveFieldMismatch as exc:
        # report the feature-map sizes the pathways would have for the widest one
        nominal = max(exc.fields.values()) + cfg.output_kernel - 1
        sizes = ", ".join(f"{ref} = {nominal - rf + 1}x{nominal - rf + 1}"
                          for ref, rf in exc.fields.items())
        raise ShapeError(
            f"{exc.node}: pathways meet with different sizes ({sizes} for a "
            f"{nominal}x{nominal} input)"
        ) from exc
    return _check_concat(graph)


_PRIOR_POINT = {"InputCascadeCNN": "input", "LocalCascadeCNN": "local", "MFCascadeCNN": "preoutput"}


def build(name: str, cfg: ArchConfig = ArchConfig()):
    """Graph for single-graph names; ``(local, global)`` for ``AverageCNN``;
    ``(first, second)`` for cascades."""
    name = parse_arch_name(name)
    if name == "AverageCNN":
        return build_graph("LocalPathCNN", cfg), build_graph("GlobalPathCNN", cfg)
    if name in CASCADES:
        return build_graph("TwoPathCNN", cfg), build_graph("TwoPathCNN", cfg, _PRIOR_POINT[name])
    return build_graph(name, cfg)


def receptive_field(graph: ModelGraph) -> int:
    return graph.receptive_field()


def _prior_shift(second: ModelGraph) -> int:
    """Pixel offset, inside the second net's image input, of the feature row
    that the prior's first row must align with."""
    for layer in second.layers:
        if layer.kind == ng.CONCAT and "prior" in layer.inputs:
            rfs = [second.receptive_fields(r).get("image") for r in layer.inputs if r != "prior"]
            rf = max(r for r in rfs if r is not None)
            return (rf - 1) // 2
    raise ValueError(f"graph {second.name} has no prior concatenation")


def cascade_geometry(first: ModelGraph, second: ModelGraph) -> dict:
    """Sizes for a cascade pair.

    ``first_input`` is the patch size the first network must see so that its
    output covers the second network's prior input; it is also the receptive
    field of the whole cascade. ``center`` is the offset of the predicted pixel
    inside that patch and ``image_offset`` the offset of the second network's
    image crop.
    """
    rf_first = first.receptive_field()
    rf_second = second.receptive_field("image")
    rf_prior = second.receptive_field("prior")
    shift = _prior_shift(second)
    c_first = (rf_first - 1) // 2
    c_second = (rf_second - 1) // 2
    image_offset = c_first - shift
    first_input = rf_prior + rf_first - 1
    if image_offset < 0 or image_offset + rf_second > first_input:
        raise ShapeError(
            f"second network image window ({rf_second} at offset {image_offset}) does not fit "
            f"inside the first network input ({first_input})"
        )
    return {
        "first_input": first_input,
        "center": image_offset + c_second,
        "image_offset": image_offset,
        "rf_first": rf_first,
        "rf_second": rf_second,
        "rf_prior": rf_prior,
    }


def cascade_first_input_size(variant: str, cfg: ArchConfig = ArchConfig()) -> int:
    first, second = build(variant, cfg)
    return cascade_geometry(first, second)["first_input"]


# ---------------------------------------------------------------------------
# runnable models
# ---------------------------------------------------------------------------

@dataclass
class Network:
    """A single graph with its parameters."""

    graph: ModelGraph
    store: ParameterStore
    label_frequencies: tuple[float, ...] | None = None

    @property
    def name(self) -> str:
        return self.graph.name

    @property
    def receptive_field(self) -> int:
        return self.graph.receptive_field()

    @property
    def center(self) -> int:
        return (self.receptive_field - 1) // 2

    def probabilities(self, x, prior=None) -> np.ndarray:
        inputs = {"image": x} if prior is None else {"image": x, "prior": prior}
        return ng.forward(self.graph, self.store, inputs, "test").probabilities

    def records(self, role: str = "main") -> list[NetworkRecord]:
        return [NetworkRecord(role, self.graph, self.store, self.label_frequencies)]


@dataclass
class AverageNetwork:
    """Mean of the label distributions of a local-path and a global-path network."""

    local: Network
    global_: Network
    name: str = "AverageCNN"

    def __post_init__(self):
        if self.local.receptive_field != self.global_.receptive_field:
            raise ShapeError(
                f"averaged networks disagree on receptive field "
                f"({self.local.receptive_field} vs {self.global_.receptive_field})"
            )

    @property
    def receptive_field(self) -> int:
        return self.local.receptive_field

    @property
    def center(self) -> int:
        return self.local.center

    def probabilities(self, x) -> np.ndarray:
        a = self.local.probabilities(x).astype(np.float64)
        b = self.global_.probabilities(x).astype(np.float64)
        return ((a + b) / 2).astype(np.float32)

    def records(self) -> list[NetworkRecord]:
        return self.local.records("local") + self.global_.records("global")


@dataclass
class CascadeNetwork:
    """Frozen first ``TwoPathCNN`` whose probabilities feed a second network."""

    variant: str
    first: Network
    second: Network

    def __post_init__(self):
        if _PRIOR_POINT.get(self.variant) is None:
            raise ValueError(f"{self.variant} is not a cascade")
        expected = f"TwoPathCNN+prior@{_PRIOR_POINT[self.variant]}"
        if self.second.graph.name != expected:
            raise ValueError(
                f"{self.variant} needs a second graph {expected!r}, got {self.second.graph.name!r}"
            )
        self.geometry = cascade_geometry(self.first.graph, self.second.graph)

    @property
    def name(self) -> str:
        return self.variant

    @property
    def receptive_field(self) -> int:
        return self.geometry["first_input"]

    @property
    def center(self) -> int:
        return self.geometry["center"]

    def second_inputs(self, x, prior=None) -> dict[str, np.ndarray]:
        """Inputs of the second network for a batch ``x`` of first-net-sized inputs.

        ``prior`` overrides the first network's output (same shape).
        """
        x = np.asarray(x)
        single = x.ndim == 3
        if single:
            x = x[None]
        if prior is None:
            prior = self.first.probabilities(x)
        elif single and np.ndim(prior) == 3:
            prior = np.asarray(prior)[None]
        h, w = x.shape[2:]
        out_h, out_w = h - self.receptive_field + 1, w - self.receptive_field + 1
        if out_h < 1 or out_w < 1:
            raise ShapeError(
                f"cascade input {h}x{w} is smaller than its receptive field {self.receptive_field}"
            )
        a, rf2 = self.geometry["image_offset"], self.geometry["rf_second"]
        image = x[:, :, a:a + out_h + rf2 - 1, a:a + out_w + rf2 - 1]
        rp = self.geometry["rf_prior"]
        prior = prior[:, :, :out_h + rp - 1, :out_w + rp - 1]
        if single:
            return {"image": image[0], "prior": prior[0]}
        return {"image": image, "prior": prior}

    def probabilities(self, x, prior=None) -> np.ndarray:
        inputs = self.second_inputs(x, prior)
        return ng.forward(self.second.graph, self.second.store, inputs, "test").probabilities

    def records(self) -> list[NetworkRecord]:
        return self.first.records("first") + self.second.records("second")


def init_network(graph: ModelGraph, label_frequencies, seed: int) -> Network:
    freqs = tuple(float(f) for f in label_frequencies)
    return Network(graph, ng.init_parameters(graph, freqs, seed), freqs)


def make_model(name: str, cfg: ArchConfig = ArchConfig(), label_frequencies=None, seed: int = 0,
               first: Network | None = None):
    """Freshly initialized model of the named architecture.

    For cascades, ``first`` supplies an already trained ``TwoPathCNN``;
    otherwise a fresh one is created.
    """
    name = parse_arch_name(name)
    freqs = label_frequencies if label_frequencies is not None else (1.0 / LABELS,) * LABELS
    built = build(name, cfg)
    if name == "AverageCNN":
        return AverageNetwork(init_network(built[0], freqs, seed),
                              init_network(built[1], freqs, seed + 1))
    if name in CASCADES:
        if first is None:
            first = init_network(built[0], freqs, seed)
        return CascadeNetwork(name, first, init_network(built[1], freqs, seed + 1))
    return init_network(built, freqs, seed)


def save_segmenter(model, path, arch_config: ArchConfig | None = None) -> None:
    extra = {} if arch_config is None else {"arch_config": arch_config.to_dict()}
    ng.write_model_file(path, model.records(), architecture=model.name, extra=extra)


def load_segmenter(path):
    arch, records, _ = ng.read_model_file(path)
    nets = {r.role: Network(r.graph, r.store,
                            tuple(r.label_frequencies) if r.label_frequencies else None)
            for r in records}
    arch = parse_arch_name(arch)
    if arch == "AverageCNN":
        return AverageNetwork(nets["local"], nets["global"])
    if arch in CASCADES:
        return CascadeNetwork(arch, nets["first"], nets["second"])
    return nets["main"]


def with_config(cfg: ArchConfig, **changes) -> ArchConfig:
    return replace(cfg, **changes)
