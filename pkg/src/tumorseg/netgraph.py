"""
Layer graphs built from convolution blocks, concatenation, dropout and a
convolutional softmax output layer.

A :class:`ModelGraph` is a per-example description; execution accepts either a
single ``(C, H, W)`` input or a ``(B, C, H, W)`` batch. Parameters live in a
:class:`ParameterStore` keyed by layer name, separate from the graph so that
the same graph can be run with different weights (or frozen copies of them).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels as K
from .kernels import KernelBank, ShapeError

CONV_BLOCK = "ConvMaxoutPool"
CONCAT = "ConcatChannels"
DROPOUT = "Dropout"
OUTPUT = "SoftmaxConvOutput"
LAYER_KINDS = (CONV_BLOCK, CONCAT, DROPOUT, OUTPUT)

LABEL_COUNT = 5


class GraphError(ValueError):
    """Raised for malformed graphs (cycles, dangling references, bad sinks)."""


class ReceptiveFieldMismatch(GraphError):
    """Paths into a concatenation see the same graph input through different
    receptive fields, so their feature maps cannot have equal sizes."""

    def __init__(self, node: str, source: str, fields: dict[str, int]):
        self.node, self.source, self.fields = node, source, dict(fields)
        detail = ", ".join(f"{k}: {v}" for k, v in fields.items())
        super().__init__(f"{node}: paths to input {source!r} disagree on receptive field ({detail})")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple[str, ...]
    kernel_size: int = 1
    out_maps: int = 0
    maxout_k: int = 1
    pool_p: int = 1
    pool_stride: int = 1
    dropout_prob: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        if self.kind not in LAYER_KINDS:
            raise GraphError(f"unknown layer kind {self.kind!r}")
        if self.kind == CONCAT:
            if len(self.inputs) < 2:
                raise GraphError(f"{self.name}: concatenation needs at least two inputs")
        elif len(self.inputs) != 1:
            raise GraphError(f"{self.name}: {self.kind} takes exactly one input")
        if self.kind in (CONV_BLOCK, OUTPUT) and (self.kernel_size < 1 or self.out_maps < 1):
            raise GraphError(f"{self.name}: kernel_size and out_maps must be positive")
        if self.kind == CONV_BLOCK and (self.maxout_k < 1 or self.pool_p < 1 or self.pool_stride < 1):
            raise GraphError(f"{self.name}: maxout_k, pool_p and pool_stride must be positive")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError(f"{self.name}: dropout probability must lie in [0, 1)")

    @property
    def has_parameters(self) -> bool:
        return self.kind in (CONV_BLOCK, OUTPUT)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inputs"] = list(self.inputs)
        return d


def conv_block(name, source, kernel_size, out_maps, maxout_k=2, pool_p=1, pool_stride=1):
    return LayerSpec(name, CONV_BLOCK, (source,), kernel_size=kernel_size, out_maps=out_maps,
                     maxout_k=maxout_k, pool_p=pool_p, pool_stride=pool_stride)


def concat(name, *sources):
    return LayerSpec(name, CONCAT, tuple(sources))


def dropout(name, source, prob):
    return LayerSpec(name, DROPOUT, (source,), dropout_prob=prob)


def softmax_output(name, source, kernel_size, label_count=LABEL_COUNT):
    return LayerSpec(name, OUTPUT, (source,), kernel_size=kernel_size, out_maps=label_count)


@dataclass
class ModelGraph:
    """Topologically ordered layers with named graph inputs.

    ``inputs`` maps each graph input to its channel count. Ordinary networks
    have a single ``"image"`` input with 4 channels; the second network of a
    cascade also has a ``"prior"`` input carrying the first network's 5
    label probabilities.
    """

    name: str
    inputs: dict[str, int]
    layers: list[LayerSpec]
    label_count: int = LABEL_COUNT

    def __post_init__(self):
        self.inputs = dict(self.inputs)
        self.layers = list(self.layers)
        seen = set(self.inputs)
        for layer in self.layers:
            if layer.name in seen:
                raise GraphError(f"duplicate node name {layer.name!r}")
            for ref in layer.inputs:
                if ref not in seen:
                    raise GraphError(
                        f"{layer.name}: input {ref!r} is not an earlier node "
                        "(graph must be acyclic and topologically ordered)"
                    )
            seen.add(layer.name)
        outputs = [l for l in self.layers if l.kind == OUTPUT]
        if len(outputs) != 1 or self.layers[-1].kind != OUTPUT:
            raise GraphError("graph needs exactly one SoftmaxConvOutput layer, placed last")
        if outputs[0].out_maps != self.label_count:
            raise GraphError("output layer map count must equal label_count")
        self._channels = self._infer_channels()
        rf = self.receptive_field()
        if rf % 2 == 0:
            raise GraphError(f"receptive field {rf} is even; the center pixel is undefined")

    # -- structure ---------------------------------------------------------

    @property
    def sink(self) -> str:
        return self.layers[-1].name

    @property
    def output_layer(self) -> LayerSpec:
        return self.layers[-1]

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def _infer_channels(self) -> dict[str, int]:
        ch = dict(self.inputs)
        for layer in self.layers:
            if layer.kind == CONCAT:
                ch[layer.name] = sum(ch[r] for r in layer.inputs)
            elif layer.kind == DROPOUT:
                ch[layer.name] = ch[layer.inputs[0]]
            else:
                ch[layer.name] = layer.out_maps
        return ch

    def channels(self, node: str) -> int:
        return self._channels[node]

    def bank_shapes(self) -> dict[str, tuple[int, int, int, int]]:
        shapes = {}
        for layer in self.layers:
            if layer.has_parameters:
                k = layer.maxout_k if layer.kind == CONV_BLOCK else 1
                r = self._channels[layer.inputs[0]]
                shapes[layer.name] = (layer.out_maps * k, r, layer.kernel_size, layer.kernel_size)
        return shapes

    def receptive_fields(self, node: str | None = None) -> dict[str, int]:
        """Receptive field of ``node`` (default: the sink) with respect to each
        graph input it depends on.

        Every path from the node back to the same input must give the same
        value; otherwise the architecture is rejected.
        """
        # per node: {graph input: (receptive field, jump)}
        info: dict[str, dict[str, tuple[int, int]]] = {
            name: {name: (1, 1)} for name in self.inputs
        }
        for layer in self.layers:
            if layer.kind == CONCAT:
                merged: dict[str, tuple[int, int]] = {}
                for ref in layer.inputs:
                    for src, val in info[ref].items():
                        if src in merged and merged[src] != val:
                            fields = {r: info[r][src][0] for r in layer.inputs if src in info[r]}
                            raise ReceptiveFieldMismatch(layer.name, src, fields)
                        merged[src] = val
                info[layer.name] = merged
            elif layer.kind == DROPOUT:
                info[layer.name] = dict(info[layer.inputs[0]])
            else:
                grown = {}
                for src, (rf, jump) in info[layer.inputs[0]].items():
                    rf += (layer.kernel_size - 1) * jump
                    if layer.kind == CONV_BLOCK:
                        rf += (layer.pool_p - 1) * jump
                        jump *= layer.pool_stride
                    grown[src] = (rf, jump)
                info[layer.name] = grown
        return {src: rf for src, (rf, _) in info[node or self.sink].items()}

    @property
    def primary_input(self) -> str:
        return "image" if "image" in self.inputs else next(iter(self.inputs))

    def receptive_field(self, source: str | None = None) -> int:
        return self.receptive_fields()[source or self.primary_input]

    def spatial_sizes(self, input_sizes: dict[str, tuple[int, int]]) -> dict[str, tuple[int, int]]:
        """Propagate ``(H, W)`` sizes through the graph."""
        sizes = {k: tuple(v) for k, v in input_sizes.items()}
        for layer in self.layers:
            if layer.kind == CONCAT:
                got = [sizes[r] for r in layer.inputs]
                if len(set(got)) != 1:
                    detail = ", ".join(f"{r}={s[0]}x{s[1]}" for r, s in zip(layer.inputs, got))
                    raise ShapeError(f"{layer.name}: concatenated inputs differ in size ({detail})")
                sizes[layer.name] = got[0]
            elif layer.kind == DROPOUT:
                sizes[layer.name] = sizes[layer.inputs[0]]
            else:
                h, w = sizes[layer.inputs[0]]
                h, w = h - layer.kernel_size + 1, w - layer.kernel_size + 1
                if layer.kind == CONV_BLOCK:
                    p, st = layer.pool_p, layer.pool_stride
                    h, w = (h - p) // st + 1, (w - p) // st + 1
                if h < 1 or w < 1:
                    raise ShapeError(f"{layer.name}: input too small, output would be {h}x{w}")
                sizes[layer.name] = (h, w)
        return sizes

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "inputs": [[k, v] for k, v in self.inputs.items()],
            "layers": [l.to_dict() for l in self.layers],
            "label_count": self.label_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelGraph":
        return cls(
            name=d["name"],
            inputs={k: int(v) for k, v in d["inputs"]},
            layers=[LayerSpec(**l) for l in d["layers"]],
            label_count=d.get("label_count", LABEL_COUNT),
        )


@dataclass
class ParameterStore:
    """Kernel banks keyed by layer name."""

    banks: dict[str, KernelBank] = field(default_factory=dict)
    version: int = 1

    def __getitem__(self, name: str) -> KernelBank:
        return self.banks[name]

    def __contains__(self, name: str) -> bool:
        return name in self.banks

    def __iter__(self):
        return iter(self.banks)

    def items(self):
        return self.banks.items()

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: b.copy() for k, b in self.banks.items()}, self.version)

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore(
            {k: KernelBank(b.weights.astype(dtype), b.bias.astype(dtype)) for k, b in self.items()},
            self.version,
        )

    def digest(self, names=None) -> str:
        """SHA-256 over the raw bytes of the selected banks (all by default)."""
        h = hashlib.sha256()
        for name in names if names is not None else self.banks:
            bank = self.banks[name]
            h.update(name.encode())
            h.update(np.ascontiguousarray(bank.weights).tobytes())
            h.update(np.ascontiguousarray(bank.bias).tobytes())
        return h.hexdigest()

    def weight_norms(self) -> tuple[float, float]:
        """``(sum |W|, sum W**2)`` over kernel weights (biases excluded)."""
        l1 = l2 = 0.0
        for bank in self.banks.values():
            w = bank.weights.astype(np.float64)
            l1 += float(np.abs(w).sum())
            l2 += float((w * w).sum())
        return l1, l2

    def check_against(self, graph: ModelGraph) -> None:
        shapes = graph.bank_shapes()
        if set(shapes) != set(self.banks):
            raise ShapeError(
                f"parameter banks {sorted(self.banks)} do not match graph layers {sorted(shapes)}"
            )
        for name, shape in shapes.items():
            if self.banks[name].weights.shape != shape:
                raise ShapeError(
                    f"bank {name!r} has shape {self.banks[name].weights.shape}, graph expects {shape}"
                )


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_parameters(graph: ModelGraph, label_frequencies, rng_seed: int = 0) -> ParameterStore:
    """Kernels from U(-0.005, 0.005); zero biases except the softmax layer,
    whose biases are the log label frequencies.

    Frequencies need not sum to one: a common offset of all output biases
    leaves the softmax unchanged.
    """
    freqs = np.asarray(label_frequencies, dtype=np.float64)
    if freqs.shape != (graph.label_count,):
        raise ValueError(f"expected {graph.label_count} label frequencies, got {freqs.shape}")
    if np.any(freqs <= 0):
        raise ValueError(f"label frequencies must be positive, got {freqs.tolist()}")
    rng = np.random.default_rng(rng_seed)
    banks = {}
    for name, shape in graph.bank_shapes().items():
        w = rng.uniform(-0.005, 0.005, size=shape).astype(np.float32)
        b = np.zeros(shape[0], dtype=np.float32)
        if name == graph.sink:
            b = np.log(freqs).astype(np.float32)
        banks[name] = KernelBank(w, b)
    return ParameterStore(banks)


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def apply_dropout(x: np.ndarray, prob: float, mode: str, rng: np.random.Generator | None = None):
    """Mask units with probability ``prob`` in training; scale by ``1 - prob`` at test time.

    Returns ``(output, mask)``; ``mask`` is ``None`` in test mode.
    """
    if not 0.0 <= prob < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {prob}")
    if mode == "test":
        if prob == 0.0:
            return x, None
        return (x * np.asarray(1.0 - prob, dtype=x.dtype)).astype(x.dtype), None
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    if prob == 0.0:
        return x, np.ones(x.shape, dtype=bool)
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    mask = rng.random(x.shape) >= prob
    return x * mask.astype(x.dtype), mask


@dataclass
class Activations:
    """All node outputs of one forward pass plus what backward needs."""

    values: dict[str, np.ndarray]
    caches: dict[str, object]
    mode: str
    single: bool
    sink: str

    @property
    def probabilities(self) -> np.ndarray:
        p = self.values[self.sink]
        return p[0] if self.single else p

    @property
    def logits(self) -> np.ndarray:
        z = self.caches[self.sink]["logits"]
        return z[0] if self.single else z


def _normalize_inputs(graph: ModelGraph, inputs) -> tuple[dict[str, np.ndarray], bool]:
    if not isinstance(inputs, dict):
        if len(graph.inputs) != 1:
            raise ValueError(f"graph {graph.name} needs named inputs {list(graph.inputs)}")
        inputs = {next(iter(graph.inputs)): inputs}
    missing = set(graph.inputs) - set(inputs)
    if missing:
        raise ValueError(f"missing graph inputs: {sorted(missing)}")
    out, singles = {}, set()
    for name, channels in graph.inputs.items():
        x = np.asarray(inputs[name])
        if x.ndim == 3:
            x, single = x[None], True
        elif x.ndim == 4:
            single = False
        else:
            raise ShapeError(f"input {name!r} must be (C, H, W) or (B, C, H, W), got {x.shape}")
        if x.shape[1] != channels:
            raise ShapeError(f"input {name!r} has {x.shape[1]} channels, graph expects {channels}")
        if not np.issubdtype(x.dtype, np.floating):
            x = x.astype(np.float32)
        out[name] = x
        singles.add(single)
    if len(singles) != 1 or len({x.shape[0] for x in out.values()}) != 1:
        raise ShapeError("graph inputs disagree on batch size")
    return out, singles.pop()


def forward(graph: ModelGraph, store: ParameterStore, inputs, mode: str = "test",
            rng: np.random.Generator | int | None = None) -> Activations:
    """Run every layer; the sink holds per-position label distributions."""
    values, single = _normalize_inputs(graph, inputs)
    sizes = graph.spatial_sizes({k: v.shape[2:] for k, v in values.items()})
    del sizes  # validates geometry up front, with both sizes in any diagnostic
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    if mode == "train" and not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    caches: dict[str, object] = {}
    for layer in graph.layers:
        src = [values[r] for r in layer.inputs]
        if layer.kind == CONV_BLOCK:
            o = K.conv2d_valid(src[0], store[layer.name])
            z, mcache = K.maxout_forward(o, layer.maxout_k)
            if layer.pool_p > 1 or layer.pool_stride > 1:
                h, pcache = K.max_pool_forward(z, layer.pool_p, layer.pool_stride)
            else:
                h, pcache = z, None
            values[layer.name] = h
            caches[layer.name] = {"maxout": mcache, "pool": pcache}
        elif layer.kind == CONCAT:
            values[layer.name] = np.concatenate(src, axis=1)
        elif layer.kind == DROPOUT:
            out, mask = apply_dropout(src[0], layer.dropout_prob, mode, rng)
            values[layer.name] = out
            caches[layer.name] = {"mask": mask}
        else:
            logits = K.conv2d_valid(src[0], store[layer.name])
            values[layer.name] = K.softmax_channels(logits)
            caches[layer.name] = {"logits": logits}
    return Activations(values, caches, mode, single, graph.sink)


def backward(graph: ModelGraph, store: ParameterStore, acts: Activations, labels,
             l1: float = 0.0, l2: float = 0.0, trainable=None):
    """Gradients of the batch-averaged NLL plus L1/L2 weight penalties.

    ``labels`` has the sink's spatial shape (with a leading batch axis for
    batched activations). Only banks in ``trainable`` (default: all) receive
    gradients, and backpropagation stops below the lowest of them.

    Returns ``(grads, loss)`` with ``grads`` a :class:`ParameterStore`.
    """
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= graph.label_count):
        raise ValueError(
            f"labels must lie in 0..{graph.label_count - 1}, got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    if acts.single:
        labels = labels[None]
    trainable = set(store.banks if trainable is None else trainable)

    logits = acts.caches[graph.sink]["logits"]
    nll, _, g_logits = K.softmax_nll(logits, labels)
    batch = logits.shape[0]
    data_loss = float(np.mean(nll))
    g_logits = g_logits / np.asarray(batch, dtype=g_logits.dtype)

    needs: dict[str, bool] = {name: False for name in graph.inputs}
    for layer in graph.layers:
        needs[layer.name] = layer.name in trainable or any(needs[r] for r in layer.inputs)

    grads: dict[str, KernelBank] = {}
    upstream: dict[str, np.ndarray] = {}

    def push(node, g):
        if not needs.get(node, False):
            return
        if node in upstream:
            upstream[node] = upstream[node] + g
        else:
            upstream[node] = g

    for layer in reversed(graph.layers):
        if layer.name == graph.sink:
            g = g_logits
        else:
            g = upstream.pop(layer.name, None)
            if g is None:
                continue
        src = layer.inputs
        if layer.kind in (CONV_BLOCK, OUTPUT):
            if layer.kind == CONV_BLOCK:
                cache = acts.caches[layer.name]
                if cache["pool"] is not None:
                    g = K.max_pool_backward(g, cache["pool"])
                g = K.maxout_backward(g, cache["maxout"])
            bank = store[layer.name]
            dx, dw, db = K.conv2d_valid_backward(g, acts.values[src[0]], bank,
                                                 need_input_grad=needs[src[0]])
            if layer.name in trainable:
                grads[layer.name] = KernelBank(dw, db)
            if dx is not None:
                push(src[0], dx)
        elif layer.kind == CONCAT:
            offset = 0
            for ref in src:
                c = acts.values[ref].shape[1]
                push(ref, g[:, offset:offset + c])
                offset += c
        else:
            mask = acts.caches[layer.name]["mask"]
            if acts.mode == "train":
                push(src[0], g * mask.astype(g.dtype) if mask is not None else g)
            else:
                push(src[0], g * np.asarray(1.0 - layer.dropout_prob, dtype=g.dtype))

    w_l1, w_l2 = store.weight_norms()
    loss = data_loss + l1 * w_l1 + l2 * w_l2
    for name, gb in grads.items():
        w = store[name].weights
        if l1:
            gb.weights = gb.weights + np.asarray(l1, dtype=w.dtype) * np.sign(w)
        if l2:
            gb.weights = gb.weights + np.asarray(2.0 * l2, dtype=w.dtype) * w
    return ParameterStore(grads), loss


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

MAGIC = b"GSEG"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")  # magic, format version, manifest byte length


class ModelFileError(ValueError):
    """Base class for unreadable model files."""


class BadMagicError(ModelFileError):
    pass


class UnsupportedVersionError(ModelFileError):
    pass


class TruncatedModelError(ModelFileError):
    pass


class ModelShapeError(ModelFileError):
    pass


@dataclass
class NetworkRecord:
    """One graph with its parameters, as stored in a model file."""

    role: str
    graph: ModelGraph
    store: ParameterStore
    label_frequencies: list[float] | None = None


def write_model_file(path, networks: list[NetworkRecord], architecture: str | None = None,
                     extra: dict | None = None) -> None:
    manifest = {
        "architecture": architecture or networks[0].graph.name,
        "extra": extra or {},
        "networks": [],
    }
    blobs = []
    for net in networks:
        net.store.check_against(net.graph)
        banks = []
        for name in net.graph.bank_shapes():
            bank = net.store[name]
            banks.append({"name": name, "shape": list(bank.weights.shape)})
            blobs.append(np.ascontiguousarray(bank.weights, dtype="<f4").tobytes())
            blobs.append(np.ascontiguousarray(bank.bias, dtype="<f4").tobytes())
        manifest["networks"].append({
            "role": net.role,
            "graph": net.graph.to_dict(),
            "label_frequencies": None if net.label_frequencies is None
            else [float(f) for f in net.label_frequencies],
            "parameter_version": net.store.version,
            "banks": banks,
        })
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(text)))
        fh.write(text)
        for blob in blobs:
            fh.write(blob)


def read_model_file(path) -> tuple[str, list[NetworkRecord], dict]:
    """Returns ``(architecture, networks, extra)``."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise TruncatedModelError(f"{path}: file has {len(data)} bytes, header needs {_HEADER.size}")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: format version {version}, supported {FORMAT_VERSION}")
    end = _HEADER.size + mlen
    if len(data) < end:
        raise TruncatedModelError(f"{path}: manifest needs {mlen} bytes, only {len(data) - _HEADER.size} present")
    try:
        manifest = json.loads(data[_HEADER.size:end])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"{path}: unreadable manifest ({exc})") from exc

    expected = end
    for net in manifest["networks"]:
        for bank in net["banks"]:
            expected += 4 * (math.prod(bank["shape"]) + bank["shape"][0])
    if len(data) < expected:
        raise TruncatedModelError(f"{path}: expected {expected} bytes, file has {len(data)}")
    if len(data) > expected:
        raise ModelFileError(f"{path}: {len(data) - expected} trailing bytes after parameters")

    offset = end
    networks = []
    for net in manifest["networks"]:
        graph = ModelGraph.from_dict(net["graph"])
        shapes = graph.bank_shapes()
        banks = {}
        for bank in net["banks"]:
            name, shape = bank["name"], tuple(bank["shape"])
            if shapes.get(name) != shape:
                raise ModelShapeError(
                    f"{path}: bank {name!r} stored as {shape}, architecture implies {shapes.get(name)}"
                )
            n = math.prod(shape)
            w = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
            offset += 4 * n
            b = np.frombuffer(data, dtype="<f4", count=shape[0], offset=offset)
            offset += 4 * shape[0]
            banks[name] = KernelBank(w.astype(np.float32), b.astype(np.float32))
        if set(banks) != set(shapes):
            raise ModelShapeError(f"{path}: banks {sorted(banks)} do not cover layers {sorted(shapes)}")
        networks.append(NetworkRecord(net["role"], graph,
                                      ParameterStore(banks, net.get("parameter_version", 1)),
                                      net.get("label_frequencies")))
    return manifest["architecture"], networks, manifest.get("extra", {})


def save_model(store: ParameterStore, graph: ModelGraph, path, label_frequencies=None) -> None:
    write_model_file(path, [NetworkRecord("main", graph, store, label_frequencies)])


def load_model(path) -> tuple[ModelGraph, ParameterStore]:
    _, networks, _ = read_model_file(path)
    if len(networks) != 1:
        raise ModelFileError(f"{path}: holds {len(networks)} networks; use read_model_file")
    return networks[0].graph, networks[0].store
