"""
Brain volumes, preprocessing, patch sampling and synthetic phantoms.

Volumes are held as ``(4, Z, Y, X)`` float32 arrays (modality-major, x
fastest in memory) with an optional ``(Z, Y, X)`` uint8 label grid. Axial
slices are ``data[:, z]``.

Label codes: 0 healthy, 1 necrosis, 2 edema, 3 non-enhancing tumor,
4 enhancing tumor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

MODALITIES = ("T1", "T1C", "T2", "FLAIR")
N_LABELS = 5

# class fractions of BRATS brains (healthy, necrosis, edema, non-enhancing, enhancing)
BRATS_FRACTIONS = (0.98, 0.0018, 0.011, 0.0012, 0.0038)


class VolumeFormatError(ValueError):
    """Raised for malformed volume files."""


@dataclass
class BrainVolume:
    data: np.ndarray                      # (4, Z, Y, X) float32
    labels: np.ndarray | None = None      # (Z, Y, X) uint8
    patient_id: str = ""
    voxel_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modalities: tuple[str, ...] = MODALITIES

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[0] != len(self.modalities):
            raise ValueError(
                f"data must be ({len(self.modalities)}, Z, Y, X), got shape {self.data.shape}"
            )
        unknown = [m for m in self.modalities if m not in MODALITIES]
        if unknown:
            raise VolumeFormatError(f"unknown modality names {unknown}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != self.data.shape[1:]:
                raise ValueError(
                    f"label grid {self.labels.shape} does not match modality grids {self.data.shape[1:]}"
                )
            if self.labels.size and self.labels.max() >= N_LABELS:
                raise VolumeFormatError(f"label value {int(self.labels.max())} exceeds {N_LABELS - 1}")
            self.labels = self.labels.astype(np.uint8)

    @property
    def dims(self) -> tuple[int, int, int]:
        """``(X, Y, Z)``."""
        z, y, x = self.data.shape[1:]
        return x, y, z

    @property
    def brain_mask(self) -> np.ndarray:
        return np.any(self.data != 0, axis=0)

    def label_histogram(self, brain_only: bool = True) -> "LabelHistogram":
        if self.labels is None:
            raise ValueError(f"volume {self.patient_id!r} has no labels")
        lab = self.labels[self.brain_mask] if brain_only else self.labels.ravel()
        return LabelHistogram(np.bincount(lab, minlength=N_LABELS))


@dataclass
class LabelHistogram:
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (N_LABELS,) or np.any(self.counts < 0):
            raise ValueError(f"histogram needs {N_LABELS} non-negative counts")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def fractions(self) -> np.ndarray:
        if self.total == 0:
            raise ValueError("empty histogram")
        return self.counts / self.total

    def __add__(self, other: "LabelHistogram") -> "LabelHistogram":
        return LabelHistogram(self.counts + other.counts)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def _pair_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".blob"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".blob")


def save_volume(volume: BrainVolume, path) -> None:
    """Write ``<name>.json`` plus ``<name>.blob`` (modality grids, then label bytes)."""
    sidecar, blob = _pair_paths(path)
    meta = {
        "dims": list(volume.dims),
        "voxel_spacing": [float(v) for v in volume.voxel_spacing],
        "modalities": list(volume.modalities),
        "has_labels": volume.labels is not None,
        "dtype": "f32le",
        "patient_id": volume.patient_id,
    }
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    with open(blob, "wb") as fh:
        fh.write(np.ascontiguousarray(volume.data, dtype="<f4").tobytes())
        if volume.labels is not None:
            fh.write(np.ascontiguousarray(volume.labels, dtype=np.uint8).tobytes())


def load_volume(path) -> BrainVolume:
    sidecar, blob = _pair_paths(path)
    try:
        meta = json.loads(sidecar.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{sidecar}: unreadable sidecar ({exc})") from exc
    if meta.get("dtype", "f32le") != "f32le":
        raise VolumeFormatError(f"{sidecar}: unsupported dtype {meta['dtype']!r}")
    modalities = tuple(meta["modalities"])
    unknown = [m for m in modalities if m not in MODALITIES]
    if unknown:
        raise VolumeFormatError(f"{sidecar}: unknown modality names {unknown}")
    x, y, z = (int(v) for v in meta["dims"])
    n = x * y * z
    expected = 4 * n * len(modalities) + (n if meta["has_labels"] else 0)
    raw = blob.read_bytes()
    if len(raw) != expected:
        kind = "truncated" if len(raw) < expected else "oversized"
        raise VolumeFormatError(
            f"{blob}: {kind} blob, sidecar dims {[x, y, z]} imply {expected} bytes, blob has {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", count=n * len(modalities)).reshape(len(modalities), z, y, x)
    labels = None
    if meta["has_labels"]:
        labels = np.frombuffer(raw, dtype=np.uint8, offset=4 * n * len(modalities)).reshape(z, y, x)
        if labels.size and labels.max() >= N_LABELS:
            raise VolumeFormatError(f"{blob}: label byte {int(labels.max())} exceeds {N_LABELS - 1}")
    return BrainVolume(data.astype(np.float32), None if labels is None else labels.copy(),
                       meta.get("patient_id", ""), tuple(meta.get("voxel_spacing", (1, 1, 1))),
                       modalities)


def list_volumes(directory) -> list[Path]:
    """Sidecar-less stems of every volume pair in ``directory``, sorted by name."""
    return sorted(p.with_suffix("") for p in Path(directory).glob("*.json"))


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def nonzero_percentile(values: np.ndarray, q: float) -> float:
    """Order statistic ``sorted[floor(q / 100 * (n - 1))]``.

    Using an actual sample value (no interpolation) makes clamping
    idempotent: a second clamp at the same rank changes nothing.
    """
    return float(np.percentile(values, q, method="lower"))


def preprocess(volume: BrainVolume, low: float = 1.0, high: float = 99.0) -> BrainVolume:
    """Clamp each modality to its [1st, 99th] percentile, then standardize.

    Statistics use the non-zero (brain) voxels of each channel; zeros stay zero.
    """
    out = np.zeros_like(volume.data)
    for c, name in enumerate(volume.modalities):
        chan = volume.data[c].astype(np.float64)
        mask = chan != 0
        vals = chan[mask]
        if vals.size == 0:
            raise ValueError(f"modality {name} has no non-zero voxels")
        lo, hi = nonzero_percentile(vals, low), nonzero_percentile(vals, high)
        vals = np.clip(vals, lo, hi)
        sd = vals.std()
        if not sd > 0:
            raise ValueError(f"modality {name} is constant over the brain; cannot standardize")
        out[c][mask] = ((vals - vals.mean()) / sd).astype(np.float32)
    return BrainVolume(out, volume.labels, volume.patient_id, volume.voxel_spacing, volume.modalities)


# ---------------------------------------------------------------------------
# patch sampling
# ---------------------------------------------------------------------------

@dataclass
class PatchExample:
    patch: np.ndarray     # (4, M, M)
    label: int
    source: tuple[int, int, int, int]  # (volume index, z, y, x)


@dataclass
class PatchSet:
    """Patch centers drawn from a list of volumes; patches are cut on demand.

    A patch of size ``size`` covers rows ``y - center .. y - center + size - 1``
    of its axial slice (same for columns), zero-padded outside the slice.
    ``flipped`` entries are left-right mirrored about their center pixel.
    """

    volumes: list[np.ndarray]
    sources: np.ndarray            # (n, 4) int: volume, z, y, x
    labels: np.ndarray             # (n,) uint8
    size: int
    center: int | None = None
    flipped: np.ndarray | None = None
    _padded: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.sources = np.asarray(self.sources, dtype=np.int64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.center is None:
            self.center = (self.size - 1) // 2
        if self.flipped is None:
            self.flipped = np.zeros(len(self.labels), dtype=bool)

    def __len__(self) -> int:
        return len(self.labels)

    def _volume(self, v: int) -> np.ndarray:
        if v not in self._padded:
            pad = max(self.center, self.size - 1 - self.center)
            self._padded[v] = np.pad(self.volumes[v], ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        return self._padded[v]

    def patches(self, index=None) -> np.ndarray:
        idx = np.arange(len(self)) if index is None else np.asarray(index)
        pad = max(self.center, self.size - 1 - self.center)
        m, c = self.size, self.center
        out = np.empty((len(idx), 4, m, m), dtype=np.float32)
        for k, i in enumerate(idx):
            v, z, y, x = self.sources[i]
            vol = self._volume(int(v))
            r0 = y - c + pad
            if self.flipped[i]:
                c0 = x - (m - 1 - c) + pad
                out[k] = vol[:, z, r0:r0 + m, c0:c0 + m][:, :, ::-1]
            else:
                c0 = x - c + pad
                out[k] = vol[:, z, r0:r0 + m, c0:c0 + m]
        return out

    def histogram(self) -> LabelHistogram:
        return LabelHistogram(np.bincount(self.labels, minlength=N_LABELS))

    def subset(self, index) -> "PatchSet":
        index = np.asarray(index)
        return PatchSet(self.volumes, self.sources[index], self.labels[index], self.size,
                        self.center, self.flipped[index], self._padded)

    def with_size(self, size: int, center: int | None = None) -> "PatchSet":
        """Same centers, different patch geometry."""
        return PatchSet(self.volumes, self.sources, self.labels, size, center, self.flipped)

    def __iter__(self) -> Iterator[PatchExample]:
        for i in range(len(self)):
            yield PatchExample(self.patches([i])[0], int(self.labels[i]),
                               tuple(int(s) for s in self.sources[i]))


def sample_patches(volumes: list[BrainVolume], mode: str, size: int, count: int,
                   seed: int = 0, classes=tuple(range(N_LABELS)), center: int | None = None) -> PatchSet:
    """Draw ``count`` patch centers from brain voxels.

    ``balanced``: pick a class uniformly from ``classes``, then a voxel of that
    class uniformly over all volumes. ``natural``: pick a brain voxel uniformly,
    so labels follow the corpus distribution.
    """
    if mode not in ("balanced", "natural"):
        raise ValueError(f"mode must be 'balanced' or 'natural', got {mode!r}")
    if not volumes:
        raise ValueError("no volumes to sample from")
    rng = np.random.default_rng(seed)
    coords, labs = [], []
    for v, vol in enumerate(volumes):
        if vol.labels is None:
            raise ValueError(f"volume {vol.patient_id or v!r} has no labels")
        zyx = np.argwhere(vol.brain_mask)
        coords.append(np.column_stack([np.full(len(zyx), v), zyx]))
        labs.append(vol.labels[tuple(zyx.T)])
    coords = np.concatenate(coords)
    labs = np.concatenate(labs)
    if len(coords) == 0:
        raise ValueError("volumes contain no brain voxels")

    if mode == "natural":
        pick = rng.integers(0, len(coords), size=count)
    else:
        classes = list(classes)
        pools = []
        for c in classes:
            pool = np.flatnonzero(labs == c)
            if len(pool) == 0:
                raise ValueError(f"class {c} is absent from every volume; cannot balance")
            pools.append(pool)
        which = rng.integers(0, len(classes), size=count)
        pick = np.empty(count, dtype=np.int64)
        for k, pool in enumerate(pools):
            sel = which == k
            pick[sel] = pool[rng.integers(0, len(pool), size=int(sel.sum()))]
    return PatchSet([vol.data for vol in volumes], coords[pick], labs[pick], size, center)


def flip_augment(patches: PatchSet, enabled: bool = False) -> PatchSet:
    """Append a left-right mirrored copy of every patch when ``enabled``."""
    if not enabled:
        return patches
    n = len(patches)
    return PatchSet(patches.volumes, np.concatenate([patches.sources, patches.sources]),
                    np.concatenate([patches.labels, patches.labels]), patches.size,
                    patches.center, np.concatenate([patches.flipped, ~patches.flipped]))


# ---------------------------------------------------------------------------
# phantoms
# ---------------------------------------------------------------------------

# base intensities per tissue class and modality (T1, T1C, T2, FLAIR)
TISSUE_LEVELS = {
    "white": (700.0, 720.0, 300.0, 420.0),
    "gray": (500.0, 520.0, 460.0, 520.0),
    "csf": (200.0, 210.0, 900.0, 160.0),
    1: (260.0, 280.0, 820.0, 560.0),   # necrosis
    2: (450.0, 460.0, 720.0, 820.0),   # edema
    3: (380.0, 420.0, 600.0, 650.0),   # non-enhancing
    4: (480.0, 920.0, 560.0, 700.0),   # enhancing
}


@dataclass(frozen=True)
class TumorParams:
    """Controls for one synthetic tumor.

    ``fractions`` are target shares of brain voxels for labels 0..4 (they
    are renormalized). ``irregularity`` scales the smooth radial distortion.
    """

    fractions: tuple[float, ...] = BRATS_FRACTIONS
    irregularity: float = 0.15
    elongation: float = 0.3
    noise_sd: float = 30.0
    bias_strength: float = 0.05
    blur_sigma: float = 0.7
    head_fill: float = 0.86


def _smooth_noise(rng, shape, sigma) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return n / (n.std() + 1e-12)


def make_phantom(seed: int = 0, dims=(64, 64, 64), tumor: TumorParams = TumorParams(),
                 patient_id: str | None = None) -> BrainVolume:
    """Synthetic head with a nested tumor.

    ``dims`` is ``(X, Y, Z)``. The ellipsoidal brain holds white matter, a
    gray-matter rim and CSF ventricles; the tumor is an edema shell around an
    enhancing rim, which encloses non-enhancing tissue around a necrotic core.
    Intensities are per-class base levels, partial-volume blurred, multiplied
    by a smooth bias field, plus Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    x_n, y_n, z_n = dims
    shape = (z_n, y_n, x_n)
    zz, yy, xx = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    mid = [(n - 1) / 2 for n in shape]
    semi = [tumor.head_fill * n / 2 * f for n, f in zip(shape, rng.uniform(0.9, 1.0, 3))]
    r_head = np.sqrt(((zz - mid[0]) / semi[0]) ** 2 + ((yy - mid[1]) / semi[1]) ** 2
                     + ((xx - mid[2]) / semi[2]) ** 2)
    brain = r_head <= 1.0
    n_brain = int(brain.sum())

    tissue = np.full(shape, "white", dtype=object)
    tissue[r_head > 0.72] = "gray"
    tissue[r_head > 0.97] = "csf"
    for side in (-1, 1):
        vent = np.sqrt(((zz - mid[0]) / (0.18 * semi[0])) ** 2
                       + ((yy - mid[1] - 0.05 * semi[1]) / (0.35 * semi[1])) ** 2
                       + ((xx - mid[2] - side * 0.16 * semi[2]) / (0.08 * semi[2])) ** 2)
        tissue[vent <= 1.0] = "csf"

    fr = np.asarray(tumor.fractions, dtype=np.float64)
    fr = fr / fr.sum()
    tumor_fraction = 1.0 - fr[0]
    radius = (tumor_fraction * n_brain * 3 / (4 * np.pi)) ** (1 / 3)
    stretch = 1.0 + tumor.elongation * rng.uniform(-1, 1, 3)
    stretch /= np.prod(stretch) ** (1 / 3)
    margin = (radius * stretch.max() * (1 + 3 * tumor.irregularity) + 2) / np.asarray(semi)
    if np.any(margin >= 1.0):
        raise ValueError(
            f"tumor (radius ~{radius:.1f} voxels) does not fit inside the head "
            f"(semi-axes {[round(float(s), 1) for s in semi]})"
        )
    # center inside the brain, away from the boundary by the tumor extent
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    offset = direction * rng.uniform(0.0, 1.0) * max(0.0, 0.9 - margin.max())
    centre = [m + o * s for m, o, s in zip(mid, offset, semi)]
    d = np.sqrt(((zz - centre[0]) / stretch[0]) ** 2 + ((yy - centre[1]) / stretch[1]) ** 2
                + ((xx - centre[2]) / stretch[2]) ** 2)
    d *= 1.0 + tumor.irregularity * _smooth_noise(rng, shape, 4.0)

    # thresholds on the distorted distance reproduce the target class shares exactly
    order = np.sort(d[brain])
    cum = np.cumsum([fr[1], fr[3], fr[4], fr[2]])  # inner to outer: 1, 3, 4, 2
    thresholds = [order[min(int(round(c * n_brain)), n_brain) - 1] if c * n_brain >= 1 else -1.0
                  for c in cum]
    labels = np.zeros(shape, dtype=np.uint8)
    inner = np.zeros(shape, dtype=bool)
    for lab, t in zip((1, 3, 4, 2), thresholds):
        ring = brain & (d <= t) & ~inner
        labels[ring] = lab
        inner |= ring
    if np.any(~brain & (d <= thresholds[-1])):
        raise ValueError("tumor extends outside the head; use smaller tumor fractions")

    base = np.zeros((4,) + shape, dtype=np.float64)
    for key, levels in TISSUE_LEVELS.items():
        sel = (labels == key) if isinstance(key, int) else ((tissue == key) & (labels == 0))
        sel &= brain
        for c in range(4):
            base[c][sel] = levels[c]
    if tumor.blur_sigma > 0:
        for c in range(4):
            blurred = ndimage.gaussian_filter(base[c], tumor.blur_sigma)
            weight = ndimage.gaussian_filter(brain.astype(np.float64), tumor.blur_sigma)
            base[c] = np.where(brain, blurred / np.maximum(weight, 1e-6), 0.0)
    bias = 1.0 + tumor.bias_strength * _smooth_noise(rng, shape, max(shape) / 4)
    data = base * bias[None] + rng.normal(0.0, tumor.noise_sd, base.shape)
    data = np.where(brain[None], np.maximum(data, 1.0), 0.0).astype(np.float32)
    return BrainVolume(data, labels, patient_id or f"phantom-{seed:04d}")
