"""
Dense (fully convolutional) slice prediction, the patch-by-patch baseline it
must agree with, volume prediction and connected-component cleanup.
"""

from __future__ import annotations

import json
import platform
import statistics
import time

import numpy as np
from scipy import ndimage
from threadpoolctl import threadpool_limits

from .architectures import CascadeNetwork, Network
from .kernels import ShapeError


def _padding(model) -> tuple[int, int]:
    before = model.center
    return before, model.receptive_field - 1 - before


def _check_slice(slice_: np.ndarray, channels: int = 4) -> np.ndarray:
    slice_ = np.asarray(slice_)
    if slice_.ndim != 3 or slice_.shape[0] != channels:
        raise ShapeError(f"expected a ({channels}, H, W) slice, got shape {slice_.shape}")
    return slice_.astype(np.float32, copy=False)


def pad_slice(model, slice_: np.ndarray) -> np.ndarray:
    before, after = _padding(model)
    return np.pad(slice_, ((0, 0), (before, after), (before, after)))


def predict_slice_dense(model, slice_: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Label every pixel of a ``(4, H, W)`` slice with one forward pass.

    The slice is zero-padded so the output grid coincides with the input
    grid. Returns ``(labels (H, W) uint8, probabilities (5, H, W))``; ties go
    to the lowest label index.
    """
    slice_ = _check_slice(slice_)
    probs = model.probabilities(pad_slice(model, slice_)[None])[0]
    return probs.argmax(axis=0).astype(np.uint8), probs


def predict_patchwise(model, slice_: np.ndarray, pixels=None, batch_size: int = 64):
    """Reference predictor: one receptive-field-sized patch per pixel.

    ``pixels`` is a sequence of ``(row, col)``; all pixels by default.
    Patches are forwarded in groups of ``batch_size`` independent examples.
    Returns ``(labels (n,), probabilities (n, 5))``.
    """
    slice_ = _check_slice(slice_)
    h, w = slice_.shape[1:]
    if pixels is None:
        pixels = [(i, j) for i in range(h) for j in range(w)]
    pixels = np.asarray(pixels, dtype=np.intp).reshape(-1, 2)
    if pixels.size and (pixels.min() < 0 or pixels[:, 0].max() >= h or pixels[:, 1].max() >= w):
        raise ShapeError(f"pixel list leaves the {h}x{w} slice")
    padded = pad_slice(model, slice_)
    rf = model.receptive_field
    probs = np.empty((len(pixels), 5), dtype=np.float32)
    for start in range(0, len(pixels), batch_size):
        chunk = pixels[start:start + batch_size]
        patches = np.stack([padded[:, i:i + rf, j:j + rf] for i, j in chunk])
        probs[start:start + len(chunk)] = model.probabilities(patches)[:, :, 0, 0]
    return probs.argmax(axis=1).astype(np.uint8), probs


def predict_cascade(first: Network, second: Network, variant: str, slice_: np.ndarray):
    """Dense prediction with a cascade; the first network runs once over the
    padded slice and its probability maps are reused by the second."""
    return predict_slice_dense(CascadeNetwork(variant, first, second), slice_)


def brain_mask(data: np.ndarray) -> np.ndarray:
    """Voxels where any modality is non-zero; ``data`` is ``(4, Z, Y, X)``."""
    return np.any(np.asarray(data) != 0, axis=0)


def predict_volume(model, data: np.ndarray, mask_background: bool = True) -> np.ndarray:
    """Slice-by-slice dense prediction over axial slices of ``(4, Z, Y, X)`` data."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 4 or data.shape[0] != 4:
        raise ShapeError(f"expected (4, Z, Y, X) volume data, got {data.shape}")
    mask = brain_mask(data)
    labels = np.zeros(data.shape[1:], dtype=np.uint8)
    for z in range(data.shape[1]):
        if mask_background and not mask[z].any():
            continue
        labels[z] = predict_slice_dense(model, data[:, z])[0]
    if mask_background:
        labels[~mask] = 0
    return labels


def remove_flat_blobs(labels: np.ndarray, tau: float = 0.1) -> np.ndarray:
    """Zero out 6-connected tumor components smaller than ``tau`` times the largest."""
    labels = np.asarray(labels)
    structure = ndimage.generate_binary_structure(labels.ndim, 1)
    comp, count = ndimage.label(labels != 0, structure=structure)
    if count <= 1:
        return labels.copy()
    sizes = np.bincount(comp.ravel())
    sizes[0] = 0
    keep = sizes >= tau * sizes.max()
    keep[0] = False
    out = labels.copy()
    out[~keep[comp]] = 0
    return out


def bench_inference(model, slice_dims=(64, 64), repetitions: int = 3, threads: int = 1,
                    seed: int = 0, batch_size: int = 64) -> dict:
    """Median wall-clock time of dense versus patch-by-patch prediction.

    Both predictors first run once on the same random slice and must agree
    (argmax everywhere, probabilities within 1e-5) before anything is timed.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    h, w = slice_dims
    slice_ = np.random.default_rng(seed).standard_normal((4, h, w)).astype(np.float32)
    with threadpool_limits(limits=threads):
        dense_labels, dense_probs = predict_slice_dense(model, slice_)
        patch_labels, patch_probs = predict_patchwise(model, slice_, batch_size=batch_size)
        max_diff = float(np.abs(dense_probs.reshape(5, -1).T - patch_probs).max())
        equivalent = bool(np.array_equal(dense_labels.ravel(), patch_labels) and max_diff <= 1e-5)

        dense_t, patch_t = [], []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            predict_slice_dense(model, slice_)
            dense_t.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            predict_patchwise(model, slice_, batch_size=batch_size)
            patch_t.append(time.perf_counter() - t0)
    dense_s, patch_s = statistics.median(dense_t), statistics.median(patch_t)
    return {
        "architecture": model.name,
        "slice_dims": [h, w],
        "repetitions": repetitions,
        "threads": threads,
        "dense_seconds": dense_s,
        "patchwise_seconds": patch_s,
        "ratio": patch_s / dense_s,
        "equivalence_passed": equivalent,
        "max_probability_difference": max_diff,
        "low_confidence": repetitions < 2,
        "machine": platform.machine(),
    }


def write_bench_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
