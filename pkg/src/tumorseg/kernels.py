"""
Numerical primitives: valid convolution, maxout, max-pooling and channel softmax.

Arrays follow the channel-major layout ``(C, H, W)``; a leading batch axis
``(B, C, H, W)`` is accepted everywhere and treated as independent examples.
Parameters and activations are stored as float32, reductions accumulate in
float64. Passing float64 arrays keeps the whole computation in float64, which
is what the finite-difference checks rely on.

Convolution is implemented as cross-correlation (no kernel flip). Since the
kernels are learned, the two orientations are interchangeable.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sp_fft


class ShapeError(ValueError):
    """Raised when array geometries are incompatible with an operation."""


class MissingCacheError(RuntimeError):
    """Raised when a backward pass is requested without its forward cache."""


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a (C, H, W) or (B, C, H, W) array, got shape {x.shape}")


def _unbatch(x: np.ndarray, single: bool) -> np.ndarray:
    return x[0] if single else x


def _storage_dtype(*arrays: np.ndarray) -> np.dtype:
    if any(np.asarray(a).dtype == np.float64 for a in arrays):
        return np.dtype(np.float64)
    return np.dtype(np.float32)


@dataclass
class KernelBank:
    """Weights ``(S, R, N, N)`` and biases ``(S,)`` of one convolution."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.bias = np.asarray(self.bias)
        w = self.weights
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"kernel weights must be (S, R, N, N), got {w.shape}")
        if self.bias.shape != (w.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {w.shape[0]} output maps"
            )

    @classmethod
    def zeros(cls, out_maps: int, in_channels: int, kernel_size: int, dtype=np.float32):
        return cls(
            np.zeros((out_maps, in_channels, kernel_size, kernel_size), dtype=dtype),
            np.zeros(out_maps, dtype=dtype),
        )

    @property
    def out_maps(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    def copy(self) -> "KernelBank":
        return KernelBank(self.weights.copy(), self.bias.copy())


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _correlate_direct(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # one kernel row at a time keeps the unfolded buffer N times smaller than im2col
    b, r, h, wd = x.shape
    s, _, nh, nw = w.shape
    qh, qw = h - nh + 1, wd - nw + 1
    acc = np.zeros((b, qh, qw, s), dtype=np.float64)
    for u in range(nh):
        win = sliding_window_view(x[:, :, u:u + qh, :], nw, axis=3)  # (B, R, Qh, Qw, Nw)
        acc += np.tensordot(win, w[:, :, u, :], axes=([1, 4], [1, 2]))
    return acc.transpose(0, 3, 1, 2)


def _correlate_positions(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    b, r, h, wd = x.shape
    s, _, nh, nw = w.shape
    qh, qw = h - nh + 1, wd - nw + 1
    out = np.empty((b, s, qh, qw), dtype=np.float64)
    for i in range(qh):
        for j in range(qw):
            out[:, :, i, j] = np.tensordot(x[:, :, i:i + nh, j:j + nw], w,
                                           axes=([1, 2, 3], [1, 2, 3]))
    return out


@lru_cache(maxsize=128)
def _inverse_dft_rows(n: int, q: int) -> np.ndarray:
    # first q outputs of a length-n inverse DFT, as a (q, n) matrix
    return np.exp(2j * np.pi * np.outer(np.arange(q), np.arange(n)) / n) / n


@lru_cache(maxsize=128)
def _inverse_rdft_cols(n: int, q: int) -> tuple[np.ndarray, np.ndarray]:
    # first q outputs of a length-n inverse real DFT from its n // 2 + 1 half-spectrum
    f = n // 2 + 1
    weight = np.full(f, 2.0)
    weight[0] = 1.0
    if n % 2 == 0:
        weight[-1] = 1.0
    e = np.exp(2j * np.pi * np.outer(np.arange(q), np.arange(f)) / n) * weight / n
    return np.ascontiguousarray(e.real), np.ascontiguousarray(e.imag)


def _correlate_fft(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # circular correlation of length H is exact on the H - N + 1 valid outputs;
    # the inverse transform is evaluated only there, as two small matrix products
    b, r, h, wd = x.shape
    s, _, nh, nw = w.shape
    qh, qw = h - nh + 1, wd - nw + 1
    xf = sp_fft.rfft2(x).transpose(2, 3, 0, 1)                          # (H, F, B, R)
    kf = np.conj(sp_fft.rfft2(w, s=(h, wd))).transpose(2, 3, 1, 0)      # (H, F, R, S)
    prod = np.matmul(xf, kf)                                            # (H, F, B, S)
    f = prod.shape[1]
    rows = np.dot(_inverse_dft_rows(h, qh), prod.reshape(h, -1)).reshape(qh, f, b * s)
    er, ei = _inverse_rdft_cols(wd, qw)
    out = (np.matmul(er, np.ascontiguousarray(rows.real))
           - np.matmul(ei, np.ascontiguousarray(rows.imag)))               # (Qh, Qw, B*S)
    return out.reshape(qh, qw, b, s).transpose(2, 3, 0, 1)


def _correlate(x: np.ndarray, w: np.ndarray, method: str = "auto") -> np.ndarray:
    """Valid cross-correlation of ``x (B, R, H, W)`` with ``w (S, R, N, N)``.

    Both arguments must be float64. ``method`` is one of ``direct``,
    ``positions``, ``fft`` or ``auto``; all of them compute the same sum and
    differ only in rounding.
    """
    if method == "auto":
        nh, nw = w.shape[2:]
        q = (x.shape[2] - nh + 1) * (x.shape[3] - nw + 1)
        if q <= 16:
            method = "positions"
        elif min(nh, nw) >= 5:
            method = "fft"
        else:
            method = "direct"
    if method == "direct":
        return _correlate_direct(x, w)
    if method == "positions":
        return _correlate_positions(x, w)
    if method == "fft":
        return _correlate_fft(x, w)
    raise ValueError(f"unknown correlation method {method!r}")


def _full_convolve(g: np.ndarray, w: np.ndarray, method: str = "auto") -> np.ndarray:
    """Input gradient of a valid correlation: ``g (B, S, Q, Q')`` -> ``(B, R, H, W)``."""
    b, s, qh, qw = g.shape
    _, r, n, _ = w.shape
    if method == "auto" and qh * qw <= 16:
        dx = np.zeros((b, r, qh + n - 1, qw + n - 1), dtype=np.float64)
        for i in range(qh):
            for j in range(qw):
                dx[:, :, i:i + n, j:j + n] += np.tensordot(g[:, :, i, j], w, axes=(1, 0))
        return dx
    gp = np.pad(g, ((0, 0), (0, 0), (n - 1, n - 1), (n - 1, n - 1)))
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return _correlate(gp, wf, method)


def _check_conv(x: np.ndarray, bank: KernelBank) -> None:
    _, r, h, w = x.shape
    n = bank.kernel_size
    if r != bank.in_channels or h < n or w < n:
        raise ShapeError(
            f"cannot convolve input of shape {(r, h, w)} with kernel bank of shape "
            f"{bank.weights.shape}: need {bank.in_channels} channels and spatial size >= {n}"
        )


def conv2d_valid(x: np.ndarray, bank: KernelBank, method: str = "auto") -> np.ndarray:
    """Valid-mode multi-channel convolution plus bias.

    Maps ``(R, M, M')`` to ``(S, M - N + 1, M' - N + 1)``. ``method`` selects
    the summation strategy (see :func:`_correlate`); the default picks the
    cheapest one for the geometry.
    """
    xb, single = _as_batch(x)
    _check_conv(xb, bank)
    out = _correlate(xb.astype(np.float64), bank.weights.astype(np.float64), method)
    out += bank.bias.astype(np.float64)[None, :, None, None]
    return _unbatch(out.astype(_storage_dtype(x, bank.weights)), single)


def conv2d_valid_backward(
    grad_out: np.ndarray,
    x: np.ndarray,
    bank: KernelBank,
    need_input_grad: bool = True,
    method: str = "auto",
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d_valid` with respect to input, weights and bias.

    The forward input ``x`` is the only cache the convolution needs.
    """
    if x is None:
        raise MissingCacheError("conv2d_valid backward needs the forward input")
    gb, single = _as_batch(grad_out)
    xb, _ = _as_batch(x)
    _check_conv(xb, bank)
    n = bank.kernel_size
    qh, qw = xb.shape[2] - n + 1, xb.shape[3] - n + 1
    if gb.shape != (xb.shape[0], bank.out_maps, qh, qw):
        raise ShapeError(
            f"upstream gradient shape {gb.shape} does not match conv output "
            f"{(xb.shape[0], bank.out_maps, qh, qw)}"
        )
    dtype = _storage_dtype(x, bank.weights, grad_out)
    g = gb.astype(np.float64)
    x64 = xb.astype(np.float64)

    # dW is itself a valid correlation: batch plays the channel role, g the kernel
    dw = _correlate(np.ascontiguousarray(x64.transpose(1, 0, 2, 3)),
                    np.ascontiguousarray(g.transpose(1, 0, 2, 3)), method)
    dw = dw.transpose(1, 0, 2, 3)
    db = g.sum(axis=(0, 2, 3))

    dx = None
    if need_input_grad:
        dx = _unbatch(_full_convolve(g, bank.weights.astype(np.float64), method)
                      .astype(dtype), single)
    return dx, dw.astype(dtype), db.astype(dtype)


# ---------------------------------------------------------------------------
# maxout
# ---------------------------------------------------------------------------

@dataclass
class MaxoutCache:
    argmax: np.ndarray  # (B, S, H, W) index of the winning map inside its group
    k: int
    single: bool


def maxout_forward(x: np.ndarray, k: int) -> tuple[np.ndarray, MaxoutCache]:
    xb, single = _as_batch(x)
    b, c, h, w = xb.shape
    if k < 1 or c % k:
        raise ShapeError(f"channel count {c} is not divisible by maxout group size {k}")
    grouped = xb.reshape(b, c // k, k, h, w)
    out = grouped[:, :, 0].copy()
    arg = np.zeros(out.shape, dtype=np.int8 if k < 128 else np.int32)
    # strict '>' keeps the first maximum, so ties go to the lowest map index
    for j in range(1, k):
        cand = grouped[:, :, j]
        better = cand > out
        np.copyto(out, cand, where=better)
        np.copyto(arg, j, where=better)
    return _unbatch(out, single), MaxoutCache(arg, k, single)


def maxout(x: np.ndarray, k: int) -> np.ndarray:
    """Per-position maximum over consecutive groups of ``k`` feature maps."""
    return maxout_forward(x, k)[0]


def maxout_backward(grad_out: np.ndarray, cache: MaxoutCache | None) -> np.ndarray:
    if cache is None:
        raise MissingCacheError("maxout backward needs the forward argmax cache")
    gb, _ = _as_batch(grad_out)
    b, s, h, w = gb.shape
    if cache.argmax.shape != gb.shape:
        raise ShapeError(f"gradient shape {gb.shape} does not match cache {cache.argmax.shape}")
    dx = np.zeros((b, s, cache.k, h, w), dtype=gb.dtype)
    for j in range(cache.k):
        np.copyto(dx[:, :, j], gb, where=cache.argmax == j)
    return _unbatch(dx.reshape(b, s * cache.k, h, w), cache.single)


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------

@dataclass
class PoolCache:
    argmax: np.ndarray  # (B, C, D, D') flat offset a * p + b of the winner in its window
    p: int
    stride: int
    in_shape: tuple
    single: bool


def _pool_geometry(size: int, p: int, stride: int) -> int:
    if p < 1 or stride < 1 or p > size or (size - p) % stride:
        raise ShapeError(
            f"pooling window {p} with stride {stride} does not tile an axis of size {size}"
        )
    return (size - p) // stride + 1


def max_pool_forward(x: np.ndarray, p: int, stride: int = 1) -> tuple[np.ndarray, PoolCache]:
    xb, single = _as_batch(x)
    b, c, h, w = xb.shape
    dh, dw = _pool_geometry(h, p, stride), _pool_geometry(w, p, stride)
    span_h, span_w = (dh - 1) * stride + 1, (dw - 1) * stride + 1
    out = xb[:, :, 0:span_h:stride, 0:span_w:stride].copy()
    arg = np.zeros(out.shape, dtype=np.int16)
    # window offsets are scanned in row-major order; strict '>' keeps the first maximum
    for a in range(p):
        for bb in range(p):
            if a == 0 and bb == 0:
                continue
            cand = xb[:, :, a:a + span_h:stride, bb:bb + span_w:stride]
            better = cand > out
            np.copyto(out, cand, where=better)
            np.copyto(arg, a * p + bb, where=better)
    return _unbatch(out, single), PoolCache(arg, p, stride, xb.shape, single)


def max_pool(x: np.ndarray, p: int, stride: int = 1) -> np.ndarray:
    """Max over ``p x p`` windows placed every ``stride`` pixels (no padding)."""
    return max_pool_forward(x, p, stride)[0]


def max_pool_backward(grad_out: np.ndarray, cache: PoolCache | None) -> np.ndarray:
    if cache is None:
        raise MissingCacheError("max_pool backward needs the forward argmax cache")
    gb, _ = _as_batch(grad_out)
    if gb.shape != cache.argmax.shape:
        raise ShapeError(f"gradient shape {gb.shape} does not match cache {cache.argmax.shape}")
    p, s = cache.p, cache.stride
    dh, dw = gb.shape[2:]
    span_h, span_w = (dh - 1) * s + 1, (dw - 1) * s + 1
    dx = np.zeros(cache.in_shape, dtype=gb.dtype)
    for a in range(p):
        for bb in range(p):
            routed = np.where(cache.argmax == a * p + bb, gb, 0)
            dx[:, :, a:a + span_h:s, bb:bb + span_w:s] += routed
    return _unbatch(dx, cache.single)


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def softmax_channels(x: np.ndarray) -> np.ndarray:
    """Softmax across the channel axis at every spatial position."""
    xb, single = _as_batch(x)
    a = xb.astype(np.float64)
    a = a - a.max(axis=1, keepdims=True)
    e = np.exp(a)
    e /= e.sum(axis=1, keepdims=True)
    return _unbatch(e.astype(_storage_dtype(x)), single)


def softmax_nll(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Negative log-likelihood of integer ``labels`` under a channel softmax.

    Returns ``(loss, probs, grad)`` where ``loss`` has one entry per example
    (summed over spatial positions) and ``grad`` is ``probs - onehot``.
    """
    lb, single = _as_batch(logits)
    labels = np.asarray(labels)
    if single:
        labels = labels[None]
    b, c, h, w = lb.shape
    if labels.shape != (b, h, w):
        raise ShapeError(f"label shape {labels.shape} does not match logits {lb.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in 0..{c - 1}, got range "
                         f"[{labels.min()}, {labels.max()}]")
    a = lb.astype(np.float64)
    a = a - a.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(a).sum(axis=1, keepdims=True))
    log_p = a - log_z
    idx = labels.astype(np.intp)[:, None]
    picked = np.take_along_axis(log_p, idx, axis=1)[:, 0]
    loss = -picked.sum(axis=(1, 2))
    probs = np.exp(log_p)
    grad = probs.copy()
    np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=1) - 1.0, axis=1)
    dtype = _storage_dtype(logits)
    if single:
        return loss[0], probs[0].astype(dtype), grad[0].astype(dtype)
    return loss, probs.astype(dtype), grad.astype(dtype)
