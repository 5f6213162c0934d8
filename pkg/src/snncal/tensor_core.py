"""Dense float64 tensor helpers.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. The functions here add the shape checks and conventions the rest of
the package relies on: cross-correlation convolution with zero padding,
channel-axis means, and a nearest-rank percentile.
"""
from __future__ import annotations

import math
from fractions import Fraction
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

DTYPE = np.float64


def tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Build a float64 tensor from external data, rejecting NaN/Inf."""
    arr = np.array(data, dtype=DTYPE, order="C")
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise DimensionError(f"shape must have positive sizes, got {shape}")
        if math.prod(shape) != arr.size:
            raise DimensionError(f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor data contains NaN or Inf")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise DimensionError(
            f"non-integer output size: (n={n} + 2*{pad} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Patches of a ``B x C x H x W`` batch as ``B x H' x W' x (C*kh*kw)``."""
    _, _, h, w = x.shape
    _out_size(h, kh, stride, pad)
    _out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # B, C, H', W', kh, kw -> B, H', W', C, kh, kw
    win = win.transpose(0, 2, 3, 1, 4, 5)
    return win.reshape(win.shape[0], win.shape[1], win.shape[2], -1)


def conv2d(
    x: np.ndarray,
    kernel: np.ndarray,
    stride: int = 1,
    pad: int = 0,
    bias: np.ndarray | None = None,
) -> np.ndarray:
    """2-D cross-correlation (no kernel flip) with zero padding.

    ``x`` may be a single ``C x H x W`` sample or a ``B x C x H x W`` batch;
    the result has the same rank.
    """
    x = np.asarray(x, dtype=DTYPE)
    kernel = np.asarray(kernel, dtype=DTYPE)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects C x H x W input and 4-D kernel, got {x.shape}, {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if x.shape[1] != c_in:
        raise DimensionError(f"input has {x.shape[1]} channels, kernel expects {c_in}")
    cols = im2col(x, kh, kw, stride, pad)
    out = cols @ kernel.reshape(c_out, -1).T  # B, H', W', C_out
    if bias is not None:
        out = out + bias
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return out[0] if single else out


def avgpool2d(x: np.ndarray, size: int) -> np.ndarray:
    """Non-overlapping average pooling over the last two axes."""
    x = np.asarray(x, dtype=DTYPE)
    h, w = x.shape[-2:]
    if h % size or w % size:
        raise DimensionError(f"pool size {size} does not divide spatial shape {(h, w)}")
    lead = x.shape[:-2]
    r = x.reshape(*lead, h // size, size, w // size, size)
    return r.mean(axis=(-3, -1))


def channel_mean(t: np.ndarray) -> np.ndarray:
    """Mean over every axis except axis 1 (the channel axis)."""
    t = np.asarray(t, dtype=DTYPE)
    if t.ndim < 2:
        raise DimensionError(f"channel_mean needs rank >= 2, got shape {t.shape}")
    axes = (0,) + tuple(range(2, t.ndim))
    return t.mean(axis=axes)


def percentile(values, p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value (1-based).

    ``p = 0`` returns the minimum.
    """
    v = np.sort(np.asarray(values, dtype=DTYPE).ravel())
    if v.size == 0:
        raise ValueError("percentile of an empty sequence")
    if not 0.0 <= p <= 100.0:
        raise ValueError(f"percentile p must lie in [0, 100], got {p}")
    # decimal reading of p, so 99.9% of 1000 is rank 999 and not 1000
    rank = math.ceil(Fraction(repr(float(p))) * v.size / 100)
    return float(v[max(rank, 1) - 1])
