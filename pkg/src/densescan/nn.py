"""Layer primitives: valid convolution, activations, plain/shifted/banked pooling.

Determinism contract: every output element is accumulated in a fixed order
that does not depend on the batch extent M or on thread count, so the same
patch content produces bit-identical values whether it is processed alone,
inside a batch, or embedded in a whole-image pass.

* conv2d accumulates bias first, then input*kernel terms in nested
  (channel, dy, dx) order, each as a single float32 operation.
* mean pooling sums window elements in (dy, dx) scan order, then divides by
  the full window size.
* max pooling compares in (dy, dx) scan order and keeps values only.

The kernels are compiled with numba (strict IEEE, no fastmath); `prange`
only distributes independent output elements, so the thread count never
changes results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numba
import numpy as np
from numba import njit, prange

from . import util
from .tensor import Tensor, _wrap, concat

numba.config.THREADING_LAYER = "workqueue"

PoolKind = Literal["max", "mean", "subsample"]
POOL_KINDS = ("max", "mean", "subsample")
ActKind = Literal["tanh", "relu"]
ACT_KINDS = ("tanh", "relu")

_POOL_CODE = {"max": 0, "mean": 1, "subsample": 2}


class ShapeError(ValueError):
    """Layer input has the wrong rank or layout."""


class ChannelMismatch(ValueError):
    """Input channel count does not match the kernel."""


class SpatialTooSmall(ValueError):
    """Input spatial extent is smaller than the kernel."""


class WindowTooLarge(ValueError):
    """Pooling window does not fit the (shifted) input."""


class UnequalShiftOutputs(ValueError):
    """Shifted poolings of this input would disagree on output size."""


@dataclass(frozen=True)
class ConvWeights:
    """kernels: (out_channels, in_channels, k_h, k_w); bias: (out_channels,)."""

    kernels: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.kernels.ndim != 4:
            raise ValueError(f"kernels must be 4-d, got {self.kernels.shape}")
        if self.bias.shape != (self.kernels.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match {self.kernels.shape[0]} kernels"
            )
        if not np.all(np.isfinite(self.kernels.array)) or not np.all(
            np.isfinite(self.bias.array)
        ):
            raise ValueError("weights must be finite")

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.kernels.shape[2], self.kernels.shape[3]


def _apply_thread_cap() -> None:
    numba.set_num_threads(util.worker_count())


@njit(cache=True, parallel=True, fastmath=False)
def _conv2d_kernel(inp, ker, bias, out, s_h, s_w):  # pragma: no cover - compiled
    m_n, c_in, _, _ = inp.shape
    _, c_out, h_out, w_out = out.shape
    k_h = ker.shape[2]
    k_w = ker.shape[3]
    for t in prange(m_n * c_out * h_out):
        m = t // (c_out * h_out)
        rem = t % (c_out * h_out)
        o = rem // h_out
        y = rem % h_out
        for x in range(w_out):
            out[m, o, y, x] = bias[o]
        for c in range(c_in):
            for dy in range(k_h):
                row = y * s_h + dy
                for dx in range(k_w):
                    w = ker[o, c, dy, dx]
                    for x in range(w_out):
                        out[m, o, y, x] += inp[m, c, row, x * s_w + dx] * w


@njit(cache=True, parallel=True, fastmath=False)
def _pool_kernel(inp, out, p_h, p_w, s_h, s_w, off_y, off_x, mode):  # pragma: no cover
    m_n, c_n, _, _ = inp.shape
    h_out = out.shape[2]
    w_out = out.shape[3]
    inv = np.float32(1.0) / np.float32(p_h * p_w)
    for t in prange(m_n * c_n * h_out):
        m = t // (c_n * h_out)
        rem = t % (c_n * h_out)
        c = rem // h_out
        y = rem % h_out
        row0 = off_y + y * s_h
        for x in range(w_out):
            col0 = off_x + x * s_w
            if mode == 2:  # subsample: top-left element
                out[m, c, y, x] = inp[m, c, row0, col0]
            elif mode == 0:  # max, scan order (dy, dx)
                best = inp[m, c, row0, col0]
                for dy in range(p_h):
                    for dx in range(p_w):
                        v = inp[m, c, row0 + dy, col0 + dx]
                        if v > best:
                            best = v
                out[m, c, y, x] = best
            else:  # mean: sum in scan order, divide by full window size
                acc = np.float32(0.0)
                for dy in range(p_h):
                    for dx in range(p_w):
                        acc += inp[m, c, row0 + dy, col0 + dx]
                out[m, c, y, x] = acc * inv


@njit(cache=True, parallel=True, fastmath=False)
def _tanh_kernel(inp, out):  # pragma: no cover - compiled
    # Evaluated in double precision, rounded once to float32.
    flat_in = inp.reshape(-1)
    flat_out = out.reshape(-1)
    for i in prange(flat_in.size):
        flat_out[i] = np.float32(math.tanh(np.float64(flat_in[i])))


def conv2d(x: Tensor, weights: ConvWeights, stride: tuple[int, int] = (1, 1)) -> Tensor:
    """Valid cross-correlation (no kernel flip, no padding) per M sample.

    out(m,o,y,x) = bias[o] + sum over (c,dy,dx) of
    in(m, c, y*s_h+dy, x*s_w+dx) * kernel(o,c,dy,dx).
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be (M, c, H, W), got {x.shape}")
    m_n, c_in, h, w = x.shape
    if c_in != weights.in_channels:
        raise ChannelMismatch(
            f"input has {c_in} channels, kernel expects {weights.in_channels}"
        )
    k_h, k_w = weights.kernel_size
    s_h, s_w = stride
    if s_h < 1 or s_w < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if h < k_h or w < k_w:
        raise SpatialTooSmall(f"input {h}x{w} smaller than kernel {k_h}x{k_w}")
    h_out = (h - k_h) // s_h + 1
    w_out = (w - k_w) // s_w + 1
    out = np.empty((m_n, weights.out_channels, h_out, w_out), dtype=np.float32)
    _apply_thread_cap()
    _conv2d_kernel(x.array, weights.kernels.array, weights.bias.array, out, s_h, s_w)
    return _wrap(out)


def activation(x: Tensor, kind: ActKind) -> Tensor:
    """Elementwise tanh or relu; shape preserved."""
    if kind == "tanh":
        out = np.empty_like(x.array)
        _apply_thread_cap()
        _tanh_kernel(x.array, out)
        return _wrap(out)
    if kind == "relu":
        return _wrap(np.maximum(x.array, np.float32(0.0)))
    raise ValueError(f"unknown activation {kind!r}")


def pooled_extent(size: int, window: int, stride: int, shift: int) -> int:
    """Number of fully-inside windows starting at shift, shift+stride, ..."""
    return (size - shift - window) // stride + 1


def shifted_pool(
    x: Tensor,
    kind: PoolKind,
    window: tuple[int, int],
    stride: tuple[int, int],
    shift: tuple[int, int] = (0, 0),
) -> Tensor:
    """Pool with the window grid moved down/right by `shift` pixels.

    Windows start at rows shift_y, shift_y+s_h, ... and only fully-inside
    windows produce output.
    """
    if x.ndim != 4:
        raise ShapeError(f"pool input must be (M, c, H, W), got {x.shape}")
    if kind not in POOL_KINDS:
        raise ValueError(f"unknown pool kind {kind!r}")
    p_h, p_w = window
    s_h, s_w = stride
    off_y, off_x = shift
    if p_h < 1 or p_w < 1 or s_h < 1 or s_w < 1:
        raise ValueError("window and stride extents must be >= 1")
    if not (0 <= off_y < s_h and 0 <= off_x < s_w):
        raise ValueError(f"shift {shift} must lie in [0, stride) = [0, {stride})")
    m_n, c_n, h, w = x.shape
    if h - off_y < p_h or w - off_x < p_w:
        raise WindowTooLarge(
            f"window {window} does not fit input {h}x{w} at shift {shift}"
        )
    h_out = pooled_extent(h, p_h, s_h, off_y)
    w_out = pooled_extent(w, p_w, s_w, off_x)
    out = np.empty((m_n, c_n, h_out, w_out), dtype=np.float32)
    _apply_thread_cap()
    _pool_kernel(x.array, out, p_h, p_w, s_h, s_w, off_y, off_x, _POOL_CODE[kind])
    return _wrap(out)


def equal_shift_outputs(size: int, window: int, stride: int) -> bool:
    """True when all strides-many shifts yield the same pooled extent.

    Requires size >= window + stride - 1 and (size - window) % stride == stride - 1.
    For window == stride this is size % stride == stride - 1; for the 1x1
    subsample window it is size % stride == 0.
    """
    return size >= window + stride - 1 and (size - window) % stride == stride - 1


def multipool(
    x: Tensor, kind: PoolKind, window: tuple[int, int], stride: tuple[int, int]
) -> Tensor:
    """The full bank of s_h*s_w shifted poolings stacked along the M axis.

    Shifts run row-major (y outer, x inner); each shift is applied to all
    existing M samples as a block, so the new shift index becomes the outer
    part of the compound M.
    """
    if x.ndim != 4:
        raise ShapeError(f"multipool input must be (M, c, H, W), got {x.shape}")
    p_h, p_w = window
    s_h, s_w = stride
    _, _, h, w = x.shape
    if not (equal_shift_outputs(h, p_h, s_h) and equal_shift_outputs(w, p_w, s_w)):
        raise UnequalShiftOutputs(
            f"input {h}x{w} gives unequal outputs across shifts for "
            f"window {window} stride {stride}"
        )
    banks = [
        shifted_pool(x, kind, window, stride, (off_y, off_x))
        for off_y in range(s_h)
        for off_x in range(s_w)
    ]
    return concat(banks, axis=0)
