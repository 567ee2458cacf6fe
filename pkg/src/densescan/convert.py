"""Compile a patch network into a whole-image plan and execute it.

The transformation: pad the image so a patch surrounds every pixel, run
pooling-free layers unchanged, replace each pooling layer with the bank of
all stride*stride shifted poolings stacked along an extra sample axis M,
then interleave M back into the spatial axes with transpose/reshape steps
and crop to the requested output size. The result equals running the patch
network independently on every pixel-centered patch, without recomputing
overlapping intermediate values.

M bookkeeping: every pooling multiplies M by s_h*s_w, with the new shift
index outermost, so after n poolings the compound M decomposes row-major as
(y_n, x_n, ..., y_1, x_1). The unwarp chain walks poolings in reverse
order: one reshape exposes the outermost shift pair next to the spatial
axes, one transpose moves the y-shift inside the y axis, and one reshape
fuses both pairs, growing the spatial extent by the stride. Output pixel
(y, x) for a single pooling of stride s therefore draws from shift
(y mod s, x mod s), cell (y div s, x div s); multiple poolings nest the
same rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor
from .netspec import (
    Act,
    Conv,
    NetworkSpec,
    PatchGeometry,
    Pool,
    WeightSet,
    infer_shapes,
    run_layers,
)
from .tensor import Tensor, _wrap
from . import nn


class NoFeasiblePadding(ValueError):
    """No bottom/right padding aligns every pooling stage (patch too small)."""


class BudgetTooSmall(ValueError):
    """Even a single-pixel output tile exceeds the memory budget."""


class GateFailure(RuntimeError):
    """A correctness gate (plan vs oracle) did not pass."""


# --- plan steps -------------------------------------------------------------


@dataclass(frozen=True)
class PadStep:
    """Zero-pad to patch geometry plus alignment extra (bottom/right only)."""

    top: int
    bottom: int
    left: int
    right: int
    extra: tuple[int, int]
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    kind = "pad"


@dataclass(frozen=True)
class ConvStep:
    ordinal: int
    kernel: tuple[int, int]
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    kind = "conv"


@dataclass(frozen=True)
class ActStep:
    act: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    kind = "act"


@dataclass(frozen=True)
class MultipoolStep:
    pool: str
    window: tuple[int, int]
    stride: tuple[int, int]
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    kind = "multipool"


@dataclass(frozen=True)
class UnwarpPrepareStep:
    """(M,k,y,x) -> (M,f) -> transpose -> (f,M) -> (k,y,x,M); one copy total."""

    flat_shape: tuple[int, int]
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    kind = "unwarp_prepare"


@dataclass(frozen=True)
class UnwarpPoolStep:
    """Interleave one pooling's shift pair into the spatial axes."""

    stride: tuple[int, int]
    split_shape: tuple[int, ...]
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    kind = "unwarp_pool"


@dataclass(frozen=True)
class FinalViewStep:
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    kind = "final_view"


@dataclass(frozen=True)
class CropStep:
    height: int
    width: int
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    kind = "crop"


Step = (
    PadStep
    | ConvStep
    | ActStep
    | MultipoolStep
    | UnwarpPrepareStep
    | UnwarpPoolStep
    | FinalViewStep
    | CropStep
)


@dataclass(frozen=True)
class Tile:
    """Output rectangle plus the input overlap shared with neighbours."""

    y: int
    x: int
    height: int
    width: int
    overlap: tuple[int, int]


@dataclass(frozen=True)
class DensePlan:
    """Executable whole-image plan compiled from a patch network."""

    source: NetworkSpec  # stride-decomposed
    geometry: PatchGeometry
    extra_pad: tuple[int, int]
    steps: tuple[Step, ...]
    m_ledger: tuple[tuple[int, int], ...]
    dense_input: tuple[int, int]
    out_channels: int

    @property
    def m_sizes(self) -> tuple[int, ...]:
        """M extent after each successive pooling bank."""
        sizes = []
        m = 1
        for s_h, s_w in self.m_ledger:
            m *= s_h * s_w
            sizes.append(m)
        return tuple(sizes)

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return (self.out_channels, self.dense_input[0], self.dense_input[1])


# --- spec rewriting ---------------------------------------------------------


def decompose_strided_convs(spec: NetworkSpec) -> NetworkSpec:
    """Rewrite conv stride (t_h,t_w) != (1,1) as unit-stride conv + subsampling.

    A strided conv keeps every t-th valid output; computing all of them and
    subsampling the grid gives bit-identical values per kept element.
    """
    layers: list = []
    changed = False
    for layer in spec.layers:
        if isinstance(layer, Conv) and layer.stride != (1, 1):
            layers.append(Conv(layer.out_channels, layer.kernel, (1, 1)))
            layers.append(Pool("subsample", (1, 1), layer.stride))
            changed = True
        else:
            layers.append(layer)
    if not changed:
        return spec
    return NetworkSpec(spec.patch, spec.in_channels, tuple(layers))


# --- padding solver ---------------------------------------------------------


def _axis_params(spec: NetworkSpec, axis: int) -> list[tuple[str, int, int]]:
    """Per-layer (kind, window, stride) along one spatial axis."""
    params = []
    for layer in spec.layers:
        if isinstance(layer, Conv):
            params.append(("conv", layer.kernel[axis], layer.stride[axis]))
        elif isinstance(layer, Pool):
            params.append(("pool", layer.window[axis], layer.stride[axis]))
    return params


def _simulate_axis(params, size: int) -> int | None:
    """Dense extent after all layers, or None if any stage misaligns."""
    for kind, window, stride in params:
        if kind == "conv":
            if size < window:
                return None
            size = size - window + 1
        else:
            if not nn.equal_shift_outputs(size, window, stride):
                return None
            size = (size - window) // stride + 1
    return size


def _solve_axis(spec: NetworkSpec, axis: int, extent: int) -> int:
    params = _axis_params(spec, axis)
    patch = spec.patch[axis]
    stride_product = 1
    for kind, _, stride in params:
        if kind == "pool":
            stride_product *= stride
    bound = max(1, stride_product * stride_product)
    for extra in range(bound):
        final = _simulate_axis(params, extent + patch - 1 + extra)
        if final is None:
            continue
        # Alignment guarantees full coverage: one unwarped row per padded
        # patch position.
        assert final * stride_product == extent + extra
        return extra
    raise NoFeasiblePadding(
        f"no alignment padding below {bound} fits axis {axis} "
        f"(extent {extent}, patch {patch})"
    )


def solve_padding(spec: NetworkSpec, image: tuple[int, int]) -> tuple[int, int]:
    """Smallest (e_h, e_w) appended bottom/right so every pooling bank aligns.

    Alignment means every pooling stage input has all shifted poolings agree
    on output size, which also makes the unwarped map cover the image.
    """
    dspec = decompose_strided_convs(spec)
    infer_shapes(dspec)
    return (
        _solve_axis(dspec, 0, image[0]),
        _solve_axis(dspec, 1, image[1]),
    )


# --- compilation ------------------------------------------------------------


def build_unwarp(
    m_ledger, y_star: int, x_star: int, channels: int
) -> tuple[list[Step], tuple[int, int]]:
    """Steps interleaving the compound M back into the spatial axes.

    Input layout (M, k, y*, x*); output (k, y*.prod(s_h), x*.prod(s_w)).
    The prepare stage needs only one materialized transpose: fusing
    (k, y*, x*) to one axis first makes (M, f*) -> (f*, M) the whole move.
    Pooling banks are then unwound last-to-first.
    """
    m_total = 1
    for s_h, s_w in m_ledger:
        m_total *= s_h * s_w
    f_star = channels * y_star * x_star
    steps: list[Step] = [
        UnwarpPrepareStep(
            flat_shape=(m_total, f_star),
            in_shape=(m_total, channels, y_star, x_star),
            out_shape=(channels, y_star, x_star, m_total),
        )
    ]
    y, x, rest = y_star, x_star, m_total
    for s_h, s_w in reversed(tuple(m_ledger)):
        rest //= s_h * s_w
        split = (channels, y, x, s_h, s_w, rest)
        in_shape = steps[-1].out_shape
        y, x = y * s_h, x * s_w
        steps.append(
            UnwarpPoolStep(
                stride=(s_h, s_w),
                split_shape=split,
                in_shape=in_shape,
                out_shape=(channels, y, x, rest),
            )
        )
    return steps, (y, x)


def compile_plan(spec: NetworkSpec, image: tuple[int, int]) -> DensePlan:
    """Compile the patch network into the whole-image plan for `image` (H, W)."""
    i_h, i_w = image
    if i_h < 1 or i_w < 1:
        raise ValueError(f"image extents must be >= 1, got {image}")
    dspec = decompose_strided_convs(spec)
    infer_shapes(dspec)
    geometry = PatchGeometry.for_patch(*dspec.patch)
    e_h, e_w = (
        _solve_axis(dspec, 0, i_h),
        _solve_axis(dspec, 1, i_w),
    )

    steps: list[Step] = []
    m, c = 1, dspec.in_channels
    h = i_h + geometry.p_h - 1 + e_h
    w = i_w + geometry.p_w - 1 + e_w
    steps.append(
        PadStep(
            top=geometry.pad_top,
            bottom=geometry.pad_bottom + e_h,
            left=geometry.pad_left,
            right=geometry.pad_right + e_w,
            extra=(e_h, e_w),
            in_shape=(c, i_h, i_w),
            out_shape=(1, c, h, w),
        )
    )
    m_ledger: list[tuple[int, int]] = []
    ordinal = 0
    for layer in dspec.layers:
        in_shape = (m, c, h, w)
        if isinstance(layer, Conv):
            h = h - layer.kernel[0] + 1
            w = w - layer.kernel[1] + 1
            c = layer.out_channels
            steps.append(
                ConvStep(ordinal, layer.kernel, in_shape, (m, c, h, w))
            )
            ordinal += 1
        elif isinstance(layer, Pool):
            s_h, s_w = layer.stride
            assert nn.equal_shift_outputs(h, layer.window[0], s_h)
            assert nn.equal_shift_outputs(w, layer.window[1], s_w)
            h = (h - layer.window[0]) // s_h + 1
            w = (w - layer.window[1]) // s_w + 1
            m *= s_h * s_w
            m_ledger.append((s_h, s_w))
            steps.append(
                MultipoolStep(
                    layer.kind, layer.window, layer.stride, in_shape, (m, c, h, w)
                )
            )
        else:
            steps.append(ActStep(layer.kind, in_shape, in_shape))

    if m_ledger:
        unwarp_steps, (full_h, full_w) = build_unwarp(m_ledger, h, w, c)
        steps.extend(unwarp_steps)
        steps.append(
            FinalViewStep(
                in_shape=steps[-1].out_shape, out_shape=(c, full_h, full_w)
            )
        )
    else:
        full_h, full_w = h, w
        steps.append(
            FinalViewStep(in_shape=(1, c, h, w), out_shape=(c, full_h, full_w))
        )
    assert (full_h, full_w) == (i_h + e_h, i_w + e_w), "unwarp must cover the image"
    steps.append(
        CropStep(
            height=i_h,
            width=i_w,
            in_shape=(c, full_h, full_w),
            out_shape=(c, i_h, i_w),
        )
    )
    return DensePlan(
        source=dspec,
        geometry=geometry,
        extra_pad=(e_h, e_w),
        steps=tuple(steps),
        m_ledger=tuple(m_ledger),
        dense_input=(i_h, i_w),
        out_channels=c,
    )


# --- execution --------------------------------------------------------------


def _apply_step(step: Step, x: Tensor, weights: WeightSet, prepadded: bool) -> Tensor:
    if isinstance(step, PadStep):
        if not prepadded:
            x = tensor.pad(x, 1, step.top, step.bottom)
            x = tensor.pad(x, 2, step.left, step.right)
        else:
            x = tensor.pad(x, 1, 0, step.extra[0])
            x = tensor.pad(x, 2, 0, step.extra[1])
        return x.reshape((1,) + x.shape)
    if isinstance(step, ConvStep):
        return nn.conv2d(x, weights.convs[step.ordinal])
    if isinstance(step, ActStep):
        return nn.activation(x, step.act)
    if isinstance(step, MultipoolStep):
        return nn.multipool(x, step.pool, step.window, step.stride)
    if isinstance(step, UnwarpPrepareStep):
        flat = x.reshape(step.flat_shape)
        swapped = tensor.transpose(flat, 0, 1)
        return swapped.reshape(step.out_shape)
    if isinstance(step, UnwarpPoolStep):
        split = x.reshape(step.split_shape)
        swapped = tensor.transpose(split, 2, 3)
        return swapped.reshape(step.out_shape)
    if isinstance(step, FinalViewStep):
        return x.reshape(step.out_shape)
    if isinstance(step, CropStep):
        x = tensor.crop(x, 1, 0, step.height)
        return tensor.crop(x, 2, 0, step.width)
    raise TypeError(f"unknown step {step!r}")


def execute_plan(
    plan: DensePlan,
    image: Tensor,
    weights: WeightSet,
    trace=None,
    geometry_prepadded: bool = False,
) -> Tensor:
    """Run the plan on a (c, I_h, I_w) image; returns (k, I_h, I_w).

    With geometry_prepadded=True the image must already carry the patch
    border (shape (c, I_h+P_h-1, I_w+P_w-1)); only alignment padding is
    applied. Used by tiled execution, where the border holds neighbouring
    image content instead of zeros.
    """
    i_h, i_w = plan.dense_input
    geo = plan.geometry
    if geometry_prepadded:
        expect = (
            plan.source.in_channels,
            i_h + geo.p_h - 1,
            i_w + geo.p_w - 1,
        )
    else:
        expect = (plan.source.in_channels, i_h, i_w)
    if image.shape != expect:
        raise nn.ShapeError(f"image shape {image.shape} != expected {expect}")
    x = image
    for step in plan.steps:
        x = _apply_step(step, x, weights, geometry_prepadded)
        assert x.shape == tuple(step.out_shape), (
            f"{step.kind}: got {x.shape}, planned {step.out_shape}"
        )
        if trace is not None:
            in_count = math.prod(step.in_shape)
            trace(step.kind, in_count * 4, x.nbytes)
    return x


def plan_flops(plan: DensePlan) -> int:
    """Multiply-adds x2 over the plan's conv steps, all M samples included."""
    total = 0
    for step in plan.steps:
        if isinstance(step, ConvStep):
            m, c_out, h, w = step.out_shape
            c_in = step.in_shape[1]
            total += 2 * m * c_out * h * w * c_in * step.kernel[0] * step.kernel[1]
    return total


def estimate_memory(plan: DensePlan) -> int:
    """Peak bytes: max over steps of (input bytes + output bytes)."""
    peak = 0
    for step in plan.steps:
        in_bytes = math.prod(step.in_shape) * 4
        out_bytes = math.prod(step.out_shape) * 4
        peak = max(peak, in_bytes + out_bytes)
    return peak


# --- tiling -----------------------------------------------------------------


def _partition(extent: int, parts: int) -> list[tuple[int, int]]:
    base, rem = divmod(extent, parts)
    spans = []
    start = 0
    for i in range(parts):
        size = base + (1 if i < rem else 0)
        spans.append((start, size))
        start += size
    return spans


def plan_tiles(plan: DensePlan, max_bytes: int) -> list[Tile]:
    """Split the output domain so every tile's plan fits the byte budget.

    Tiles partition the output; each tile reads its rectangle expanded by
    the patch border, so neighbouring tile inputs overlap by patch-1 pixels.
    """
    i_h, i_w = plan.dense_input
    overlap = (plan.geometry.p_h - 1, plan.geometry.p_w - 1)
    if estimate_memory(plan) <= max_bytes:
        return [Tile(0, 0, i_h, i_w, overlap)]
    n_y, n_x = 1, 1
    while True:
        rows = _partition(i_h, n_y)
        cols = _partition(i_w, n_x)
        sizes = {(h, w) for _, h in rows for _, w in cols}
        worst = max(
            estimate_memory(compile_plan(plan.source, size)) for size in sizes
        )
        if worst <= max_bytes:
            return [
                Tile(ry, cx, rh, cw, overlap)
                for ry, rh in rows
                for cx, cw in cols
            ]
        tile_h = rows[0][1]
        tile_w = cols[0][1]
        if tile_h >= tile_w and tile_h > 1:
            n_y += 1
        elif tile_w > 1:
            n_x += 1
        else:
            raise BudgetTooSmall(
                f"1x1-output tiles still need more than {max_bytes} bytes"
            )


def execute_tiled(
    plan: DensePlan, image: Tensor, weights: WeightSet, tiles
) -> Tensor:
    """Execute tile by tile and stitch; bit-identical to the unsplit run."""
    geo = plan.geometry
    i_h, i_w = plan.dense_input
    padded = tensor.pad(image, 1, geo.pad_top, geo.pad_bottom)
    padded = tensor.pad(padded, 2, geo.pad_left, geo.pad_right)
    out = np.empty((plan.out_channels, i_h, i_w), dtype=np.float32)
    compiled: dict[tuple[int, int], DensePlan] = {}
    for tile in tiles:
        size = (tile.height, tile.width)
        tile_plan = compiled.get(size)
        if tile_plan is None:
            tile_plan = compile_plan(plan.source, size)
            compiled[size] = tile_plan
        sub = tensor.crop(padded, 1, tile.y, tile.height + geo.p_h - 1)
        sub = tensor.crop(sub, 2, tile.x, tile.width + geo.p_w - 1)
        res = execute_plan(tile_plan, sub, weights, geometry_prepadded=True)
        out[:, tile.y : tile.y + tile.height, tile.x : tile.x + tile.width] = res.array
    return _wrap(out)


# --- description ------------------------------------------------------------


def _step_json(step: Step) -> dict:
    doc = {"kind": step.kind, "out_shape": list(step.out_shape)}
    if isinstance(step, PadStep):
        doc.update(
            top=step.top, bottom=step.bottom, left=step.left, right=step.right
        )
    elif isinstance(step, ConvStep):
        doc.update(ordinal=step.ordinal, kernel=list(step.kernel))
    elif isinstance(step, ActStep):
        doc.update(act=step.act)
    elif isinstance(step, MultipoolStep):
        doc.update(
            pool=step.pool, window=list(step.window), stride=list(step.stride)
        )
    elif isinstance(step, UnwarpPoolStep):
        doc.update(stride=list(step.stride))
    elif isinstance(step, CropStep):
        doc.update(height=step.height, width=step.width)
    return doc


def plan_to_json(plan: DensePlan) -> dict:
    """Printable plan description (not a stable interchange format)."""
    return {
        "image": list(plan.dense_input),
        "patch": list(plan.source.patch),
        "extra_pad": list(plan.extra_pad),
        "m_ledger": [list(s) for s in plan.m_ledger],
        "m_sizes": list(plan.m_sizes),
        "output_shape": list(plan.output_shape),
        "flops": plan_flops(plan),
        "peak_bytes": estimate_memory(plan),
        "steps": [_step_json(s) for s in plan.steps],
    }
