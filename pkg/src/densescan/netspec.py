"""Declarative patch-network description, weight init/persistence, execution.

A NetworkSpec describes the per-patch network: an ordered stack of valid
convolutions, activations, and non-overlapping poolings that maps one
(in_channels, P_h, P_w) patch to a single k-channel descriptor (final
spatial extent exactly 1x1).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import nn, util
from .tensor import Tensor, _wrap
from .tensor import from_bytes as tensor_from_bytes
from .tensor import to_bytes as tensor_to_bytes

WEIGHTS_MAGIC = b"DWTS"
WEIGHTS_VERSION = 1
_ROLE_KERNEL = 0
_ROLE_BIAS = 1


class ShapeUnderflow(ValueError):
    """A layer's kernel/window no longer fits its input."""


class NotSinglePixelOutput(ValueError):
    """The layer stack does not reduce the patch to spatial extent 1x1."""


class SpecFormatError(ValueError):
    """A network description document is malformed."""


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.out_channels < 1:
            raise SpecFormatError("conv out_channels must be >= 1")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise SpecFormatError("conv kernel and stride extents must be >= 1")


@dataclass(frozen=True)
class Pool:
    kind: nn.PoolKind
    window: tuple[int, int]
    stride: tuple[int, int]

    def __post_init__(self):
        if self.kind not in nn.POOL_KINDS:
            raise SpecFormatError(f"unknown pool kind {self.kind!r}")
        if min(self.window) < 1 or min(self.stride) < 1:
            raise SpecFormatError("pool window and stride extents must be >= 1")
        if self.kind == "subsample":
            if self.window != (1, 1):
                raise SpecFormatError("subsample pooling uses a 1x1 window")
        elif self.window != self.stride:
            # Overlapping or gapped pooling is out of scope.
            raise SpecFormatError(
                f"{self.kind} pooling must have window == stride, "
                f"got {self.window} vs {self.stride}"
            )


@dataclass(frozen=True)
class Act:
    kind: nn.ActKind

    def __post_init__(self):
        if self.kind not in nn.ACT_KINDS:
            raise SpecFormatError(f"unknown activation {self.kind!r}")


Layer = Conv | Pool | Act


@dataclass(frozen=True)
class NetworkSpec:
    patch: tuple[int, int]
    in_channels: int
    layers: tuple[Layer, ...]

    def __post_init__(self):
        if min(self.patch) < 1:
            raise SpecFormatError(f"patch extents must be >= 1, got {self.patch}")
        if self.in_channels < 1:
            raise SpecFormatError("in_channels must be >= 1")
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def conv_layers(self) -> tuple[int, ...]:
        """Indices of conv layers, in order (the weight binding order)."""
        return tuple(i for i, l in enumerate(self.layers) if isinstance(l, Conv))


@dataclass(frozen=True)
class PatchGeometry:
    """Padding that centers a patch on each pixel.

    Pixel (x, y) sits at patch index (pad_top, pad_left); the patch covers
    padded-image rows y .. y+P_h-1. The split is asymmetric for even patch
    sizes: ceil((P-1)/2) before, floor((P-1)/2) after.
    """

    p_h: int
    p_w: int
    pad_top: int
    pad_left: int
    pad_bottom: int
    pad_right: int

    @staticmethod
    def for_patch(p_h: int, p_w: int) -> "PatchGeometry":
        return PatchGeometry(
            p_h=p_h,
            p_w=p_w,
            pad_top=(p_h - 1 + 1) // 2,
            pad_left=(p_w - 1 + 1) // 2,
            pad_bottom=(p_h - 1) // 2,
            pad_right=(p_w - 1) // 2,
        )


@dataclass(frozen=True)
class WeightSet:
    """ConvWeights per conv layer, ordered like NetworkSpec.conv_layers."""

    convs: tuple[nn.ConvWeights, ...]

    def __post_init__(self):
        object.__setattr__(self, "convs", tuple(self.convs))


def infer_shapes(spec: NetworkSpec) -> list[tuple[int, int, int, int]]:
    """Output shape of every layer, starting from (1, c, P_h, P_w).

    Raises ShapeUnderflow naming the offending layer, and
    NotSinglePixelOutput if the stack does not end at spatial 1x1.
    """
    shapes = []
    c, h, w = spec.in_channels, spec.patch[0], spec.patch[1]
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            k_h, k_w = layer.kernel
            if h < k_h or w < k_w:
                raise ShapeUnderflow(
                    f"layer {i} (conv {k_h}x{k_w}) does not fit input {h}x{w}"
                )
            h = (h - k_h) // layer.stride[0] + 1
            w = (w - k_w) // layer.stride[1] + 1
            c = layer.out_channels
        elif isinstance(layer, Pool):
            p_h, p_w = layer.window
            if h < p_h or w < p_w:
                raise ShapeUnderflow(
                    f"layer {i} (pool {p_h}x{p_w}) does not fit input {h}x{w}"
                )
            h = (h - p_h) // layer.stride[0] + 1
            w = (w - p_w) // layer.stride[1] + 1
        shapes.append((1, c, h, w))
    if (h, w) != (1, 1):
        raise NotSinglePixelOutput(
            f"final spatial extent is {h}x{w}, expected 1x1"
        )
    return shapes


def init_weights(spec: NetworkSpec, seed: int) -> WeightSet:
    """Deterministic weights: SplitMix64 streams, uniform in [-0.1, 0.1].

    Each conv layer draws kernel and bias from independent substreams keyed
    by (seed, layer index, role), so the same seed gives bit-identical
    weights on every platform.
    """
    infer_shapes(spec)
    convs = []
    c = spec.in_channels
    for i, layer in enumerate(spec.layers):
        if not isinstance(layer, Conv):
            continue
        k_h, k_w = layer.kernel
        kshape = (layer.out_channels, c, k_h, k_w)
        kcount = layer.out_channels * c * k_h * k_w
        kernel = util.uniform_floats(
            util.split_key(seed, 2 * i + _ROLE_KERNEL), kcount, -0.1, 0.1
        ).reshape(kshape)
        bias = util.uniform_floats(
            util.split_key(seed, 2 * i + _ROLE_BIAS), layer.out_channels, -0.1, 0.1
        )
        convs.append(nn.ConvWeights(kernels=_wrap(kernel), bias=_wrap(bias)))
        c = layer.out_channels
    return WeightSet(convs=tuple(convs))


def run_layers(layers, weights: WeightSet, x: Tensor, conv_start: int = 0) -> Tensor:
    """Apply a layer stack to a (M, c, H, W) batch; strides run directly."""
    ordinal = conv_start
    for layer in layers:
        if isinstance(layer, Conv):
            x = nn.conv2d(x, weights.convs[ordinal], stride=layer.stride)
            ordinal += 1
        elif isinstance(layer, Pool):
            x = nn.shifted_pool(x, layer.kind, layer.window, layer.stride)
        else:
            x = nn.activation(x, layer.kind)
    return x


def run_patch(spec: NetworkSpec, weights: WeightSet, patch: Tensor) -> Tensor:
    """Run the patch network on one (1, c, P_h, P_w) patch; returns the (k,) vector."""
    expect = (1, spec.in_channels, spec.patch[0], spec.patch[1])
    if patch.shape != expect:
        raise nn.ShapeError(f"patch shape {patch.shape} != {expect}")
    shapes = infer_shapes(spec)
    x = patch
    ordinal = 0
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            x = nn.conv2d(x, weights.convs[ordinal], stride=layer.stride)
            ordinal += 1
        elif isinstance(layer, Pool):
            x = nn.shifted_pool(x, layer.kind, layer.window, layer.stride)
        else:
            x = nn.activation(x, layer.kind)
        assert x.shape == shapes[i], f"layer {i}: {x.shape} != inferred {shapes[i]}"
    return x.reshape((x.shape[1],))


def count_flops(spec: NetworkSpec, image: tuple[int, int] | None = None) -> int:
    """Multiply-add count x2 over conv layers (pooling/activations excluded).

    Per-patch when image is None; otherwise the total over the compiled
    whole-image plan, including all M samples.
    """
    if image is not None:
        from . import convert

        return convert.plan_flops(convert.compile_plan(spec, image))
    total = 0
    shapes = infer_shapes(spec)
    c = spec.in_channels
    for layer, shape in zip(spec.layers, shapes):
        if isinstance(layer, Conv):
            _, c_out, h, w = shape
            total += 2 * h * w * c_out * c * layer.kernel[0] * layer.kernel[1]
            c = c_out
    return total


def redundancy_ratio(spec: NetworkSpec, image: tuple[int, int]) -> float:
    """Per-patch flops x pixel count over whole-image-plan flops."""
    dense = count_flops(spec, image)
    return count_flops(spec) * image[0] * image[1] / dense


# --- network description file (JSON) ---------------------------------------


def to_json(spec: NetworkSpec) -> dict:
    layers = []
    for layer in spec.layers:
        if isinstance(layer, Conv):
            layers.append(
                {
                    "type": "conv",
                    "out": layer.out_channels,
                    "kernel": list(layer.kernel),
                    "stride": list(layer.stride),
                }
            )
        elif isinstance(layer, Pool):
            layers.append(
                {
                    "type": "pool",
                    "kind": layer.kind,
                    "window": list(layer.window),
                    "stride": list(layer.stride),
                }
            )
        else:
            layers.append({"type": "act", "kind": layer.kind})
    return {
        "patch": list(spec.patch),
        "in_channels": spec.in_channels,
        "layers": layers,
    }


def _pair(value, what: str) -> tuple[int, int]:
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 2
        or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    ):
        raise SpecFormatError(f"{what} must be a pair of integers, got {value!r}")
    return int(value[0]), int(value[1])


def from_json(doc) -> NetworkSpec:
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise SpecFormatError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SpecFormatError("network description must be a JSON object")
    try:
        patch = _pair(doc["patch"], "patch")
        in_channels = doc["in_channels"]
        raw_layers = doc["layers"]
    except KeyError as exc:
        raise SpecFormatError(f"missing key {exc.args[0]!r}") from exc
    if not isinstance(in_channels, int) or isinstance(in_channels, bool):
        raise SpecFormatError("in_channels must be an integer")
    if not isinstance(raw_layers, list):
        raise SpecFormatError("layers must be a list")
    layers: list[Layer] = []
    for i, item in enumerate(raw_layers):
        if not isinstance(item, dict) or "type" not in item:
            raise SpecFormatError(f"layer {i} must be an object with a 'type'")
        kind = item["type"]
        try:
            if kind == "conv":
                layers.append(
                    Conv(
                        out_channels=int(item["out"]),
                        kernel=_pair(item["kernel"], f"layer {i} kernel"),
                        stride=_pair(item.get("stride", [1, 1]), f"layer {i} stride"),
                    )
                )
            elif kind == "pool":
                layers.append(
                    Pool(
                        kind=item["kind"],
                        window=_pair(item["window"], f"layer {i} window"),
                        stride=_pair(item["stride"], f"layer {i} stride"),
                    )
                )
            elif kind == "act":
                layers.append(Act(kind=item["kind"]))
            else:
                raise SpecFormatError(f"layer {i}: unknown type {kind!r}")
        except KeyError as exc:
            raise SpecFormatError(f"layer {i}: missing key {exc.args[0]!r}") from exc
    return NetworkSpec(patch=patch, in_channels=in_channels, layers=tuple(layers))


def load_spec(path) -> NetworkSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return from_json(fh.read())


def save_spec(spec: NetworkSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_json(spec), fh, indent=2)
        fh.write("\n")


# --- weight file ------------------------------------------------------------
#
# Layout: magic "DWTS", u32 version, u32 record count, then per record
# (u32 spec layer index, u32 role 0=kernel|1=bias, u64 offset, u64 length),
# then the records' .dtns blobs back to back. Offsets are relative to the
# end of the manifest. All integers little-endian.


def save_weights(spec: NetworkSpec, weights: WeightSet, path) -> None:
    records = []
    blobs = []
    offset = 0
    for ordinal, layer_index in enumerate(spec.conv_layers):
        cw = weights.convs[ordinal]
        for role, t in ((_ROLE_KERNEL, cw.kernels), (_ROLE_BIAS, cw.bias)):
            blob = tensor_to_bytes(t)
            records.append((layer_index, role, offset, len(blob)))
            blobs.append(blob)
            offset += len(blob)
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<II", WEIGHTS_VERSION, len(records)))
        for rec in records:
            fh.write(struct.pack("<IIQQ", *rec))
        for blob in blobs:
            fh.write(blob)


def load_weights(spec: NetworkSpec, path) -> WeightSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != WEIGHTS_MAGIC:
        raise SpecFormatError("not a weight file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != WEIGHTS_VERSION:
        raise SpecFormatError(f"unsupported weight file version {version}")
    manifest_end = 12 + 24 * count
    if len(blob) < manifest_end:
        raise SpecFormatError("truncated weight manifest")
    entries: dict[tuple[int, int], Tensor] = {}
    for r in range(count):
        layer_index, role, offset, length = struct.unpack_from(
            "<IIQQ", blob, 12 + 24 * r
        )
        payload = blob[manifest_end + offset : manifest_end + offset + length]
        if len(payload) != length:
            raise SpecFormatError("truncated weight payload")
        entries[(layer_index, role)] = tensor_from_bytes(payload)
    convs = []
    c = spec.in_channels
    for layer_index in spec.conv_layers:
        layer = spec.layers[layer_index]
        assert isinstance(layer, Conv)
        try:
            kernel = entries[(layer_index, _ROLE_KERNEL)]
            bias = entries[(layer_index, _ROLE_BIAS)]
        except KeyError:
            raise SpecFormatError(f"weight file lacks entries for layer {layer_index}")
        expect = (layer.out_channels, c, layer.kernel[0], layer.kernel[1])
        if kernel.shape != expect:
            raise SpecFormatError(
                f"layer {layer_index} kernel shape {kernel.shape} != {expect}"
            )
        convs.append(nn.ConvWeights(kernels=kernel, bias=bias))
        c = layer.out_channels
    return WeightSet(convs=tuple(convs))


def random_image(seed: int, channels: int, height: int, width: int) -> Tensor:
    """Synthetic (c, H, W) image, uniform in [-1, 1), SplitMix64-stable."""
    data = util.uniform_floats(seed, channels * height * width, -1.0, 1.0)
    return _wrap(data.reshape((channels, height, width)))
