"""Ground truth by brute force: run the patch network on every pixel's patch.

This module is deliberately independent of the plan compiler; it only pads,
slices patches, and reuses the layer primitives, so it stays a valid
reference for the whole-image path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor
from .netspec import NetworkSpec, PatchGeometry, WeightSet, infer_shapes, run_layers
from .tensor import ShapeMismatch, Tensor, _wrap


@dataclass(frozen=True)
class DiffReport:
    """Elementwise comparison of two (k, I_h, I_w) maps."""

    max_abs_diff: float
    argmax_location: tuple[int, int, int]
    num_exceeding: int
    tol: float
    passed: bool

    def to_json(self) -> dict:
        return {
            "max_abs_diff": self.max_abs_diff,
            "argmax": list(self.argmax_location),
            "num_exceeding": self.num_exceeding,
            "tol": self.tol,
            "pass": self.passed,
        }

    def __str__(self):
        return json.dumps(self.to_json())


def dense_by_patches(
    spec: NetworkSpec, weights: WeightSet, image: Tensor, row_batch: bool = True
) -> Tensor:
    """Descriptor map (k, I_h, I_w): patch network run per pixel, independently.

    The image is zero-padded so a patch surrounds every pixel; column x of
    row y of the output is the network applied to the patch centered at
    (x, y). With row_batch the patches of one image row run as one batch,
    which is bit-identical to one-at-a-time execution because every kernel
    fixes its per-element operation order independently of the batch extent.
    """
    if image.ndim != 3 or image.shape[0] != spec.in_channels:
        raise ShapeMismatch(
            f"image must be ({spec.in_channels}, H, W), got {image.shape}"
        )
    shapes = infer_shapes(spec)
    k = shapes[-1][1] if shapes else spec.in_channels
    _, i_h, i_w = image.shape
    geo = PatchGeometry.for_patch(*spec.patch)
    padded = tensor.pad(image, 1, geo.pad_top, geo.pad_bottom)
    padded = tensor.pad(padded, 2, geo.pad_left, geo.pad_right).array
    out = np.empty((k, i_h, i_w), dtype=np.float32)
    p_h, p_w = spec.patch
    if row_batch:
        for y in range(i_h):
            batch = np.empty((i_w, spec.in_channels, p_h, p_w), dtype=np.float32)
            for x in range(i_w):
                batch[x] = padded[:, y : y + p_h, x : x + p_w]
            res = run_layers(spec.layers, weights, _wrap(batch))
            out[:, y, :] = res.array[:, :, 0, 0].T
    else:
        for y in range(i_h):
            for x in range(i_w):
                patch = np.ascontiguousarray(
                    padded[None, :, y : y + p_h, x : x + p_w]
                )
                res = run_layers(spec.layers, weights, _wrap(patch))
                out[:, y, x] = res.array[0, :, 0, 0]
    return _wrap(out)


def compare(dense: Tensor, reference: Tensor, tol: float = 1e-5) -> DiffReport:
    """Elementwise absolute comparison; passes iff max |a-b| <= tol."""
    if dense.shape != reference.shape:
        raise ShapeMismatch(f"shape {dense.shape} vs {reference.shape}")
    diff = np.abs(
        dense.array.astype(np.float64) - reference.array.astype(np.float64)
    )
    flat_arg = int(np.argmax(diff))
    location = tuple(int(v) for v in np.unravel_index(flat_arg, diff.shape))
    max_abs = float(diff.flat[flat_arg])
    return DiffReport(
        max_abs_diff=max_abs,
        argmax_location=location,
        num_exceeding=int(np.count_nonzero(diff > tol)),
        tol=tol,
        passed=max_abs <= tol,
    )
