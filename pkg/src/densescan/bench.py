"""Wall-clock comparison: whole-image plan vs per-patch baseline.

The baseline processes pre-extracted patches in row-sized batches and its
timer covers network execution only, never patch extraction. Before any
timing, each (network, size) pair must pass the oracle equivalence gate, so
speed numbers are only ever reported for a verified transformation.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import convert, netspec, oracle, tensor, util
from .netspec import NetworkSpec, WeightSet
from .tensor import Tensor, _wrap


@dataclass(frozen=True)
class BenchRow:
    size: tuple[int, int]  # (I_h, I_w)
    dense_s: float
    patch_s: float
    speedup: float
    dense_flops: int
    patch_flops: int
    peak_bytes: int


CSV_HEADER = [
    "size_h",
    "size_w",
    "dense_s",
    "patch_s",
    "speedup",
    "dense_flops",
    "patch_flops",
    "peak_bytes",
]


def _time_dense(plan, image, weights) -> float:
    t0 = time.perf_counter()
    convert.execute_plan(plan, image, weights)
    return time.perf_counter() - t0


def _time_patch_rows(spec: NetworkSpec, weights: WeightSet, image: Tensor) -> float:
    """One per-patch pass over the image, batched one image row at a time.

    Extraction happens outside the timed section, matching a baseline whose
    patches are already materialized.
    """
    geo = netspec.PatchGeometry.for_patch(*spec.patch)
    padded = tensor.pad(image, 1, geo.pad_top, geo.pad_bottom)
    padded = tensor.pad(padded, 2, geo.pad_left, geo.pad_right).array
    _, i_h, i_w = image.shape
    p_h, p_w = spec.patch
    elapsed = 0.0
    for y in range(i_h):
        batch = np.empty((i_w, spec.in_channels, p_h, p_w), dtype=np.float32)
        for x in range(i_w):
            batch[x] = padded[:, y : y + p_h, x : x + p_w]
        wrapped = _wrap(batch)
        t0 = time.perf_counter()
        netspec.run_layers(spec.layers, weights, wrapped)
        elapsed += time.perf_counter() - t0
    return elapsed


def time_modes(
    spec: NetworkSpec,
    weights: WeightSet,
    sizes,
    repeats: int = 5,
    warmup: int = 1,
    seed: int = 0,
    tol: float = 1e-5,
) -> list[BenchRow]:
    """Median wall-clock per image size for both modes, plus flops and memory.

    Raises GateFailure if the plan and the per-patch oracle disagree for any
    size; correctness always precedes speed claims.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rows = []
    per_patch_flops = netspec.count_flops(spec)
    for idx, (i_h, i_w) in enumerate(sizes):
        image = netspec.random_image(
            util.split_key(seed, idx), spec.in_channels, i_h, i_w
        )
        plan = convert.compile_plan(spec, (i_h, i_w))
        dense_out = convert.execute_plan(plan, image, weights)
        reference = oracle.dense_by_patches(spec, weights, image)
        report = oracle.compare(dense_out, reference, tol)
        if not report.passed:
            raise convert.GateFailure(
                f"plan/oracle mismatch at {i_h}x{i_w}: {report}"
            )
        for _ in range(warmup):
            _time_dense(plan, image, weights)
            _time_patch_rows(spec, weights, image)
        dense_times = []
        patch_times = []
        for _ in range(repeats):
            dense_times.append(_time_dense(plan, image, weights))
            patch_times.append(_time_patch_rows(spec, weights, image))
        dense_s = statistics.median(dense_times)
        patch_s = statistics.median(patch_times)
        rows.append(
            BenchRow(
                size=(i_h, i_w),
                dense_s=dense_s,
                patch_s=patch_s,
                speedup=patch_s / dense_s,
                dense_flops=convert.plan_flops(plan),
                patch_flops=per_patch_flops * i_h * i_w,
                peak_bytes=convert.estimate_memory(plan),
            )
        )
    return rows


def emit_csv(rows, path) -> None:
    """Write rows ordered by image area ascending; plain decimal points."""
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to write")
    rows.sort(key=lambda r: (r.size[0] * r.size[1], r.size[0], r.size[1]))
    try:
        with open(path, "w", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for r in rows:
                writer.writerow(
                    [
                        r.size[0],
                        r.size[1],
                        repr(r.dense_s),
                        repr(r.patch_s),
                        repr(r.speedup),
                        r.dense_flops,
                        r.patch_flops,
                        r.peak_bytes,
                    ]
                )
    except OSError as exc:
        raise IOError(f"cannot write {path}: {exc}") from exc
