import numpy as np
import pytest

from densescan import convert, netspec, nn, oracle, util
from densescan.convert import (
    ActStep,
    BudgetTooSmall,
    ConvStep,
    CropStep,
    FinalViewStep,
    MultipoolStep,
    PadStep,
    UnwarpPoolStep,
    UnwarpPrepareStep,
)
from densescan.netspec import Act, Conv, NetworkSpec, Pool
from densescan.tensor import Tensor, _wrap

from conftest import rng_tensor


def check_equivalence(spec, seed, size, tol=1e-5, bitexact=False):
    weights = netspec.init_weights(spec, seed)
    image = netspec.random_image(
        util.split_key(seed, 99), spec.in_channels, size[0], size[1]
    )
    plan = convert.compile_plan(spec, size)
    dense = convert.execute_plan(plan, image, weights)
    reference = oracle.dense_by_patches(spec, weights, image)
    report = oracle.compare(dense, reference, tol)
    assert report.passed, f"max diff {report.max_abs_diff} at {report.argmax_location}"
    if bitexact:
        assert dense.equals(reference)
    return plan, dense, reference


# --- strided-conv decomposition ----------------------------------------------


def test_decompose_passthrough(small_spec):
    assert convert.decompose_strided_convs(small_spec) is small_spec


def test_decompose_rewrites_strided_conv():
    spec = NetworkSpec(
        patch=(7, 7),
        in_channels=1,
        layers=(Conv(2, (3, 3), stride=(2, 2)), Conv(1, (3, 3))),
    )
    dec = convert.decompose_strided_convs(spec)
    assert [type(l) for l in dec.layers] == [Conv, Pool, Conv]
    assert dec.layers[0].stride == (1, 1)
    assert dec.layers[1] == Pool("subsample", (1, 1), (2, 2))


def test_decompose_preserves_patch_outputs():
    spec = NetworkSpec(
        patch=(9, 9),
        in_channels=2,
        layers=(
            Conv(3, (3, 3), stride=(2, 2)),
            Act("tanh"),
            Conv(4, (4, 4), stride=(1, 1)),
        ),
    )
    dec = convert.decompose_strided_convs(spec)
    weights = netspec.init_weights(spec, 11)
    for key in range(5):
        patch = rng_tensor(key, (1, 2, 9, 9))
        a = netspec.run_patch(spec, weights, patch)
        b = netspec.run_patch(dec, weights, patch)
        assert a.equals(b)


# --- padding solver ----------------------------------------------------------


def test_solve_padding_reference_net(appendix_spec):
    assert convert.solve_padding(appendix_spec, (48, 72)) == (0, 0)


def test_solve_padding_single_pool():
    # padded width 4+1+e must satisfy (5+e-2) % 2 == 1, so e = 0
    spec = NetworkSpec(
        patch=(2, 2), in_channels=1, layers=(Pool("max", (2, 2), (2, 2)),)
    )
    assert convert.solve_padding(spec, (4, 4)) == (0, 0)


def test_solve_padding_no_pools():
    spec = NetworkSpec(patch=(5, 5), in_channels=1, layers=(Conv(2, (5, 5)),))
    assert convert.solve_padding(spec, (13, 9)) == (0, 0)


def _axis_feasible(spec, axis, extent, extra) -> bool:
    """Independent forward walk of one axis's arithmetic."""
    dec = convert.decompose_strided_convs(spec)
    size = extent + dec.patch[axis] - 1 + extra
    for layer in dec.layers:
        if isinstance(layer, Conv):
            if size < layer.kernel[axis]:
                return False
            size -= layer.kernel[axis] - 1
        elif isinstance(layer, Pool):
            if not nn.equal_shift_outputs(
                size, layer.window[axis], layer.stride[axis]
            ):
                return False
            size = (size - layer.window[axis]) // layer.stride[axis] + 1
    return True


def test_solve_padding_modular_cross_check(appendix_spec):
    """Independent check: the returned padding is feasible, minimal, bounded by
    the stride product, and the unwarped map covers one row per padded position."""
    for size in [(50, 61), (24, 36), (33, 47)]:
        e_h, e_w = convert.solve_padding(appendix_spec, size)
        assert e_h < 24 and e_w < 24  # 2*3*4: alignment repeats at that period
        plan = convert.compile_plan(appendix_spec, size)
        assert plan.extra_pad == (e_h, e_w)
        final = plan.steps[-2].out_shape  # final_view output, before crop
        assert final[1] == size[0] + e_h
        assert final[2] == size[1] + e_w
        for axis, extent, extra in ((0, size[0], e_h), (1, size[1], e_w)):
            assert _axis_feasible(appendix_spec, axis, extent, extra)
            for smaller in range(extra):
                assert not _axis_feasible(appendix_spec, axis, extent, smaller)


def test_solve_padding_rejects_invalid_patch_chain():
    # Architectures whose patch chain underflows are caught before any search.
    spec = NetworkSpec(patch=(6, 6), in_channels=1, layers=(Conv(2, (7, 7)),))
    with pytest.raises(netspec.ShapeUnderflow):
        convert.solve_padding(spec, (8, 8))


# --- compile structure -------------------------------------------------------


def test_compile_pooling_free_plan():
    spec = NetworkSpec(
        patch=(5, 5),
        in_channels=2,
        layers=(Conv(3, (3, 3)), Act("relu"), Conv(4, (3, 3))),
    )
    plan = convert.compile_plan(spec, (8, 9))
    kinds = [type(s) for s in plan.steps]
    assert kinds == [PadStep, ConvStep, ActStep, ConvStep, FinalViewStep, CropStep]
    assert plan.m_ledger == ()
    assert plan.extra_pad == (0, 0)
    assert plan.output_shape == (4, 8, 9)


def test_compile_reference_plan(appendix_spec):
    plan = convert.compile_plan(appendix_spec, (48, 72))
    pools = [s for s in plan.steps if isinstance(s, MultipoolStep)]
    unwarps = [s for s in plan.steps if isinstance(s, UnwarpPoolStep)]
    assert len(pools) == 3 and len(unwarps) == 3
    assert [u.stride for u in unwarps] == [(4, 4), (3, 3), (2, 2)]
    assert plan.m_ledger == ((2, 2), (3, 3), (4, 4))
    assert plan.m_sizes == (4, 36, 576)
    assert [s.out_shape[0] for s in pools] == [4, 36, 576]
    assert plan.output_shape == (128, 48, 72)


def test_build_unwarp_shapes():
    steps, final = convert.build_unwarp([(2, 2)], 2, 3, 1)
    assert final == (4, 6)
    prepare, pool = steps
    assert isinstance(prepare, UnwarpPrepareStep)
    assert prepare.flat_shape == (4, 6)  # (M, k*y*x)
    assert prepare.out_shape == (1, 2, 3, 4)
    assert pool.split_shape == (1, 2, 3, 2, 2, 1)
    assert pool.out_shape == (1, 4, 6, 1)


# --- the unwarp placement law ------------------------------------------------


def coordinate_image(height, width):
    # value 1 + y*width + x: strictly increasing row-major, padding stays smallest
    enc = 1.0 + np.arange(height * width, dtype=np.float32).reshape(height, width)
    return _wrap(enc[None, :, :])


def subsample_net(strides):
    layers = tuple(Pool("subsample", (1, 1), (s, s)) for s in strides)
    return NetworkSpec(patch=(1, 1), in_channels=1, layers=layers)


@pytest.mark.parametrize("strides", [(2,), (3,), (2, 3), (3, 2), (2, 2, 3)])
def test_unwarp_places_every_pixel(strides):
    """With 1x1-patch subsample nets the descriptor of pixel (y, x) is the pixel
    itself, so plan output == image proves exact placement for every pixel:
    row y must come from shift (y mod s), cell (y div s), nested per stage."""
    image = coordinate_image(24, 24)
    spec = subsample_net(strides)
    plan = convert.compile_plan(spec, (24, 24))
    out = convert.execute_plan(plan, image, netspec.WeightSet(convs=()))
    assert out.equals(image)


def test_unwarp_law_single_pool_closed_form():
    """Max pooling over a coordinate-encoded image has a closed-form result:
    the bottom-right in-image corner of each patch."""
    height, width, s = 24, 24, 3
    image = coordinate_image(height, width)
    spec = NetworkSpec(
        patch=(s, s), in_channels=1, layers=(Pool("max", (s, s), (s, s)),)
    )
    geo = netspec.PatchGeometry.for_patch(s, s)
    plan = convert.compile_plan(spec, (height, width))
    out = convert.execute_plan(plan, image, netspec.WeightSet(convs=()))
    for y in range(height):
        for x in range(width):
            r = min(y + geo.pad_bottom, height - 1)
            c = min(x + geo.pad_right, width - 1)
            assert out.item(0, y, x) == 1.0 + r * width + c


def test_unwarp_law_two_pools_closed_form():
    height, width = 24, 24
    s1, s2 = 2, 3
    image = coordinate_image(height, width)
    spec = NetworkSpec(
        patch=(s1 * s2, s1 * s2),
        in_channels=1,
        layers=(Pool("max", (s1, s1), (s1, s1)), Pool("max", (s2, s2), (s2, s2))),
    )
    geo = netspec.PatchGeometry.for_patch(s1 * s2, s1 * s2)
    plan = convert.compile_plan(spec, (height, width))
    out = convert.execute_plan(plan, image, netspec.WeightSet(convs=()))
    for y in range(height):
        for x in range(width):
            r = min(y + geo.pad_bottom, height - 1)
            c = min(x + geo.pad_right, width - 1)
            assert out.item(0, y, x) == 1.0 + r * width + c


def test_unwarp_is_pure_permutation(small_spec):
    """The value multiset entering the unwarp chain equals the one leaving it."""
    weights = netspec.init_weights(small_spec, 4)
    image = netspec.random_image(5, 2, 12, 10)
    plan = convert.compile_plan(small_spec, (12, 10))
    x = image
    before = after = None
    for step in plan.steps:
        if isinstance(step, UnwarpPrepareStep):
            before = x
        x = convert._apply_step(step, x, weights, False)
        if isinstance(step, FinalViewStep):
            after = x
    assert before is not None
    assert np.array_equal(np.sort(before.flat), np.sort(after.flat))


# --- core equivalence --------------------------------------------------------


def test_equivalence_small_two_pool_net(small_spec):
    plan, _, _ = check_equivalence(small_spec, 21, (12, 10))
    assert plan.extra_pad == (0, 2)  # width needs alignment; crop discards it


def test_equivalence_bitexact_max_only():
    spec = NetworkSpec(
        patch=(8, 8),
        in_channels=2,
        layers=(
            Conv(3, (3, 3)),
            Pool("max", (2, 2), (2, 2)),
            Act("relu"),
            Conv(4, (3, 3)),
        ),
    )
    check_equivalence(spec, 31, (11, 13), bitexact=True)


def test_equivalence_mean_pool():
    spec = NetworkSpec(
        patch=(9, 9),
        in_channels=1,
        layers=(
            Conv(2, (2, 2)),
            Pool("mean", (2, 2), (2, 2)),
            Act("tanh"),
            Conv(3, (4, 4)),
        ),
    )
    check_equivalence(spec, 32, (10, 14))


def test_equivalence_strided_conv():
    spec = NetworkSpec(
        patch=(9, 9),
        in_channels=2,
        layers=(Conv(3, (3, 3), stride=(2, 2)), Act("tanh"), Conv(2, (4, 4))),
    )
    check_equivalence(spec, 33, (13, 9), bitexact=True)


def test_equivalence_rectangular_strides():
    spec = NetworkSpec(
        patch=(8, 12),
        in_channels=1,
        layers=(Conv(2, (3, 3)), Pool("max", (2, 5), (2, 5)), Conv(2, (3, 2))),
    )
    check_equivalence(spec, 34, (9, 16), bitexact=True)


def test_equivalence_pooling_free():
    spec = NetworkSpec(
        patch=(6, 6), in_channels=2, layers=(Conv(3, (6, 6)), Act("tanh"))
    )
    plan, dense, ref = check_equivalence(spec, 35, (7, 11), bitexact=True)
    assert plan.m_ledger == ()


def test_equivalence_patch_larger_than_image():
    spec = NetworkSpec(
        patch=(12, 12),
        in_channels=1,
        layers=(Conv(2, (5, 5)), Pool("max", (2, 2), (2, 2)), Conv(2, (4, 4))),
    )
    check_equivalence(spec, 36, (6, 5), bitexact=True)


def test_multipool_alignment_checked_at_execution(small_spec):
    """Feed a plan an image of the wrong size: the executor must reject it
    rather than silently pool misaligned banks."""
    plan = convert.compile_plan(small_spec, (12, 10))
    weights = netspec.init_weights(small_spec, 1)
    wrong = netspec.random_image(0, 2, 13, 10)
    with pytest.raises(nn.ShapeError):
        convert.execute_plan(plan, wrong, weights)


# --- memory estimate ---------------------------------------------------------


def test_estimate_identity_plan():
    spec = NetworkSpec(patch=(1, 1), in_channels=3, layers=())
    plan = convert.compile_plan(spec, (5, 4))
    assert convert.estimate_memory(plan) == 2 * 3 * 5 * 4 * 4


def test_estimate_scales_with_area(appendix_spec):
    # Near-linear in pixel count once the image dwarfs the patch border:
    # quadrupling the area changes the estimate by 4x within a factor of 2.
    small = convert.estimate_memory(convert.compile_plan(appendix_spec, (48, 48)))
    large = convert.estimate_memory(convert.compile_plan(appendix_spec, (96, 96)))
    ratio = large / small
    assert 2.0 <= ratio <= 8.0


def test_estimate_bounds_instrumented_run(small_spec):
    weights = netspec.init_weights(small_spec, 2)
    image = netspec.random_image(3, 2, 12, 10)
    plan = convert.compile_plan(small_spec, (12, 10))
    watermark = 0

    def trace(kind, in_bytes, out_bytes):
        nonlocal watermark
        watermark = max(watermark, in_bytes + out_bytes)

    convert.execute_plan(plan, image, weights, trace=trace)
    assert convert.estimate_memory(plan) >= watermark > 0


# --- tiling ------------------------------------------------------------------


def test_plan_tiles_single_when_budget_fits(small_spec):
    plan = convert.compile_plan(small_spec, (12, 10))
    tiles = convert.plan_tiles(plan, convert.estimate_memory(plan))
    assert tiles == [convert.Tile(0, 0, 12, 10, (9, 9))]


def test_plan_tiles_budget_too_small(small_spec):
    plan = convert.compile_plan(small_spec, (12, 10))
    with pytest.raises(BudgetTooSmall):
        convert.plan_tiles(plan, 1)


def test_tiled_execution_matches_unsplit(small_spec):
    weights = netspec.init_weights(small_spec, 8)
    image = netspec.random_image(9, 2, 18, 14)
    plan = convert.compile_plan(small_spec, (18, 14))
    whole = convert.execute_plan(plan, image, weights)
    budget = convert.estimate_memory(plan) - 1
    tiles = convert.plan_tiles(plan, budget)
    assert len(tiles) > 1
    total = sum(t.height * t.width for t in tiles)
    assert total == 18 * 14
    assert all(t.overlap == (9, 9) for t in tiles)
    stitched = convert.execute_tiled(plan, image, weights, tiles)
    assert stitched.equals(whole)


def test_tile_grid_partition(small_spec):
    plan = convert.compile_plan(small_spec, (18, 14))
    tiles = [convert.Tile(y, x, 9, 7, (9, 9)) for y in (0, 9) for x in (0, 7)]
    weights = netspec.init_weights(small_spec, 8)
    image = netspec.random_image(9, 2, 18, 14)
    whole = convert.execute_plan(plan, image, weights)
    stitched = convert.execute_tiled(plan, image, weights, tiles)
    assert stitched.equals(whole)
