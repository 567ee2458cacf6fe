"""densescan: dense per-pixel CNN patch descriptors without redundant work.

Compiles a patch network (conv / activation / non-overlapping pooling,
one descriptor per fixed-size patch) into a whole-image plan that computes
the descriptor of every pixel-centered patch in one pass. Pooling layers
become banks of shifted poolings stacked along an extra sample axis, which
transpose/reshape steps interleave back into the spatial axes at the end.
The plan's output is verified against a brute-force per-patch oracle.
"""

from .bench import BenchRow, emit_csv, time_modes
from .convert import (
    DensePlan,
    Tile,
    build_unwarp,
    compile_plan,
    decompose_strided_convs,
    estimate_memory,
    execute_plan,
    execute_tiled,
    plan_flops,
    plan_tiles,
    plan_to_json,
    solve_padding,
)
from .netspec import (
    Act,
    Conv,
    NetworkSpec,
    PatchGeometry,
    Pool,
    WeightSet,
    count_flops,
    infer_shapes,
    init_weights,
    load_spec,
    load_weights,
    random_image,
    redundancy_ratio,
    run_patch,
    save_spec,
    save_weights,
)
from .nn import ConvWeights, activation, conv2d, multipool, shifted_pool
from .oracle import DiffReport, compare, dense_by_patches
from .tensor import Tensor, concat, crop, pad, reshape, transpose

__version__ = "0.1.0"

__all__ = [
    "Act",
    "BenchRow",
    "Conv",
    "ConvWeights",
    "DensePlan",
    "DiffReport",
    "NetworkSpec",
    "PatchGeometry",
    "Pool",
    "Tensor",
    "Tile",
    "WeightSet",
    "activation",
    "build_unwarp",
    "compare",
    "compile_plan",
    "concat",
    "conv2d",
    "count_flops",
    "crop",
    "decompose_strided_convs",
    "dense_by_patches",
    "emit_csv",
    "estimate_memory",
    "execute_plan",
    "execute_tiled",
    "infer_shapes",
    "init_weights",
    "load_spec",
    "load_weights",
    "multipool",
    "pad",
    "plan_flops",
    "plan_tiles",
    "plan_to_json",
    "random_image",
    "redundancy_ratio",
    "reshape",
    "run_patch",
    "save_spec",
    "save_weights",
    "shifted_pool",
    "solve_padding",
    "time_modes",
    "transpose",
]
