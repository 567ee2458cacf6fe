"""Command-line entry point.

Image sizes on the command line are written WxH (width first, like common
image tooling) and handled internally as (H, W). Exit codes: 0 success,
1 verification failure, 2 usage or input-format errors.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import bench, convert, netspec, nn, oracle, tensor, util


class UsageError(ValueError):
    pass


def parse_size(text: str) -> tuple[int, int]:
    """'WxH' -> (H, W)."""
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise UsageError(f"size must look like 64x48 (WxH), got {text!r}")
    try:
        w, h = int(parts[0]), int(parts[1])
    except ValueError:
        raise UsageError(f"size must be two integers, got {text!r}")
    if w < 1 or h < 1:
        raise UsageError(f"size extents must be >= 1, got {text!r}")
    return (h, w)


def _shape_trace(spec: netspec.NetworkSpec) -> list[dict]:
    shapes = netspec.infer_shapes(spec)
    trace = []
    for layer, shape in zip(spec.layers, shapes):
        doc = netspec.to_json(
            netspec.NetworkSpec(spec.patch, spec.in_channels, (layer,))
        )["layers"][0]
        doc["out_shape"] = list(shape)
        trace.append(doc)
    return trace


def _cmd_describe(args) -> int:
    spec = netspec.load_spec(args.net)
    doc = {
        "patch": list(spec.patch),
        "in_channels": spec.in_channels,
        "layers": _shape_trace(spec),
        "per_patch_flops": netspec.count_flops(spec),
    }
    if args.image is not None:
        plan = convert.compile_plan(spec, args.image)
        doc["plan"] = convert.plan_to_json(plan)
    json.dump(doc, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def _cmd_convert(args) -> int:
    spec = netspec.load_spec(args.net)
    plan = convert.compile_plan(spec, args.image)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(convert.plan_to_json(plan), fh, indent=2)
        fh.write("\n")
    return 0


def _cmd_run(args) -> int:
    spec = netspec.load_spec(args.net)
    weights = netspec.load_weights(spec, args.weights)
    image = tensor.load(args.image_file)
    if image.ndim != 3:
        raise UsageError(f"image tensor must be (c, H, W), got {image.shape}")
    size = (image.shape[1], image.shape[2])
    if args.mode == "dense":
        plan = convert.compile_plan(spec, size)
        out = convert.execute_plan(plan, image, weights)
    else:
        out = oracle.dense_by_patches(spec, weights, image)
    tensor.save(out, args.out)
    return 0


def _cmd_verify(args) -> int:
    spec = netspec.load_spec(args.net)
    i_h, i_w = args.image
    all_pass = True
    for trial in range(args.trials):
        weights = netspec.init_weights(spec, util.split_key(args.seed, 2 * trial))
        image = netspec.random_image(
            util.split_key(args.seed, 2 * trial + 1), spec.in_channels, i_h, i_w
        )
        plan = convert.compile_plan(spec, (i_h, i_w))
        dense = convert.execute_plan(plan, image, weights)
        reference = oracle.dense_by_patches(spec, weights, image)
        report = oracle.compare(dense, reference, args.tol)
        doc = report.to_json()
        doc["trial"] = trial
        print(json.dumps(doc))
        all_pass = all_pass and report.passed
    return 0 if all_pass else 1


def _cmd_bench(args) -> int:
    spec = netspec.load_spec(args.net)
    weights = netspec.init_weights(spec, args.seed)
    rows = bench.time_modes(
        spec,
        weights,
        args.sizes,
        repeats=args.repeats,
        warmup=args.warmup,
        seed=args.seed,
        tol=args.tol,
    )
    bench.emit_csv(rows, args.csv)
    for r in rows:
        print(
            f"{r.size[1]}x{r.size[0]}: dense {r.dense_s:.4f}s "
            f"patch {r.patch_s:.4f}s speedup {r.speedup:.1f}x"
        )
    return 0


def _cmd_init_weights(args) -> int:
    spec = netspec.load_spec(args.net)
    weights = netspec.init_weights(spec, args.seed)
    netspec.save_weights(spec, weights, args.out)
    return 0


def _cmd_gen_image(args) -> int:
    i_h, i_w = args.size
    image = netspec.random_image(args.seed, args.channels, i_h, i_w)
    tensor.save(image, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="densescan",
        description=(
            "Dense per-pixel patch descriptors: compile a patch network into "
            "a whole-image plan, execute, verify against the per-patch "
            "oracle, and benchmark."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("describe", help="shape trace, M ledger, flops, memory")
    p.add_argument("--net", required=True)
    p.add_argument("--image", type=parse_size, default=None, metavar="WxH")
    p.set_defaults(func=_cmd_describe)

    p = sub.add_parser("convert", help="write the whole-image plan description")
    p.add_argument("--net", required=True)
    p.add_argument("--image", type=parse_size, required=True, metavar="WxH")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_convert)

    p = sub.add_parser("run", help="execute on an image tensor and write .dtns")
    p.add_argument("--net", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--image-file", required=True)
    p.add_argument("--mode", choices=("dense", "patch"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("verify", help="random-trial equivalence check")
    p.add_argument("--net", required=True)
    p.add_argument("--image", type=parse_size, required=True, metavar="WxH")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--trials", type=int, default=3)
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("bench", help="correctness gate, then timing CSV")
    p.add_argument("--net", required=True)
    p.add_argument(
        "--sizes",
        type=lambda s: [parse_size(p) for p in s.split(",")],
        required=True,
        metavar="WxH,WxH,...",
    )
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--csv", required=True)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("init-weights", help="write a deterministic weight file")
    p.add_argument("--net", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_init_weights)

    p = sub.add_parser("gen-image", help="write a synthetic image tensor")
    p.add_argument("--size", type=parse_size, required=True, metavar="WxH")
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_image)

    return parser


_INPUT_ERRORS = (
    UsageError,
    netspec.SpecFormatError,
    netspec.ShapeUnderflow,
    netspec.NotSinglePixelOutput,
    tensor.FormatError,
    tensor.ShapeMismatch,
    convert.NoFeasiblePadding,
    convert.BudgetTooSmall,
    nn.ShapeError,
    ValueError,
    OSError,
)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help; keep both.
        return int(exc.code or 0)
    try:
        return args.func(args)
    except convert.GateFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
