"""Command-line surface: register, warp, bench, selfcheck.

Exit codes: 0 success, 1 selfcheck failure, 2 I/O failure, 3 registration
failure (the message names the failing stage), 4 parameter-schema
violation (the message names the offending key). All output files are
written atomically (temp file + rename), so failures leave no partial
files behind.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from .bench import BENCH_MODELS, rows_to_csv, run_benchmark
from .errors import EdffdError, SchemaError
from .image import ImageBuffer, load_image, save_image
from .pipeline import LossWeights, RegistrationConfig, register
from .serialize import dict_to_warp, load_params, params_to_dict, save_params
from .warps import compose_sampling_map, warp_image

IO_EXIT = 2
REGISTRATION_EXIT = 3
SCHEMA_EXIT = 4


def _parse_pair(text: str, what: str):
    try:
        a, b = text.lower().split("x")
        a, b = int(a), int(b)
        if a < 1 or b < 1:
            raise ValueError
        return a, b
    except ValueError:
        raise argparse.ArgumentTypeError(f"{what} must look like 12x12, got {text!r}")


def _grid_arg(text):
    return _parse_pair(text, "grid")


def _size_arg(text):
    return _parse_pair(text, "size")


def _atomic_write_text(path, text: str) -> None:
    tmp = f"{os.fspath(path)}.tmp{os.getpid()}"
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def _composite(reference: ImageBuffer, warped: ImageBuffer) -> ImageBuffer:
    """Green/blue channels from the reference, red from the warped target."""
    ref = reference.planes
    wrp = warped.planes
    out = np.empty((reference.height, reference.width, 3))
    out[:, :, 0] = wrp[:, :, 0]
    out[:, :, 1] = ref[:, :, 1 % ref.shape[2]]
    out[:, :, 2] = ref[:, :, 2 % ref.shape[2]]
    return ImageBuffer(out)


def cmd_register(args) -> int:
    try:
        reference = load_image(args.reference)
        target = load_image(args.target)
    except (OSError, ValueError) as exc:
        print(f"error: cannot read inputs: {exc}", file=sys.stderr)
        return IO_EXIT
    stage_grids = ((args.grid, (18, 18)) if args.stages == 2 else (args.grid,))
    try:
        cfg = RegistrationConfig(
            n_stages=args.stages,
            stage_grids=stage_grids,
            theta=args.theta,
            softmax_scale=args.alpha,
            search_radius=args.radius,
            model=args.model,
        )
        result = register(reference, target, cfg)
    except EdffdError as exc:
        print(f"error: registration failed ({exc})", file=sys.stderr)
        return REGISTRATION_EXIT
    except ValueError as exc:
        print(f"error: registration failed in setup ({exc})", file=sys.stderr)
        return REGISTRATION_EXIT

    out_dir = args.out_dir
    try:
        os.makedirs(out_dir, exist_ok=True)
        save_image(result.warped, os.path.join(out_dir, "warped.png"))
        mask_img = ImageBuffer(result.overlap.data)
        save_image(mask_img, os.path.join(out_dir, "mask.png"))
        save_image(
            _composite(reference, result.warped), os.path.join(out_dir, "composite.png")
        )
        doc = params_to_dict(
            args.model,
            (reference.width, reference.height),
            result.homography,
            list(result.grids),
            args.theta,
        )
        save_params(os.path.join(out_dir, "params.json"), doc)
        metrics = {
            "psnr_db": "inf" if math.isinf(result.psnr_db) else round(result.psnr_db, 4),
            "inference_ms": round(result.inference_ms, 3),
            "warp_ms": round(result.warp_ms, 3),
            "total_ms": round(result.total_ms, 3),
        }
        _atomic_write_text(
            os.path.join(out_dir, "metrics.json"), json.dumps(metrics, indent=1) + "\n"
        )
        if args.diagnostics:
            lines = ["stage,iteration,loss,step"]
            for s, trace in enumerate(result.loss_trace, start=1):
                for it, (loss, step) in enumerate(trace):
                    lines.append(f"{s},{it},{loss:.9g},{step:.9g}")
            _atomic_write_text(args.diagnostics, "\n".join(lines) + "\n")
    except OSError as exc:
        print(f"error: cannot write outputs: {exc}", file=sys.stderr)
        return IO_EXIT
    psnr = metrics["psnr_db"]
    print(f"registered: psnr_db={psnr} total_ms={metrics['total_ms']}")
    return 0


def cmd_warp(args) -> int:
    try:
        params = load_params(args.params)
        (width, height), hom, fields = dict_to_warp(params)
    except SchemaError as exc:
        print(f"error: invalid params ({exc})", file=sys.stderr)
        return SCHEMA_EXIT
    except OSError as exc:
        print(f"error: cannot read params: {exc}", file=sys.stderr)
        return IO_EXIT
    try:
        src = load_image(args.src)
    except (OSError, ValueError) as exc:
        print(f"error: cannot read image: {exc}", file=sys.stderr)
        return IO_EXIT
    try:
        smap = compose_sampling_map(hom, fields, width, height)
        warped, _ = warp_image(src, smap)
        save_image(warped, args.out)
    except EdffdError as exc:
        print(f"error: warp failed ({exc})", file=sys.stderr)
        return REGISTRATION_EXIT
    except OSError as exc:
        print(f"error: cannot write output: {exc}", file=sys.stderr)
        return IO_EXIT
    print(f"warped {args.src} -> {args.out}")
    return 0


def cmd_bench(args) -> int:
    rows = run_benchmark(
        sizes=tuple(args.sizes),
        grids=tuple(args.grids),
        repeats=args.repeats,
        seed=args.seed,
        theta=args.theta,
    )
    csv = rows_to_csv(rows)
    if args.out:
        try:
            _atomic_write_text(args.out, csv)
        except OSError as exc:
            print(f"error: cannot write report: {exc}", file=sys.stderr)
            return IO_EXIT
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(csv)
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfchecks

    results = run_selfchecks(emit_dir=args.emit)
    width = max(len(r.name) for r in results)
    failures = 0
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        print(f"{status}  {r.name:<{width}}  {r.detail}")
        failures += 0 if r.ok else 1
    print(f"{len(results) - failures}/{len(results)} checks passed")
    return 0 if failures == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edffd",
        description="Deformation-model engine and coarse-to-fine image registration",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    reg = sub.add_parser("register", help="align a target image onto a reference")
    reg.add_argument("reference")
    reg.add_argument("target")
    reg.add_argument("--model", choices=("edffd", "bspline", "tps"), default="edffd")
    reg.add_argument("--grid", type=_grid_arg, default=(12, 12),
                     help="stage-1 control grid, e.g. 12x12")
    reg.add_argument("--stages", type=int, choices=(1, 2), default=1)
    reg.add_argument("--theta", type=float, default=0.75)
    reg.add_argument("--alpha", type=float, default=10.0)
    reg.add_argument("--radius", type=int, default=4)
    reg.add_argument("--out-dir", default="registration_out")
    reg.add_argument("--diagnostics", default=None,
                     help="optional per-stage descent CSV (stage,iteration,loss,step)")
    reg.set_defaults(fn=cmd_register)

    wrp = sub.add_parser("warp", help="apply stored warp parameters to an image")
    wrp.add_argument("src")
    wrp.add_argument("params")
    wrp.add_argument("out")
    wrp.set_defaults(fn=cmd_warp)

    ben = sub.add_parser("bench", help="time field evaluation and warping per model")
    ben.add_argument("--sizes", type=_size_arg, nargs="+", default=[(512, 512)])
    ben.add_argument("--grids", type=_grid_arg, nargs="+", default=[(12, 12)])
    ben.add_argument("--repeats", type=int, default=5)
    ben.add_argument("--seed", type=int, default=0)
    ben.add_argument("--theta", type=float, default=0.75)
    ben.add_argument("--out", default=None, help="CSV path (stdout when omitted)")
    ben.set_defaults(fn=cmd_bench)

    chk = sub.add_parser("selfcheck", help="run the built-in property suite")
    chk.add_argument("--emit", default=None,
                     help="directory for synthetic registration fixtures")
    chk.set_defaults(fn=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
