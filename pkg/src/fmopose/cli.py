"""Command line interface: ``fmopose {synth,track,eval,superres}``.

Exit codes: 0 success, 2 input error, 3 solver failure (partial outputs
kept), 4 evaluation misalignment.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import ConfigError, dump_config, load_config
from .metrics import format_table


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, help="override the seed")
    p.add_argument("--jobs", type=int, help="worker processes for per-frame stages")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="fmopose", description="Sub-frame pose of fast moving spheres.")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic scene with ground truth")
    s.add_argument("--out", required=False, help="output directory (default: output.dir)")

    t = sub.add_parser("track", parents=[common], help="deblat, fit the 3D trajectory and estimate rotation")
    t.add_argument("--frames", help="frame directory (input.frames)")
    t.add_argument("--trajectory", help="Curve2D JSON file (trajectory.source = file)")
    t.add_argument("--oracle", metavar="GT_DIR", help="use the ground-truth 2D trajectory from GT_DIR")
    t.add_argument("--estimate-trajectory", action="store_true", help="estimate per-frame blur kernels instead")
    t.add_argument("--background", help="background PNG (input.background)")
    t.add_argument("--out", help="output directory (output.dir)")
    t.add_argument("--levels", type=int, help="hierarchy levels L")
    t.add_argument("--start-stage", choices=pipeline.STAGES, default="deblat",
                   help="resume from a stage using artifacts already in the output directory")
    t.add_argument("--diagnostics", action="store_true", help="write solver_history.csv")

    e = sub.add_parser("eval", parents=[common], help="score a tracking run against ground truth")
    e.add_argument("est_dir")
    e.add_argument("gt_dir")
    e.add_argument("--report", help="report CSV path (default: EST_DIR/report.csv)")

    r = sub.add_parser("superres", parents=[common], help="re-render a tracked sequence at a higher frame rate")
    r.add_argument("--factor", type=int, help="output frames per input frame")
    r.add_argument("--frames", help="frame directory (input.frames)")
    r.add_argument("--background", help="background PNG (input.background)")
    r.add_argument("--out", help="tracking output directory (output.dir)")
    return ap


def _overrides(args) -> dict:
    values = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    if args.seed is not None:
        values["seed"] = args.seed
    if args.jobs is not None:
        values["jobs"] = args.jobs
    for flag, key in (("frames", "input.frames"), ("background", "input.background"), ("out", "output.dir"),
                      ("levels", "hierarchy.levels"), ("factor", "superres.factor")):
        v = getattr(args, flag, None)
        if v is not None and not (args.command == "synth" and flag == "out"):
            values[key] = v
    if getattr(args, "trajectory", None):
        values.update({"trajectory.source": "file", "trajectory.file": args.trajectory})
    if getattr(args, "oracle", None):
        values.update({"trajectory.source": "oracle", "trajectory.gt_dir": args.oracle})
    if getattr(args, "estimate_trajectory", False):
        values["trajectory.source"] = "estimate"
    return values


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "track" and sum(map(bool, (args.trajectory, args.oracle, args.estimate_trajectory))) > 1:
            raise ConfigError("choose only one of --trajectory, --oracle, --estimate-trajectory")
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as exc:
        print(f"fmopose: config error: {exc}", file=sys.stderr)
        return pipeline.EXIT_INPUT
    if args.print_config:
        sys.stdout.write(dump_config(cfg))
        return pipeline.EXIT_OK
    try:
        if args.command == "synth":
            frames, _ = pipeline.run_synth(cfg, args.out or cfg["output.dir"])
            print(f"wrote {len(frames)} frames to {args.out or cfg['output.dir']}")
        elif args.command == "track":
            res = pipeline.run_track(cfg, diagnostics=args.diagnostics, start=args.start_stage)
            print(f"tracked {res.manifest['n_frames']} frames: {len(res.bounces)} bounces, "
                  f"{len(res.velocities)} velocity windows -> {res.out_dir}")
        elif args.command == "eval":
            print(format_table(pipeline.run_eval(args.est_dir, args.gt_dir, args.report)))
        else:
            frames, reused = pipeline.run_superres(cfg)
            print(f"wrote {len(frames)} frames" + (" (snapshots reused)" if reused else ""))
    except pipeline.PipelineError as exc:
        print(f"fmopose: {exc}", file=sys.stderr)
        return exc.code
    return pipeline.EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
