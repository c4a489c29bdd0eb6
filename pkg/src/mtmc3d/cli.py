"""Command-line entry points: run, gen, eval, inspect."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import pipeline, synth
from .config import PipelineConfig, annotated_dump
from .errors import DataError, UndefinedScoreError, ValidationError
from .evaluation import hota, identity_switches, to_trackset
from .ingest import load_results

EXIT_OK, EXIT_VALIDATION, EXIT_DATA = 0, 1, 2

log = logging.getLogger("mtmc3d")


def _config_from_args(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    if getattr(args, "mode", None):
        cfg.mode = args.mode
    if getattr(args, "bypass_sct", False):
        cfg.sct.bypass = True
    if getattr(args, "workers", None):
        cfg.workers = args.workers
    if getattr(args, "seed", None) is not None:
        cfg.corruption.seed = args.seed
    return cfg.validate()


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    if args.print_config:
        sys.stdout.write(annotated_dump(cfg))
        return EXIT_OK
    if not args.scene or not args.out:
        raise ValidationError("run needs --scene and --out")
    summary = pipeline.run(args.scene, cfg, args.out)
    print(json.dumps(summary.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_gen(args) -> int:
    if args.config:
        scenario = synth.ScenarioConfig.load(args.config)
    else:
        scenario = synth.preset(args.preset)
    if args.seed is not None:
        scenario.seed = args.seed
    if args.frames is not None:
        scenario.frames = args.frames
    summary = synth.generate(scenario, args.out)
    print(json.dumps({"out_dir": str(summary.out_dir), "frames": summary.frames, "cameras": summary.cameras,
                      "detections": summary.detections, "gt_rows": summary.gt_rows, "warnings": summary.warnings}))
    return EXIT_OK


def cmd_eval(args) -> int:
    gt = to_trackset(load_results(args.gt))
    pred = to_trackset(load_results(args.pred))
    res = hota(gt, pred)
    print(res.summary_line())
    sw = identity_switches(gt, pred)
    print(f"IDSW gt {sw['gt_switches']} pred {sw['pred_switches']}")
    if args.out:
        Path(args.out).write_text(res.per_alpha_csv(), encoding="utf-8")
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = _config_from_args(args)
    dump = pipeline.inspect(args.scene, cfg, args.frame)
    text = json.dumps(dump, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtmc3d", description="Online 3D multi-camera multi-target tracking.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def pipeline_flags(sp):
        sp.add_argument("--scene", help="scene directory")
        sp.add_argument("--config", help="pipeline config JSON")
        sp.add_argument("--out", help="output directory (run) or file (inspect)")
        sp.add_argument("--mode", choices=["2d", "3d"])
        sp.add_argument("--bypass-sct", action="store_true", help="use local track ids from the detections")
        sp.add_argument("--workers", type=int)
        sp.add_argument("--seed", type=int, help="seed for the cluster-corruption experiment")

    r = sub.add_parser("run", help="track a scene")
    pipeline_flags(r)
    r.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gen", help="generate a synthetic scene")
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="scenario JSON (overrides --preset)")
    g.add_argument("--preset", default="clean", choices=list(synth.PRESETS))
    g.add_argument("--seed", type=int)
    g.add_argument("--frames", type=int)
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--gt", required=True)
    e.add_argument("--pred", required=True)
    e.add_argument("--out", help="write per-alpha CSV here")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="dump one frame's intermediate products")
    pipeline_flags(i)
    i.add_argument("--frame", type=int, required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, UndefinedScoreError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
