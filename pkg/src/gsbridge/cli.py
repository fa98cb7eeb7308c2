"""``gsbridge`` command line: one subcommand per pipeline stage plus ``run-all``."""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .io import ParseError, read_config
from .pipeline import (
    DEFAULT_PRESET,
    PRESETS,
    STAGE_FUNCS,
    STAGES,
    ConfigError,
    PipelineError,
    Run,
    compare_pair,
    merge_config,
    preset_config,
    run_all,
    validate_config,
)

THREADS_ENV = "JGA_THREADS"
# Config field that --steps sets for each subcommand.
STEPS_FIELD = {
    "train-unify": ("unify", "steps"), "train-vae": ("vae", "steps"), "train-bridge": ("bridge", "steps"),
    "sample": ("sample", "steps"), "run-all": ("sample", "steps"),
}
EXIT_USAGE, EXIT_PIPELINE = 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsbridge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "run-all"):
        p = sub.add_parser(name, help=(STAGE_FUNCS[name].__doc__ or "").split("\n")[0] if name in STAGE_FUNCS
                           else "run every stage in order and print the metrics")
        p.add_argument("--out", type=Path, default=Path("gsbridge-out"), help="run directory (default %(default)s)")
        p.add_argument("--config", type=Path, help="JSON file merged over the preset")
        p.add_argument("--preset", choices=sorted(PRESETS),
                       help=f"base configuration (default: the run's config.json, else {DEFAULT_PRESET})")
        p.add_argument("--seed", type=int)
        p.add_argument("--resolution", type=int, help="voxel grid resolution R")
        if name in STEPS_FIELD:
            section, field = STEPS_FIELD[name]
            p.add_argument("--steps", type=int, help=f"sets {section}.{field}")
        if name in ("sample", "run-all"):
            p.add_argument("--churn-ratio", type=float, dest="churn_ratio")
            p.add_argument("--guidance", type=float)
        if name == "eval":
            p.add_argument("--pred", type=Path, help="compare this PLY against --gt instead of a run")
            p.add_argument("--gt", type=Path)
            p.add_argument("--mesh", type=Path, help="reference surface OBJ for p2s in --pred/--gt mode")
            p.add_argument("--no-report", action="store_true", help="skip the matplotlib figures")
    return parser


def resolve_config(args) -> dict:
    """Preset or the run's saved config, then --config, then individual flags; validated."""
    saved = args.out / "config.json"
    if args.preset is not None:
        cfg = preset_config(args.preset)
    elif saved.exists():
        cfg = read_config(saved)
    else:
        cfg = preset_config(DEFAULT_PRESET)
    if args.config is not None:
        cfg = merge_config(cfg, read_config(args.config))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.resolution is not None:
        cfg["resolution"] = args.resolution
    if getattr(args, "steps", None) is not None:
        section, field = STEPS_FIELD[args.command]
        cfg[section][field] = args.steps
    for flag in ("churn_ratio", "guidance"):
        if getattr(args, flag, None) is not None:
            cfg["sample"][flag] = getattr(args, flag)
    return validate_config(cfg)


def thread_limit() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"{THREADS_ENV}: expected a positive integer, got {raw!r}")
    return n


def _execute(args) -> dict:
    if args.command == "eval" and (args.pred is not None or args.gt is not None):
        if args.pred is None or args.gt is None:
            raise ConfigError("eval: --pred and --gt must be given together")
        return compare_pair(args.pred, args.gt, args.out, mesh_obj=args.mesh)
    run = Run(args.out, resolve_config(args))
    if args.command == "run-all":
        return run_all(run, log=lambda msg: print(msg, file=sys.stderr, flush=True))
    if args.command == "eval":
        return STAGE_FUNCS["eval"](run, report=not args.no_report)
    return STAGE_FUNCS[args.command](run)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=thread_limit()):
            result = _execute(args)
    except (ConfigError, ParseError) as err:
        print(f"gsbridge {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except PipelineError as err:
        print(f"gsbridge {args.command}: error: {err}", file=sys.stderr)
        return EXIT_PIPELINE
    if args.command in ("eval", "run-all"):
        print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
