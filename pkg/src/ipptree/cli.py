"""Command-line benchmark front end.

Exit codes: 0 success, 2 configuration error, 3 collision failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bench import (
    ConfigError,
    ScenarioConfig,
    aggregate,
    export_surface_ply,
    load_final_map,
    run_experiment,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_COLLISION = 3


def _cmd_run(args) -> int:
    cfg = ScenarioConfig.from_yaml(args.scenario, seed=args.seed)
    _, summary = run_experiment(cfg, out_dir=args.out)
    err = summary["reconstruction_error_m"]
    print(f"[{cfg.name} seed={cfg.seed}] status={summary['status']} "
          f"t={summary['t_end_s']:.1f}s explored={summary['exploration_ratio']:.3f} "
          f"error={'-' if err is None else f'{err:.4f}'}m "
          f"distance={summary['distance_m']:.1f}m wall={summary['wall_s']:.1f}s")
    return EXIT_COLLISION if summary["status"] == "collision" else EXIT_OK


def _cmd_sweep(args) -> int:
    summaries = []
    for seed in range(args.seeds):
        cfg = ScenarioConfig.from_yaml(args.scenario, seed=seed)
        out = Path(args.out) / f"seed_{seed:03d}" if args.out else None
        _, summary = run_experiment(cfg, out_dir=out)
        err = summary["reconstruction_error_m"]
        print(f"  seed {seed}: status={summary['status']} "
              f"explored={summary['exploration_ratio']:.3f} "
              f"error={'-' if err is None else f'{err:.4f}'} "
              f"wall={summary['wall_s']:.1f}s")
        summaries.append(summary)
    agg = aggregate(summaries)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "aggregate.json").write_text(
            json.dumps(agg, indent=2, sort_keys=True) + "\n")
    _print_aggregate(summaries[0]["scenario"], agg)
    return EXIT_OK


def _print_aggregate(name: str, agg: dict):
    exp = agg["exploration_ratio"]
    err = agg["reconstruction_error_m"]
    err_s = "-" if err["mean"] is None else f"{err['mean']:.4f}+-{err['std']:.4f}"
    print(f"{name}: runs={agg['runs']} failed={agg['failed']} "
          f"exploration={exp['mean']:.3f}+-{exp['std']:.3f} error={err_s}")


def _cmd_report(args) -> int:
    groups: dict[str, list] = {}
    for path in sorted(Path(args.input).rglob("summary.json")):
        summary = json.loads(path.read_text())
        groups.setdefault(summary["scenario"], []).append(summary)
    if not groups:
        print(f"no summary.json files under {args.input}", file=sys.stderr)
        return EXIT_CONFIG
    for name in sorted(groups):
        _print_aggregate(name, aggregate(groups[name]))
    return EXIT_OK


def _cmd_export_ply(args) -> int:
    run_dir = Path(args.input)
    if not (run_dir / "final_map.npz").is_file():
        raise ConfigError(f"no final_map.npz under {run_dir}")
    grid, boxes = load_final_map(run_dir)
    out = Path(args.out) if args.out else run_dir / "surface.ply"
    n = export_surface_ply(grid, boxes, out)
    print(f"wrote {n} surface points to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ipptree", description="Informative path planning benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one seeded scenario")
    p_run.add_argument("--scenario", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="run seeds 0..n-1 of a scenario")
    p_sweep.add_argument("--scenario", required=True)
    p_sweep.add_argument("--seeds", type=int, required=True)
    p_sweep.add_argument("--out", default=None)
    p_sweep.set_defaults(func=_cmd_sweep)

    p_rep = sub.add_parser("report", help="aggregate summaries under a directory")
    p_rep.add_argument("--in", dest="input", required=True)
    p_rep.set_defaults(func=_cmd_report)

    p_ply = sub.add_parser("export-ply", help="export surface voxels of a run to PLY")
    p_ply.add_argument("--in", dest="input", required=True)
    p_ply.add_argument("--out", default=None)
    p_ply.set_defaults(func=_cmd_export_ply)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
