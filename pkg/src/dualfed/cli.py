"""Command-line entry point.

Subcommands: `run` (seed-sweep experiment), `compare` (table from run
summaries), `dump-reps` (representation dumps at a chosen round), and
`plot` (re-render figures from an existing run directory).

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import parse_config
from .errors import ConfigError, DualFedError
from .runner import compare_runs, dump_reps_at_round, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualfed",
        description="Desk-scale dual-representation federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment (one run per seed)")
    run_p.add_argument("--config", help="config file path")
    run_p.add_argument("--method", help="method variant override")
    run_p.add_argument("--rounds", type=int, help="global rounds override")
    run_p.add_argument("--seeds", help="comma-separated seed list override")
    run_p.add_argument("--out", help="output directory override")
    run_p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       dest="extra", help="override any config key")
    run_p.add_argument("--no-figures", action="store_true",
                       help="skip figure rendering")

    cmp_p = sub.add_parser("compare", help="tabulate run summaries")
    cmp_p.add_argument("summaries", nargs="+", help="summary.json files")
    cmp_p.add_argument("--out", help="directory for comparison artifacts")

    dump_p = sub.add_parser("dump-reps",
                            help="dump (z, u) representations at a round")
    dump_p.add_argument("--config", help="config file path")
    dump_p.add_argument("--round", type=int, required=True)
    dump_p.add_argument("--out", help="output directory override")
    dump_p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        dest="extra")

    plot_p = sub.add_parser("plot", help="re-render figures for a run directory")
    plot_p.add_argument("--run-dir", required=True)
    return parser


def _collect_overrides(args: argparse.Namespace) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for item in getattr(args, "extra", []):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if getattr(args, "method", None):
        overrides["method.name"] = args.method
    if getattr(args, "rounds", None) is not None:
        overrides["train.rounds"] = str(args.rounds)
    if getattr(args, "seeds", None):
        overrides["run.seeds"] = args.seeds
    if getattr(args, "out", None):
        overrides["run.output_dir"] = args.out
    if getattr(args, "no_figures", False):
        overrides["run.figures"] = "false"
    return overrides


def _cmd_run(args: argparse.Namespace) -> int:
    overrides = _collect_overrides(args)
    cfg = parse_config(args.config, overrides)
    artifacts = run_experiment(cfg, config_values=overrides)
    head = artifacts.summary.get("headline")
    if head is not None:
        print(f"{artifacts.summary['method']}: {head['formatted']} "
              f"(best mean ensemble accuracy over {len(cfg.seeds)} seed(s))")
    print(f"artifacts written to {artifacts.output_dir}")
    return EXIT_OK


def _cmd_compare(args: argparse.Namespace) -> int:
    text, _ = compare_runs(args.summaries, out_dir=args.out)
    print(text, end="")
    return EXIT_OK


def _cmd_dump_reps(args: argparse.Namespace) -> int:
    overrides = _collect_overrides(args)
    cfg = parse_config(args.config, overrides)
    paths = dump_reps_at_round(cfg, args.round)
    for path in paths:
        print(path)
    return EXIT_OK


def _cmd_plot(args: argparse.Namespace) -> int:
    from . import figures
    from .metrics import MetricsRow, read_metrics_csv

    run_dir = args.run_dir
    if not os.path.isdir(run_dir):
        raise DualFedError(f"not a directory: {run_dir}")
    rendered = 0
    for name in sorted(os.listdir(run_dir)):
        if not (name.startswith("metrics_seed") and name.endswith(".csv")):
            continue
        seed_tag = name[len("metrics_"):-len(".csv")]
        header, raw_rows = read_metrics_csv(os.path.join(run_dir, name))
        m = sum(1 for h in header if h.startswith("acc_global_c"))
        rows = []
        for row in raw_rows:
            vals = dict(zip(header, row))
            rows.append(MetricsRow(
                round=int(vals["round"]),
                acc_global=tuple(vals[f"acc_global_c{i}"] for i in range(m)),
                acc_personal=tuple(vals[f"acc_personal_c{i}"] for i in range(m)),
                acc_ensemble=tuple(vals[f"acc_ensemble_c{i}"] for i in range(m)),
                sep_z=tuple(vals[f"sep_z_c{i}"] for i in range(m)),
                sep_u=tuple(vals[f"sep_u_c{i}"] for i in range(m)),
                mean_cka_z=vals["mean_cka_z"],
                mean_cka_u=vals["mean_cka_u"],
                comm_bytes=int(vals["comm_bytes"]),
            ))
        if not rows:
            continue
        figures.save_training_curves(
            rows, os.path.join(run_dir, f"accuracy_{seed_tag}.png"))
        figures.save_representation_curves(
            rows, os.path.join(run_dir, f"representations_{seed_tag}.png"))
        rendered += 1
    if rendered == 0:
        raise DualFedError(f"no metrics CSV files found in {run_dir}")
    print(f"rendered figures for {rendered} run(s) in {run_dir}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "compare": _cmd_compare,
        "dump-reps": _cmd_dump_reps,
        "plot": _cmd_plot,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DualFedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
