#!/usr/bin/env python3
"""
ACL Lab
Command-line front door: run sweeps, recompute metrics, export plot tables
"""

import argparse
import logging
import sys
from pathlib import Path

from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from engine.config_loader import ConfigLoader
from engine.errors import ACLError, ConfigError
from engine.harness import (
    cell_stats,
    emit_jaccard,
    emit_lca_tasks,
    emit_mode_delta,
    emit_nfr,
    emit_profile,
    emit_relative,
    emit_summary,
    load_records,
    run_experiment,
)
from engine.mnist_client import MnistClient
from engine.task_streams import download_mnist

EXIT_OK, EXIT_CONFIG, EXIT_RUN_FAILED = 0, 2, 3
DEFAULT_BUDGETS = [0.02, 0.04, 0.06, 0.08, 0.10]

console = Console()
logger = logging.getLogger("acl")


def print_header(text):
    """Print a formatted header"""
    console.rule(f"[bold]{text}")


def print_cells(records):
    """Print per-cell mean ± std (x100) of the run summaries"""
    table = Table(title="Results (mean ± std, x100)")
    for column in ("method", "scenario", "cl", "al", "mode", "n", "avg acc", "FR", "LCA"):
        table.add_column(column, justify="right" if column in ("n", "avg acc", "FR", "LCA") else "left")
    for row in cell_stats(records):
        key, n, stats = row[:5], row[5], row[6:]
        shown = []
        for mean, std in zip(stats[0::2], stats[1::2]):
            shown.append("-" if mean is None else f"{100 * mean:.2f} ± {100 * std:.2f}")
        table.add_row(*map(str, key), str(n), *shown)
    console.print(table)


def cmd_run(args):
    config = ConfigLoader(args.configs).parse_config(args.config)
    print_header(f"Running {args.config}")
    records = run_experiment(config, jobs=args.jobs, out_dir=args.out, progress=not args.quiet)
    print_cells(records)
    failed = [r for r in records if r.status != "ok"]
    for record in failed:
        console.print(f"[red]✗ {record.fingerprint}: {record.error}")
    return EXIT_RUN_FAILED if failed else EXIT_OK


def cmd_metrics(args):
    records = load_records(args.runs)
    emit_summary(records, args.out)
    print_cells(records)
    return EXIT_OK


def cmd_profile(args):
    emit_profile(load_records(args.runs), args.out)
    return EXIT_OK


def cmd_relative(args):
    emit_relative(load_records(args.runs), load_records(args.baseline), args.out)
    return EXIT_OK


def cmd_nfr(args):
    emit_nfr(load_records(args.runs), load_records(args.baseline), args.budgets, args.out)
    return EXIT_OK


def cmd_jaccard(args):
    emit_jaccard(load_records(args.runs), args.out)
    return EXIT_OK


def cmd_modes(args):
    emit_mode_delta(load_records(args.runs), args.out)
    return EXIT_OK


def cmd_lca_tasks(args):
    emit_lca_tasks(load_records(args.runs), args.out)
    return EXIT_OK


def cmd_download(args):
    client = MnistClient.from_sources(ConfigLoader(args.configs).load_sources())
    for path in download_mnist(args.dest, client, overwrite=args.overwrite):
        console.print(f"  • {path}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="acl-lab", description=__doc__.strip().splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("--configs", default="configs", help="directory holding sources.yaml")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute an experiment sweep")
    run.add_argument("--config", required=True)
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    run.add_argument("--quiet", action="store_true", help="no progress bar")
    run.set_defaults(func=cmd_run)

    for name, func, help_text in (
        ("metrics", cmd_metrics, "recompute the per-run summary from run logs"),
        ("profile", cmd_profile, "forgetting-learning profile table"),
        ("jaccard", cmd_jaccard, "sequential vs independent query overlap"),
        ("modes", cmd_modes, "independent minus sequential accuracy"),
        ("lca-tasks", cmd_lca_tasks, "LCA of seen tasks per task index"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--runs", required=True)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    for name, func, help_text in (
        ("relative", cmd_relative, "ACL minus full-data CL accuracy"),
        ("nfr", cmd_nfr, "normalized forgetting ratio at budget milestones"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--runs", required=True)
        p.add_argument("--baseline", required=True)
        p.add_argument("--out", required=True)
        if name == "nfr":
            p.add_argument("--budgets", type=float, nargs="+", default=DEFAULT_BUDGETS)
        p.set_defaults(func=func)

    download = sub.add_parser("download", help="fetch the MNIST IDX files")
    download.add_argument("--dest", default=str(Path("data") / "mnist"))
    download.add_argument("--overwrite", action="store_true")
    download.set_defaults(func=cmd_download)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
    )
    try:
        return args.func(args)
    except ConfigError as e:
        where = f" (key: {e.key})" if e.key else ""
        console.print(f"[red]Config error{where}: {e}")
        return EXIT_CONFIG
    except ACLError as e:
        console.print(f"[red]Error: {e}")
        return EXIT_RUN_FAILED


if __name__ == "__main__":
    sys.exit(main())
