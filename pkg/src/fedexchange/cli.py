"""Command-line entry point: run scenarios, run presets, compare finished runs.

Exit codes: 0 success, 1 simulation error, 2 missing file or unknown preset,
3 schema violation or missing/incompatible logs, 4 invariant violation (a
config value breaks a rule, or an internal contract fails), 5 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .config import (
    ScenarioConfig,
    config_hash,
    parse_config,
    serialize_config,
)
from .decision_engine import ALL_KINDS
from .errors import (
    ConfigurationError,
    InternalError,
    NotFoundError,
    SchemaError,
    SimulationError,
)
from .presets import preset
from .simulator import METRICS_COLUMNS, run_simulation

log = logging.getLogger("fedexchange")

EXIT_OK = 0
EXIT_SIMULATION = 1
EXIT_NOT_FOUND = 2
EXIT_SCHEMA = 3
EXIT_INVARIANT = 4
EXIT_IO = 5

SUMMARY_FILE = "summary.json"
METRICS_FILE = "metrics.csv"
MANIFEST_FILE = "manifest.json"
CONFIG_FILE = "config.yaml"


class IncompatibleRunsError(SimulationError):
    """Run directories that cannot be compared (missing or mismatched logs)."""


def scenario_key(config: ScenarioConfig) -> str:
    """Hash of everything except name, seed and strategy filter.

    Runs with equal keys differ only in which actions were allowed (and in
    seed), so comparing their accuracies is meaningful.
    """
    neutral = replace(
        config,
        name="",
        seed=0,
        engine=replace(config.engine, allowed=ALL_KINDS),
    )
    return config_hash(neutral)


def _strategy_label(config: ScenarioConfig) -> str:
    return "+".join(sorted(k.value for k in config.engine.allowed))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def run_one(config: ScenarioConfig, out_dir: str | Path) -> dict[str, Any]:
    """Simulate ``config`` and write metrics.csv, summary.json, config.yaml and manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    metrics = run_simulation(config)
    finished = _now()

    digest = config_hash(config)
    summary = {
        "name": config.name,
        "seed": config.seed,
        "strategy": _strategy_label(config),
        "final_mean_best_accuracy": metrics.final_mean_best_accuracy(),
        "convergence_round": metrics.network_convergence_round(),
        "rounds_run": metrics.rounds_run,
        "total_bytes": metrics.total_bytes,
        "dropped_actions": metrics.dropped_actions,
        "action_counts": dict(sorted(metrics.action_counts.items())),
        "config_hash": digest,
        "scenario_key": scenario_key(config),
    }
    _write_text(out / METRICS_FILE, metrics.to_csv())
    _write_text(out / SUMMARY_FILE, json.dumps(summary, indent=2) + "\n")
    _write_text(out / CONFIG_FILE, serialize_config(config))
    manifest = {
        "tool": "fedexchange",
        "version": __version__,
        "config_hash": digest,
        "seed": config.seed,
        "started": started,
        "finished": finished,
        "artifacts": [METRICS_FILE, SUMMARY_FILE, CONFIG_FILE],
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    _write_text(out / MANIFEST_FILE, json.dumps(manifest, indent=2) + "\n")
    log.info(
        "%s seed %d: best %.4f in %d rounds -> %s",
        config.name,
        config.seed,
        summary["final_mean_best_accuracy"],
        metrics.rounds_run,
        out,
    )
    return summary


def _run_job(job: tuple[ScenarioConfig, str]) -> dict[str, Any]:
    return run_one(*job)


def run_many(jobs: Sequence[tuple[ScenarioConfig, str]], workers: int = 1) -> list[dict[str, Any]]:
    """Run independent simulations, in worker processes when ``workers > 1``."""
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


def _seeded_jobs(
    configs: Sequence[ScenarioConfig], out: Path, seeds: Sequence[int] | None
) -> list[tuple[ScenarioConfig, str]]:
    jobs = []
    for config in configs:
        base = out / config.name if len(configs) > 1 else out
        if not seeds:
            jobs.append((config, str(base)))
        elif len(seeds) == 1:
            jobs.append((replace(config, seed=seeds[0]), str(base)))
        else:
            jobs.extend((replace(config, seed=s), str(base / f"seed-{s}")) for s in seeds)
    return jobs


# -- compare -----------------------------------------------------------------


def find_runs(paths: Sequence[str | Path]) -> list[Path]:
    """Directories holding a summary.json, searched recursively under each path."""
    found: list[Path] = []
    for p in map(Path, paths):
        if not p.exists():
            raise IncompatibleRunsError(f"no such run directory: {p}")
        if (p / SUMMARY_FILE).is_file():
            found.append(p)
        else:
            found.extend(sorted(s.parent for s in p.rglob(SUMMARY_FILE)))
    if not found:
        raise IncompatibleRunsError(f"no {SUMMARY_FILE} under {', '.join(map(str, paths))}")
    return found


def _load_run(path: Path) -> dict[str, Any]:
    metrics = path / METRICS_FILE
    if not metrics.is_file():
        raise IncompatibleRunsError(f"{path}: {METRICS_FILE} is missing")
    with metrics.open(newline="") as fh:
        header = next(csv.reader(fh), None)
    if header is None or tuple(header) != METRICS_COLUMNS:
        raise IncompatibleRunsError(f"{path}: unexpected {METRICS_FILE} columns {header}")
    try:
        summary = json.loads((path / SUMMARY_FILE).read_text())
    except json.JSONDecodeError as exc:
        raise IncompatibleRunsError(f"{path}: {SUMMARY_FILE} is not valid JSON ({exc})") from None
    missing = {"name", "final_mean_best_accuracy"} - summary.keys()
    if missing:
        raise IncompatibleRunsError(f"{path}: {SUMMARY_FILE} lacks {sorted(missing)}")
    summary["path"] = str(path)
    return summary


def compare_runs(paths: Sequence[str | Path]) -> dict[str, Any]:
    """Per-run table, per-name means over seeds, and the spread of those means.

    Runs that record a scenario key must all share it (same data, network
    and learner); otherwise the comparison is refused.
    """
    runs = [_load_run(p) for p in find_runs(paths)]
    keys = {r["scenario_key"] for r in runs if "scenario_key" in r}
    if len(keys) > 1:
        names = sorted({r["name"] for r in runs})
        raise IncompatibleRunsError(
            f"runs come from {len(keys)} different scenarios ({', '.join(names)}); "
            "compare runs of one scenario at a time"
        )
    groups: dict[str, list[float]] = {}
    for r in runs:
        groups.setdefault(r["name"], []).append(r["final_mean_best_accuracy"])
    means = {name: float(np.mean(v)) for name, v in sorted(groups.items())}
    spread = max(means.values()) - min(means.values())
    return {
        "runs": [
            {
                "name": r["name"],
                "seed": r.get("seed"),
                "final_mean_best_accuracy": r["final_mean_best_accuracy"],
                "convergence_round": r.get("convergence_round"),
                "total_bytes": r.get("total_bytes"),
                "path": r["path"],
            }
            for r in runs
        ],
        "means": {k: round(v, 6) for k, v in means.items()},
        "best": max(means, key=means.__getitem__),
        "spread": round(spread, 6),
    }


def format_comparison(report: dict[str, Any]) -> str:
    lines = [f"{'name':<28} {'seed':>5} {'best_acc':>9} {'conv':>5} {'bytes':>12}"]
    for r in report["runs"]:
        conv = "-" if r["convergence_round"] is None else str(r["convergence_round"])
        seed = "-" if r["seed"] is None else str(r["seed"])
        lines.append(
            f"{r['name']:<28} {seed:>5} {r['final_mean_best_accuracy']:>9.4f} "
            f"{conv:>5} {r['total_bytes'] or 0:>12}"
        )
    lines.append("")
    for name, mean in report["means"].items():
        lines.append(f"mean {name:<23} {mean:.4f}")
    lines.append(f"spread {report['spread']:.6f} (best: {report['best']})")
    return "\n".join(lines)


# -- argument handling -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedexchange",
        description="Simulate knowledge exchange between peers in dynamic federated learning.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--strict", action="store_true", help="reject unknown config keys instead of warning"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario from a YAML config file")
    run.add_argument("--config", required=True, help="path to a YAML scenario file")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int, nargs="+", help="override the seed; several seeds run separately")
    run.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    pre = sub.add_parser("preset", help="run one or more named presets")
    pre.add_argument("names", nargs="+", metavar="NAME", help="e.g. pathological or iid-s3")
    pre.add_argument("--out", required=True, help="output directory")
    pre.add_argument("--seed", type=int, nargs="+", help="seeds to run (default: the preset's)")
    pre.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    cmp_ = sub.add_parser("compare", help="compare finished runs of one scenario")
    cmp_.add_argument("dirs", nargs="+", metavar="DIR", help="run directories or their parents")
    cmp_.add_argument("--json", dest="json_out", help="also write the report as JSON here")
    return parser


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "run":
        config = parse_config(args.config, strict=args.strict)
        jobs = _seeded_jobs([config], Path(args.out), args.seed)
        for s in run_many(jobs, args.jobs):
            print(f"{s['name']} seed {s['seed']}: final mean best accuracy {s['final_mean_best_accuracy']:.4f}")
    elif args.command == "preset":
        configs = [preset(name) for name in args.names]
        jobs = _seeded_jobs(configs, Path(args.out), args.seed)
        for s in run_many(jobs, args.jobs):
            print(f"{s['name']} seed {s['seed']}: final mean best accuracy {s['final_mean_best_accuracy']:.4f}")
    else:
        report = compare_runs(args.dirs)
        print(format_comparison(report))
        if args.json_out:
            _write_text(Path(args.json_out), json.dumps(report, indent=2) + "\n")
    return EXIT_OK


def exit_code(exc: BaseException) -> int:
    """Map an exception to the documented process exit code."""
    if isinstance(exc, NotFoundError):
        return EXIT_NOT_FOUND
    if isinstance(exc, (SchemaError, IncompatibleRunsError)):
        return EXIT_SCHEMA
    if isinstance(exc, (ConfigurationError, InternalError)):
        return EXIT_INVARIANT
    if isinstance(exc, SimulationError):
        return EXIT_SIMULATION
    if isinstance(exc, OSError):
        return EXIT_IO
    raise exc


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _dispatch(args)
    except (SimulationError, OSError) as exc:
        print(f"fedexchange: error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
