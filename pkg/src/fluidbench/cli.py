"""Command line entry point: ``fluidbench gen|run|report``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, RunConfig, config_from_dict, config_to_dict, load_config
from .dataset import Dataset
from .harness import EvalLog, recompute_macs, run_stream
from .learners import build_learner
from .metrics import build_report, write_rolling_csv
from .ood import roc_points, write_roc_csv
from .sequence import StreamTask, build_sequence, validate_task
from .training import UpdateStrategy

log = logging.getLogger("fluidbench")

TABLE_HEADER = ("run", "novel_head", "pretrain_head", "novel_tail", "pretrain_tail",
                "mean_per_class", "overall", "gmacs")
SWEEP_HEADER = ("run", "seed", "learner", "strategy", "interval", "epochs", "overall",
                "mean_per_class", "training_macs", "total_macs", "gmacs")


class RunError(RuntimeError):
    """A run or report step failed; the message names the run."""


def run_id(run: RunConfig, seed: int) -> str:
    return f"{run.name}_seed{seed}"


def _manifest_path(out: Path, seed: int) -> Path:
    return out / "manifests" / f"seed_{seed}.json"


def _load_data(config: ExperimentConfig, base: Path) -> Dataset:
    return config.data.load(base)


# ---------------------------------------------------------------------------
# gen


def cmd_gen(config: ExperimentConfig, base: Path = Path("."), dataset: Dataset | None = None):
    """Write one StreamTask manifest per seed; returns the paths."""
    dataset = dataset if dataset is not None else _load_data(config, base)
    out = Path(config.output_dir)
    (out / "manifests").mkdir(parents=True, exist_ok=True)
    paths = []
    for seed in config.seeds:
        task = build_sequence(dataset, config.sequence_for(seed))
        validate_task(task, dataset)
        path = _manifest_path(out, seed)
        task.save(path)
        paths.append(path)
    return paths


def _task_for(config: ExperimentConfig, dataset: Dataset, seed: int) -> StreamTask:
    path = _manifest_path(Path(config.output_dir), seed)
    if not path.exists():
        task = build_sequence(dataset, config.sequence_for(seed))
        path.parent.mkdir(parents=True, exist_ok=True)
        task.save(path)
        return task
    task = StreamTask.load(path)
    if task.spec != config.sequence_for(seed):
        raise RunError(f"{path} was generated from a different sequence spec")
    validate_task(task, dataset)
    return task


# ---------------------------------------------------------------------------
# run


def execute_run(config: ExperimentConfig, run: RunConfig, seed: int, dataset: Dataset) -> dict:
    """Pretrain, stream, and write the log, summary, rolling and ROC files
    for one (run, seed).  Returns the summary."""
    out = Path(config.output_dir)
    rid = run_id(run, seed)
    task = _task_for(config, dataset, seed)
    strategy = run.strategy.build(config.sequence.total_samples)
    learner = build_learner(run.learner, dataset.dim, seed)
    pool = dataset.pretrain_pool
    learner.pretrain(dataset.features[pool], dataset.labels[pool])
    batch = run.learner.batch_size
    evals, meter = run_stream(task, dataset, learner, strategy, run.ood_scorer, seed, batch)
    report = build_report(evals, task.buckets, meter.total, config.window)

    (out / "logs").mkdir(parents=True, exist_ok=True)
    runs_dir = out / "reports" / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    log_path = out / "logs" / f"{rid}.ndjson"
    evals.write(log_path)
    write_rolling_csv(report.rolling, runs_dir / f"{rid}_rolling.csv")
    unseen = evals.column("unseen")
    if unseen.any() and not unseen.all():
        write_roc_csv(roc_points(evals.column("ood_score"), unseen), runs_dir / f"{rid}_roc.csv")
    metrics = report.to_dict()
    metrics.pop("rolling")
    summary = {
        "run": run.name,
        "seed": seed,
        "learner": dataclasses.asdict(run.learner),
        "strategy": dataclasses.asdict(strategy),
        "ood_scorer": run.ood_scorer,
        "batch_size": batch,
        "dataset_fingerprint": dataset.fingerprint(),
        "manifest": str(_manifest_path(Path("."), seed)),
        "log": str(Path("logs") / f"{rid}.ndjson"),
        "window": config.window,
        "cost_profile": learner.cost_profile(),
        "macs": meter.to_dict(),
        "metrics": metrics,
    }
    (runs_dir / f"{rid}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


_WORKER_DATA: dict = {}


def _worker(config_doc: dict, run_index: int, seed: int, base: str) -> dict:
    config = config_from_dict(config_doc)
    key = json.dumps(config_doc["data"], sort_keys=True) + base
    if key not in _WORKER_DATA:
        _WORKER_DATA[key] = _load_data(config, Path(base))
    run = config.runs[run_index]
    try:
        return execute_run(config, run, seed, _WORKER_DATA[key])
    except Exception as exc:
        raise RunError(f"run {run_id(run, seed)}: {exc}") from exc


def cmd_run(config: ExperimentConfig, base: Path = Path("."), jobs: int = 1) -> list[dict]:
    """Every (run, seed) pair of the config; manifests are generated on
    demand.  Summaries come back in config order."""
    dataset = _load_data(config, base)
    for seed in config.seeds:
        _task_for(config, dataset, seed)
    pairs = [(i, s) for i, _ in enumerate(config.runs) for s in config.seeds]
    if jobs <= 1:
        out = []
        for i, s in pairs:
            run = config.runs[i]
            log.info("running %s", run_id(run, s))
            try:
                out.append(execute_run(config, run, s, dataset))
            except Exception as exc:
                raise RunError(f"run {run_id(run, s)}: {exc}") from exc
        return out
    doc = config_to_dict(config)
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_worker, doc, i, s, str(base)) for i, s in pairs]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# report


def _sample_std(values) -> float:
    """Sample standard deviation; a single value has spread 0."""
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1))


def collect_runs(run_dirs) -> list[dict]:
    """Summaries from every run directory, each re-derived from its log:
    metrics are rebuilt from the NDJSON file and MACs are recomputed from
    the cost profile and checked against the metered totals."""
    summaries = []
    seen = set()
    for d in run_dirs:
        d = Path(d)
        files = sorted((d / "reports" / "runs").glob("*.json"))
        if not files:
            raise RunError(f"no completed runs under {d}")
        for f in files:
            s = json.loads(f.read_text())
            key = (s["run"], s["seed"])
            if key in seen:
                raise RunError(f"run {s['run']} seed {s['seed']} appears twice")
            seen.add(key)
            s["_dir"] = str(d)
            summaries.append(s)
    prints = {s["dataset_fingerprint"] for s in summaries}
    if len(prints) > 1:
        raise RunError(f"runs come from different datasets: {sorted(prints)}")
    for s in summaries:
        d = Path(s["_dir"])
        evals = EvalLog.read(d / s["log"])
        task = StreamTask.load(d / s["manifest"])
        st = s["strategy"]
        strategy = UpdateStrategy(st["kind"], st["interval"], st["epochs"], st["switch_at"])
        macs = recompute_macs(evals, s["cost_profile"], strategy, s["batch_size"], s["ood_scorer"])
        if macs["total"] != s["macs"]["total"]:
            raise RunError(f"run {s['run']} seed {s['seed']}: recorded MACs {s['macs']['total']} "
                           f"disagree with recomputation {macs['total']}")
        s["_report"] = build_report(evals, task.buckets, macs["total"], s["window"])
        s["_macs"] = macs
    return summaries


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def cmd_report(run_dirs, out) -> dict:
    """Write table.csv, accuracy_vs_macs.csv and aggregate.json under
    ``out/reports``; returns the aggregate."""
    summaries = collect_runs(run_dirs)
    by_run = defaultdict(list)
    for s in summaries:
        by_run[s["run"]].append(s)
    reports = Path(out) / "reports"
    reports.mkdir(parents=True, exist_ok=True)

    aggregate = {}
    rows = []
    for name, group in by_run.items():
        group.sort(key=lambda s: s["seed"])
        values = defaultdict(list)
        for s in group:
            r = s["_report"]
            values["overall"].append(r.overall_accuracy)
            values["mean_per_class"].append(r.mean_per_class)
            values["gmacs"].append(r.total_gmacs)
            if r.unseen_auroc is not None:
                values["unseen_auroc"].append(r.unseen_auroc)
            for b, v in r.bucket_accuracies.items():
                values[b.value].append(v)
        aggregate[name] = {
            "seeds": [s["seed"] for s in group],
            **{k: {"mean": float(np.mean(v)), "std": _sample_std(v), "n": len(v)}
               for k, v in values.items()},
        }
        mean = {k: aggregate[name][k]["mean"] if k in aggregate[name] else None
                for k in TABLE_HEADER[1:]}
        rows.append([name] + [_fmt(mean[k]) for k in TABLE_HEADER[1:]])

    with open(reports / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_HEADER)
        w.writerows(rows)
    with open(reports / "accuracy_vs_macs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for s in sorted(summaries, key=lambda s: (s["run"], s["seed"])):
            r = s["_report"]
            st = s["strategy"]
            w.writerow([s["run"], s["seed"], s["learner"]["kind"], st["kind"], st["interval"],
                        st["epochs"], _fmt(r.overall_accuracy), _fmt(r.mean_per_class),
                        s["_macs"]["training"], s["_macs"]["total"], _fmt(r.total_gmacs)])
    (reports / "aggregate.json").write_text(json.dumps(aggregate, indent=2, sort_keys=True) + "\n")
    return aggregate


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fluidbench", description="Streaming continual-learning benchmark.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in (("gen", "write stream manifests"), ("run", "run every learner and seed")):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--config", required=True, help="YAML experiment config")
        c.add_argument("--out", help="output directory (overrides the config)")
        c.add_argument("--seed-override", type=int, help="run this single seed instead")
        if name == "run":
            c.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    r = sub.add_parser("report", help="tables and plot data from completed runs")
    r.add_argument("run_dirs", nargs="*", help="run output directories (default: --out)")
    r.add_argument("--config", help="config whose output_dir is the default run directory")
    r.add_argument("--out", help="where reports/ is written")
    return p


def _resolve(args) -> tuple[ExperimentConfig, Path]:
    config = load_config(args.config)
    if args.out:
        config = config.with_output_dir(args.out)
    if args.seed_override is not None:
        config = config.with_seeds([args.seed_override])
    return config, Path(args.config).resolve().parent


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        if args.command == "gen":
            config, base = _resolve(args)
            for path in cmd_gen(config, base):
                print(path)
        elif args.command == "run":
            if args.jobs < 1:
                raise ConfigError("--jobs must be at least 1")
            config, base = _resolve(args)
            for s in cmd_run(config, base, args.jobs):
                print(f"{s['run']} seed {s['seed']}: overall {s['metrics']['overall_accuracy']:.4f}"
                      f"  GMACs {s['macs']['total'] / 1e9:.6g}")
        else:
            out = args.out
            if out is None:
                out = load_config(args.config).output_dir if args.config else "out"
            dirs = args.run_dirs or [out]
            cmd_report(dirs, out)
            print(Path(out) / "reports" / "table.csv")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # any runtime failure maps to exit 2
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
