"""
Experiment harness: sweeps, run-log persistence and plot-ready exports

Every run of a sweep is identified by a fingerprint of its canonical
descriptor. Run logs are stored as one JSON file per run; summaries and
exports are CSV with a header row, LF line endings and floats written
with six significant digits.
"""
import csv
import hashlib
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, replace
from itertools import product
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .acl_engine import milestone_key, run_acl, run_ceiling_indiv, run_ceiling_mtl, run_supervised_cl, to_plain
from .errors import BaselineMissingError, MetricError
from .metrics import (
    avg_accuracy,
    current_task_lcas,
    forgetting_rate,
    jaccard,
    lca_seen_tasks,
    normalized_fr,
    paired_delta,
)
from .models import ExperimentConfig, LabelledSet, ResultRecord, RunConfig, RunLog, TaskStream
from .task_streams import (
    limit_per_class,
    load_mnist,
    make_permuted_stream,
    make_split_stream,
    make_synthetic_stream,
    reorder_tasks,
)

logger = logging.getLogger(__name__)

ACL, FULL, INDIV, MTL = "acl", "full", "indiv", "mtl"
NONE = "-"
STREAM_SEED = 0

SUMMARY_COLUMNS = ["fingerprint", "method", "dataset", "scenario", "cl", "al", "mode",
                   "seed", "task_order", "status", "avg_acc", "fr", "lca", "run_path"]
CELL_COLUMNS = ["method", "scenario", "cl", "al", "mode", "n",
                "avg_acc_mean", "avg_acc_std", "fr_mean", "fr_std", "lca_mean", "lca_std"]
PROFILE_COLUMNS = ["method", "mode", "al", "cl", "lca", "fr", "seed", "task_order"]


# ------------------------------------------------------------ formatting


def round_floats(value: Any) -> Any:
    """Round every float in a JSON tree to six significant digits"""
    if isinstance(value, float):
        return float(f"{value:.6g}")
    if isinstance(value, dict):
        return {k: round_floats(v) for k, v in value.items()}
    if isinstance(value, list):
        return [round_floats(v) for v in value]
    return value


def fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6g}"
    return str(value)


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    logger.info("Wrote %s", path)
    return path


def fingerprint(descriptor: Dict[str, Any]) -> str:
    canonical = json.dumps(descriptor, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def dump_runlog(log: RunLog) -> str:
    return json.dumps(round_floats(log.to_dict()), sort_keys=True, separators=(",", ":")) + "\n"


def write_runlog(log: RunLog, path) -> RunLog:
    """Write a run log and return its canonical (rounded, re-read) form"""
    text = dump_runlog(log)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return RunLog.from_dict(json.loads(text))


def read_runlog(path) -> RunLog:
    return RunLog.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -------------------------------------------------------------- summaries


def summarize(log: RunLog) -> Dict[str, Optional[float]]:
    """avg accuracy, forgetting rate and LCA where each is defined"""
    summary: Dict[str, Optional[float]] = {"avg_acc": avg_accuracy(log.accuracy_matrix),
                                           "fr": None, "lca": None}
    if len(log.accuracy_matrix) >= 2:
        summary["fr"] = forgetting_rate(log.accuracy_matrix)
    if log.round_curves:
        summary["lca"] = float(np.mean(current_task_lcas(log)))
    return summary


def _order_tag(descriptor: Dict[str, Any]) -> str:
    return "-".join(str(i) for i in descriptor.get("task_order", []))


def _summary_row(record: ResultRecord) -> List[Any]:
    d = record.descriptor
    s = record.summary
    return [record.fingerprint, d["method"], d["dataset"], d["scenario"], d["cl"], d["al"], d["mode"],
            d["seed"], _order_tag(d), record.status, s.get("avg_acc"), s.get("fr"), s.get("lca"),
            record.run_path or ""]


def emit_summary(records: Sequence[ResultRecord], out_path) -> Path:
    ordered = sorted(records, key=lambda r: r.fingerprint)
    return write_csv(out_path, SUMMARY_COLUMNS, (_summary_row(r) for r in ordered))


def _cell_key(record: ResultRecord) -> Tuple[str, ...]:
    d = record.descriptor
    return d["method"], d["scenario"], d["cl"], d["al"], d["mode"]


def cell_stats(records: Sequence[ResultRecord]) -> List[List[Any]]:
    """Per-cell mean and sample std (ddof=1; 0 for a single run) of the run summaries"""
    cells: Dict[Tuple[str, ...], List[ResultRecord]] = {}
    for record in records:
        if record.status == "ok":
            cells.setdefault(_cell_key(record), []).append(record)
    rows = []
    for key in sorted(cells):
        group = cells[key]
        row: List[Any] = [*key, len(group)]
        for metric in ("avg_acc", "fr", "lca"):
            values = [r.summary[metric] for r in group if r.summary.get(metric) is not None]
            std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
            row += [float(np.mean(values)), std] if values else [None, None]
        rows.append(row)
    return rows


def emit_cells(records: Sequence[ResultRecord], out_path) -> Path:
    return write_csv(out_path, CELL_COLUMNS, cell_stats(records))


# ------------------------------------------------------------------ sweeps


@dataclass(frozen=True)
class RunSpec:
    method: str
    cl: str
    al: str
    mode: str
    seed: int
    order_index: int
    task_order: Tuple[int, ...]


def _shared_settings(config: ExperimentConfig) -> Dict[str, Any]:
    settings = to_plain({
        "dataset": config.dataset,
        "scenario": config.scenario,
        "num_tasks": config.num_tasks,
        "classes_per_task": config.classes_per_task,
        "class_order": config.class_order,
        "val_fraction": config.val_fraction,
        "budget_fraction": config.budget_fraction,
        "query_fraction": config.query_fraction,
        "hyper": config.hyper,
        "arch": config.arch,
        "milestones": config.milestones,
        "train_limit": config.train_limit,
    })
    if config.dataset == "synthetic":
        settings["synthetic"] = to_plain(config.synthetic)
    return settings


def describe(config: ExperimentConfig, spec: RunSpec) -> Dict[str, Any]:
    descriptor = _shared_settings(config)
    descriptor.update(method=spec.method, cl=spec.cl, al=spec.al, mode=spec.mode,
                      seed=spec.seed, task_order=list(spec.task_order))
    return round_floats(descriptor)


def plan_runs(config: ExperimentConfig) -> List[RunSpec]:
    """Cross product of orders, seeds, strategies and modes (plus extras)"""
    specs = []
    for (index, order), seed in product(enumerate(config.task_orders), config.seeds):
        for cl, al, mode in product(config.cl, config.al, config.modes):
            specs.append(RunSpec(ACL, cl.value, al.value, mode.value, seed, index, order))
        if config.include_baseline:
            for cl in config.cl:
                specs.append(RunSpec(FULL, cl.value, NONE, FULL, seed, index, order))
        for ceiling, al in product(config.ceilings, config.al):
            specs.append(RunSpec(ceiling, NONE, al.value, ceiling, seed, index, order))
    return specs


class StreamFactory:
    """Builds (and caches) the base stream once; orders are cheap views"""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self._base: Optional[TaskStream] = None
        self._ordered: Dict[Tuple[int, ...], TaskStream] = {}
        self._lock = threading.Lock()

    def _load(self) -> Tuple[LabelledSet, LabelledSet]:
        train, test = load_mnist(self.config.data_dir)
        return limit_per_class(train, self.config.train_limit, STREAM_SEED), test

    def base(self) -> TaskStream:
        if self._base is None:
            c = self.config
            if c.dataset == "synthetic":
                self._base = make_synthetic_stream(c.synthetic, c.scenario, STREAM_SEED)
            elif c.dataset == "mnist_permuted":
                train, test = self._load()
                self._base = make_permuted_stream(train, test, c.num_tasks, c.val_fraction,
                                                  c.budget_fraction, c.query_fraction, STREAM_SEED)
            else:
                train, test = self._load()
                self._base = make_split_stream(train, test, c.classes_per_task, c.class_order,
                                               c.val_fraction, c.budget_fraction, c.query_fraction,
                                               STREAM_SEED, c.scenario)
        return self._base

    def ordered(self, order: Sequence[int]) -> TaskStream:
        key = tuple(order)
        with self._lock:
            if key not in self._ordered:
                self._ordered[key] = reorder_tasks(self.base(), key)
            return self._ordered[key]


def execute(config: ExperimentConfig, spec: RunSpec, stream: TaskStream) -> RunLog:
    """Run one planned cell and return its log (ceilings: one-row matrix)"""
    if spec.method in (INDIV, MTL):
        ceiling = run_ceiling_indiv if spec.method == INDIV else run_ceiling_mtl
        vector = ceiling(stream, spec.al, config.hyper, spec.seed, config.arch)
        return RunLog(accuracy_matrix=[vector], annotations=[t.initial_budget for t in stream.tasks])
    run_config = RunConfig(
        cl=replace(config.hyper, strategy=spec.cl),
        al_strategy=spec.al if spec.method == ACL else config.al[0],
        labelling_mode=spec.mode if spec.method == ACL else config.modes[0],
        scenario=config.scenario,
        seeds=(spec.seed,),
        arch=config.arch,
        milestones=config.milestones,
    )
    if spec.method == FULL:
        return run_supervised_cl(stream, run_config, spec.seed)
    return run_acl(stream, run_config, spec.seed)


def run_experiment(config: ExperimentConfig, jobs: int = 1, out_dir=None,
                   progress: bool = True) -> List[ResultRecord]:
    """
    Execute the full sweep, writing one run log per run, summary.csv and
    cells.csv under the output directory. A failing run is recorded and
    does not stop the others.

    Returns:
        ResultRecords sorted by fingerprint
    """
    out = Path(out_dir or config.output_dir)
    runs_dir = out / "runs"
    specs = plan_runs(config)
    factory = StreamFactory(config)
    logger.info("Running %d run(s) with %d job(s) into %s", len(specs), jobs, out)

    def one(spec: RunSpec) -> ResultRecord:
        descriptor = describe(config, spec)
        key = fingerprint(descriptor)
        try:
            log = execute(config, spec, factory.ordered(spec.task_order))
            log.config_echo = descriptor
            path = runs_dir / f"{key}.json"
            log = write_runlog(log, path)
            return ResultRecord(fingerprint=key, descriptor=descriptor, run_path=path.name,
                                summary=summarize(log), log=log)
        except Exception as e:
            logger.exception("run %s (%s %s/%s seed %d) failed", key, spec.method, spec.cl, spec.al, spec.seed)
            return ResultRecord(fingerprint=key, descriptor=descriptor, status="failed", error=repr(e))

    records = []
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        futures = [pool.submit(one, spec) for spec in specs]
        for future in tqdm(as_completed(futures), total=len(futures), desc="runs", disable=not progress):
            records.append(future.result())

    records.sort(key=lambda r: r.fingerprint)
    emit_summary(records, out / "summary.csv")
    emit_cells(records, out / "cells.csv")
    failed = sum(r.status != "ok" for r in records)
    if failed:
        logger.warning("%d of %d run(s) failed", failed, len(records))
    return records


def load_records(runs_dir) -> List[ResultRecord]:
    """Rebuild ResultRecords from run-log files (DIR or DIR/runs)"""
    runs_dir = Path(runs_dir)
    if (runs_dir / "runs").is_dir():
        runs_dir = runs_dir / "runs"
    records = []
    for path in sorted(runs_dir.glob("*.json")):
        log = read_runlog(path)
        descriptor = log.config_echo
        records.append(ResultRecord(fingerprint=fingerprint(descriptor), descriptor=descriptor,
                                    run_path=path.name, summary=summarize(log), log=log))
    if not records:
        logger.warning("no run logs found under %s", runs_dir)
    return sorted(records, key=lambda r: r.fingerprint)


# ---------------------------------------------------------------- exports


def _select(records: Iterable[ResultRecord], predicate: Callable[[Dict[str, Any]], bool]) -> List[ResultRecord]:
    return [r for r in records if r.status == "ok" and r.log is not None and predicate(r.descriptor)]


def _is_acl(d: Dict[str, Any]) -> bool:
    return d["method"] == ACL


def _pair_key(d: Dict[str, Any]) -> Tuple:
    return d["dataset"], d["scenario"], d["cl"], d["seed"], tuple(d["task_order"])


def _baseline_index(baseline_records: Sequence[ResultRecord]) -> Dict[Tuple, ResultRecord]:
    return {_pair_key(r.descriptor): r for r in _select(baseline_records, lambda d: d["method"] == FULL)}


def emit_profile(records: Sequence[ResultRecord], out_path) -> Path:
    """
    Forgetting-learning profile: one (lca, fr) row per ACL run, then one
    mean row per (method, mode)
    """
    acl = _select(records, _is_acl)
    if not acl:
        raise MetricError("no ACL runs with round curves; LCA is undefined for supervised runs")
    data_rows, groups = [], {}
    for record in acl:
        d = record.descriptor
        method = f"{d['cl']}+{d['al']}"
        lca_value = float(np.mean(current_task_lcas(record.log)))
        fr_value = forgetting_rate(record.log.accuracy_matrix)
        data_rows.append([method, d["mode"], d["al"], d["cl"], lca_value, fr_value, d["seed"], _order_tag(d)])
        groups.setdefault((method, d["mode"], d["al"], d["cl"]), []).append((lca_value, fr_value))
    data_rows.sort(key=lambda r: (r[0], r[1], r[6], r[7]))
    mean_rows = [[*key, float(np.mean([p[0] for p in points])), float(np.mean([p[1] for p in points])),
                  "mean", "mean"] for key, points in sorted(groups.items())]
    return write_csv(out_path, PROFILE_COLUMNS, data_rows + mean_rows)


def emit_relative(records: Sequence[ResultRecord], baseline_records: Sequence[ResultRecord], out_path) -> Path:
    """ACL minus full-data CL average accuracy (x100), paired by seed and order"""
    baselines = _baseline_index(baseline_records)
    cells: Dict[Tuple, Tuple[List[float], List[float]]] = {}
    for record in _select(records, _is_acl):
        d = record.descriptor
        base = baselines.get(_pair_key(d))
        if base is None:
            raise BaselineMissingError(
                f"no full-data baseline for cl={d['cl']} scenario={d['scenario']} "
                f"seed={d['seed']} order={_order_tag(d)}")
        acl_values, base_values = cells.setdefault((d["scenario"], d["cl"], d["al"], d["mode"]), ([], []))
        acl_values.append(100.0 * record.summary["avg_acc"])
        base_values.append(100.0 * base.summary["avg_acc"])
    rows = []
    for key in sorted(cells):
        acl_values, base_values = cells[key]
        delta, err = paired_delta(acl_values, base_values)
        rows.append([*key, len(acl_values), float(np.mean(acl_values)), float(np.mean(base_values)), delta, err])
    return write_csv(out_path, ["scenario", "cl", "al", "mode", "n", "acl_mean", "full_mean", "delta", "delta_err"],
                     rows)


def emit_nfr(records: Sequence[ResultRecord], baseline_records: Sequence[ResultRecord],
             budgets: Sequence[float], out_path) -> Path:
    """
    Normalized forgetting ratio per (al, cl, mode, budget): FR of the
    milestone matrix over FR of the matching full-data run. Rows whose
    milestone is missing or whose baseline FR is zero are flagged and carry
    no ratio.
    """
    baselines = _baseline_index(baseline_records)
    cells: Dict[Tuple, Dict[str, Any]] = {}
    for record in _select(records, _is_acl):
        d = record.descriptor
        base = baselines.get(_pair_key(d))
        if base is None:
            raise BaselineMissingError(f"no full-data baseline for cl={d['cl']} seed={d['seed']} "
                                       f"order={_order_tag(d)}")
        base_fr = forgetting_rate(base.log.accuracy_matrix)
        for budget in budgets:
            cell = cells.setdefault((d["al"], d["cl"], d["mode"], float(budget)),
                                    {"ratios": [], "missing": 0, "zero": 0})
            matrix = record.log.milestone_matrices.get(milestone_key(budget))
            if matrix is None:
                cell["missing"] += 1
            elif base_fr == 0:
                cell["zero"] += 1
            else:
                cell["ratios"].append(normalized_fr(forgetting_rate(matrix), base_fr))
    rows = []
    for key in sorted(cells):
        cell = cells[key]
        if cell["ratios"] and not (cell["missing"] or cell["zero"]):
            status = "ok"
        elif cell["missing"]:
            status = "missing_budget"
        else:
            status = "zero_baseline_fr"
        mean = float(np.mean(cell["ratios"])) if status == "ok" else None
        if status == "zero_baseline_fr":
            logger.warning("baseline FR is zero for %s; ratio not emitted", key)
        rows.append([*key, len(cell["ratios"]), mean, status])
    return write_csv(out_path, ["al", "cl", "mode", "budget", "n", "nfr_mean", "status"], rows)


def _mode_pairs(records: Sequence[ResultRecord]) -> List[Tuple[ResultRecord, ResultRecord]]:
    """(sequential, independent) runs sharing scenario, strategies, seed and order"""
    def key(d):
        return d["dataset"], d["scenario"], d["cl"], d["al"], d["seed"], tuple(d["task_order"])

    independent = {key(r.descriptor): r for r in _select(records, lambda d: _is_acl(d) and d["mode"] == "independent")}
    pairs = []
    for record in _select(records, lambda d: _is_acl(d) and d["mode"] == "sequential"):
        other = independent.get(key(record.descriptor))
        if other is not None:
            pairs.append((record, other))
    if not pairs:
        raise MetricError("no sequential/independent run pairs found")
    return pairs


def emit_mode_delta(records: Sequence[ResultRecord], out_path) -> Path:
    """Independent minus sequential average accuracy (x100) per (scenario, cl, al)"""
    cells: Dict[Tuple, Tuple[List[float], List[float]]] = {}
    for seq, ind in _mode_pairs(records):
        d = seq.descriptor
        ind_values, seq_values = cells.setdefault((d["scenario"], d["cl"], d["al"]), ([], []))
        ind_values.append(100.0 * ind.summary["avg_acc"])
        seq_values.append(100.0 * seq.summary["avg_acc"])
    rows = [[*key, len(cells[key][0]), *paired_delta(*cells[key])] for key in sorted(cells)]
    return write_csv(out_path, ["scenario", "cl", "al", "n", "delta", "delta_err"], rows)


def emit_lca_tasks(records: Sequence[ResultRecord], out_path) -> Path:
    """Mean LCA of the seen-tasks accuracy curve at each task index"""
    cells: Dict[Tuple, List[float]] = {}
    for record in _select(records, _is_acl):
        d = record.descriptor
        for task, curve in enumerate(record.log.round_curves):
            cells.setdefault((d["cl"], d["al"], d["mode"], task), []).append(lca_seen_tasks(curve))
    if not cells:
        raise MetricError("no ACL runs with round curves")
    rows = [[*key, len(values), float(np.mean(values))] for key, values in sorted(cells.items())]
    return write_csv(out_path, ["cl", "al", "mode", "task", "n", "lca_seen_mean"], rows)


def emit_jaccard(records: Sequence[ResultRecord], out_path) -> Path:
    """Per task, overlap of everything queried by sequential vs independent labelling"""
    rows, groups = [], {}
    for seq, ind in _mode_pairs(records):
        d = seq.descriptor
        for task, (a, b) in enumerate(zip(seq.log.query_history, ind.log.query_history)):
            value = jaccard({i for batch in a for i in batch}, {i for batch in b for i in batch})
            rows.append([d["cl"], d["al"], d["seed"], _order_tag(d), task, value])
            groups.setdefault((d["cl"], d["al"], task), []).append(value)
    rows.sort(key=lambda r: (r[0], r[1], r[4], r[2], r[3]))
    mean_rows = [[cl, al, "mean", "mean", task, float(np.mean(values))]
                 for (cl, al, task), values in sorted(groups.items())]
    return write_csv(out_path, ["cl", "al", "seed", "task_order", "task", "jaccard"], rows + mean_rows)
