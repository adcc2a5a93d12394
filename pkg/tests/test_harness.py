"""
Tests for sweeps, run-log persistence, exports and the command line
"""

import csv
import tempfile
import unittest
from pathlib import Path

import yaml

import main
from engine.config_loader import ConfigLoader
from engine.errors import BaselineMissingError, MetricError
from engine.harness import (
    ACL,
    FULL,
    cell_stats,
    dump_runlog,
    emit_jaccard,
    emit_lca_tasks,
    emit_mode_delta,
    emit_nfr,
    emit_profile,
    emit_relative,
    fingerprint,
    load_records,
    plan_runs,
    read_runlog,
    run_experiment,
    summarize,
    write_runlog,
)
from engine.models import ResultRecord, RunLog

SMALL = {
    "dataset": "synthetic",
    "scenario": "class_il",
    "num_tasks": 2,
    "classes_per_task": 2,
    "budget_fraction": 0.5,
    "query_fraction": 0.25,
    "val_fraction": 0.0,
    "synthetic": {"dim": 4, "samples_per_class": 8, "test_per_class": 5},
    "cl": ["ft"],
    "al": ["random"],
    "seeds": [0, 1],
    "task_orders": [[0, 1], [1, 0]],
    "milestones": [0.25, 0.5],
    "hyper": {"epochs": 1, "batch_size": 8, "lr": 0.05, "buffer_capacity": 8},
    "arch": {"hidden_dims": [8]},
}


def build(**changes):
    data = dict(SMALL)
    data.update(changes)
    return ConfigLoader().build(data)


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def record(method=ACL, cl="ft", al="random", mode="sequential", seed=0, matrix=None, curves=None,
           history=None, milestones=None):
    descriptor = {"method": method, "dataset": "synthetic", "scenario": "class_il", "cl": cl,
                  "al": al if method == ACL else "-", "mode": mode if method == ACL else FULL,
                  "seed": seed, "task_order": [0, 1]}
    log = RunLog(accuracy_matrix=matrix or [[0.9], [0.6, 0.8]],
                 round_curves=[] if method != ACL else (curves or [[[0.5, 0.5], [0.9, 0.9]],
                                                                    [[0.4, 0.6], [0.8, 0.7]]]),
                 query_history=history or [], milestone_matrices=milestones or {}, config_echo=descriptor)
    return ResultRecord(fingerprint=fingerprint(descriptor), descriptor=descriptor, summary=summarize(log), log=log)


class TestPlanning(unittest.TestCase):
    """Test the run plan of a sweep"""

    def test_cross_product(self):
        """Test runs cover orders, seeds, strategies, modes and extras"""
        config = build(modes=["sequential", "independent"], include_baseline=True, ceilings=["mtl"])
        specs = plan_runs(config)
        self.assertEqual(len(specs), 2 * 2 * (2 + 1 + 1))
        self.assertEqual(sum(s.method == FULL for s in specs), 4)


class TestRunExperiment(unittest.TestCase):
    """Test executing a sweep into a directory"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_one_file_per_run(self):
        """Test two seeds by two orders write four run logs"""
        records = run_experiment(build(), out_dir=self.out / "a", progress=False)
        self.assertEqual(len(list((self.out / "a" / "runs").glob("*.json"))), 4)
        self.assertTrue(all(r.status == "ok" for r in records))
        rows = read_rows(self.out / "a" / "summary.csv")
        self.assertEqual(len(rows), 4)
        self.assertEqual(rows[0]["status"], "ok")

    def test_rerun_is_byte_identical(self):
        """Test rerunning the same config reproduces summary.csv byte for byte"""
        config = build(modes=["sequential", "independent"], include_baseline=True, ceilings=["indiv"])
        run_experiment(config, out_dir=self.out / "a", progress=False)
        run_experiment(config, jobs=2, out_dir=self.out / "b", progress=False)
        self.assertEqual((self.out / "a" / "summary.csv").read_bytes(),
                         (self.out / "b" / "summary.csv").read_bytes())
        self.assertEqual((self.out / "a" / "cells.csv").read_bytes(),
                         (self.out / "b" / "cells.csv").read_bytes())

    def test_load_records_round_trip(self):
        """Test records rebuilt from disk match the sweep's records"""
        records = run_experiment(build(), out_dir=self.out / "a", progress=False)
        loaded = load_records(self.out / "a")
        self.assertEqual([r.fingerprint for r in loaded], [r.fingerprint for r in records])
        self.assertEqual([r.summary for r in loaded], [r.summary for r in records])

    def test_cell_means(self):
        """Test the cell table averages the per-run summaries"""
        records = run_experiment(build(), out_dir=self.out / "a", progress=False)
        cell = read_rows(self.out / "a" / "cells.csv")[0]
        expected = sum(r.summary["avg_acc"] for r in records) / len(records)
        self.assertEqual(int(cell["n"]), 4)
        self.assertAlmostEqual(float(cell["avg_acc_mean"]), expected, places=5)

    def test_failed_runs_recorded(self):
        """Test a failing run is recorded without stopping the sweep"""
        config = build(dataset="mnist_split", scenario="class_il", data_dir=str(self.out / "missing"),
                       task_orders=1, synthetic={})
        records = run_experiment(config, out_dir=self.out / "a", progress=False)
        self.assertTrue(records)
        self.assertTrue(all(r.status == "failed" for r in records))
        self.assertIn("FileNotFoundError", records[0].error)
        self.assertTrue((self.out / "a" / "summary.csv").exists())


class TestRunLogFiles(unittest.TestCase):
    """Test run-log serialisation"""

    def test_write_read_write_identical(self):
        """Test a written log re-serialises to the same bytes"""
        with tempfile.TemporaryDirectory() as tmp:
            log = RunLog(accuracy_matrix=[[1 / 3], [0.25, 2 / 3]], round_curves=[[[0.1, 0.1]], [[0.2, 0.3]]],
                         query_history=[[[1, 2]], [[0]]], milestone_matrices={"0.1": [[0.5], [0.5, 0.5]]},
                         annotations=[2, 1], config_echo={"seed": 0})
            path = Path(tmp) / "run.json"
            canonical = write_runlog(log, path)
            self.assertEqual(dump_runlog(read_runlog(path)), path.read_text())
            self.assertEqual(canonical.accuracy_matrix[0][0], 0.333333)

    def test_fingerprint_stable(self):
        """Test fingerprints ignore key order"""
        self.assertEqual(fingerprint({"a": 1, "b": [1, 2]}), fingerprint({"b": [1, 2], "a": 1}))
        self.assertNotEqual(fingerprint({"a": 1}), fingerprint({"a": 2}))


class TestCellStats(unittest.TestCase):
    """Test per-cell aggregation"""

    def test_sample_std(self):
        """Test the cell spread is the ddof=1 standard deviation over runs"""
        runs = [record(seed=0), record(seed=1, matrix=[[0.9], [0.4, 0.6]])]
        row = cell_stats(runs)[0]
        values = [r.summary["avg_acc"] for r in runs]
        self.assertEqual(row[5], 2)
        self.assertAlmostEqual(row[6], sum(values) / 2)
        self.assertAlmostEqual(row[7], abs(values[0] - values[1]) / 2 ** 0.5)

    def test_single_run_has_zero_spread(self):
        """Test a cell with one run reports std 0"""
        row = cell_stats([record()])[0]
        self.assertEqual(row[7], 0.0)


class TestExports(unittest.TestCase):
    """Test plot-ready exports over hand-built records"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_profile_rows(self):
        """Test one data row per ACL run plus a mean row per method and mode"""
        records = [record(seed=0), record(seed=1), record(method=FULL)]
        rows = read_rows(emit_profile(records, self.out / "profile.csv"))
        self.assertEqual(list(rows[0]), ["method", "mode", "al", "cl", "lca", "fr", "seed", "task_order"])
        self.assertEqual(len(rows), 3)
        self.assertEqual(rows[-1]["seed"], "mean")
        self.assertAlmostEqual(float(rows[0]["lca"]), 0.65)
        self.assertAlmostEqual(float(rows[0]["fr"]), 0.3)

    def test_profile_needs_acl_runs(self):
        """Test a profile of full-data runs only is undefined"""
        with self.assertRaises(MetricError):
            emit_profile([record(method=FULL)], self.out / "p.csv")

    def test_relative_identity(self):
        """Test an ACL run equal to its baseline gives a zero delta"""
        rows = read_rows(emit_relative([record()], [record(method=FULL)], self.out / "rel.csv"))
        self.assertEqual(float(rows[0]["delta"]), 0.0)
        self.assertAlmostEqual(float(rows[0]["acl_mean"]), 70.0)

    def test_relative_missing_baseline(self):
        """Test a missing baseline is reported"""
        with self.assertRaises(BaselineMissingError):
            emit_relative([record(seed=3)], [record(method=FULL)], self.out / "rel.csv")

    def test_nfr_identity_and_flags(self):
        """Test the ratio is 1 when forgetting matches and missing budgets are flagged"""
        acl = record(milestones={"0.02": [[0.9], [0.6, 0.8]]})
        rows = read_rows(emit_nfr([acl], [record(method=FULL)], [0.02, 0.04], self.out / "nfr.csv"))
        by_budget = {row["budget"]: row for row in rows}
        self.assertEqual(by_budget["0.02"]["status"], "ok")
        self.assertAlmostEqual(float(by_budget["0.02"]["nfr_mean"]), 1.0)
        self.assertEqual(by_budget["0.04"]["status"], "missing_budget")
        self.assertEqual(by_budget["0.04"]["nfr_mean"], "")

    def test_nfr_zero_baseline(self):
        """Test a baseline without forgetting is flagged instead of divided by"""
        acl = record(milestones={"0.02": [[0.9], [0.6, 0.8]]})
        flat = record(method=FULL, matrix=[[0.9], [0.9, 0.8]])
        rows = read_rows(emit_nfr([acl], [flat], [0.02], self.out / "nfr.csv"))
        self.assertEqual(rows[0]["status"], "zero_baseline_fr")

    def test_mode_delta_and_jaccard(self):
        """Test sequential/independent pairing for accuracy deltas and overlap"""
        seq = record(mode="sequential", history=[[[0, 1]], [[2]]])
        ind = record(mode="independent", matrix=[[0.9], [0.7, 0.9]], history=[[[1, 3]], [[2]]])
        delta = read_rows(emit_mode_delta([seq, ind], self.out / "modes.csv"))
        self.assertAlmostEqual(float(delta[0]["delta"]), 10.0)
        overlap = read_rows(emit_jaccard([seq, ind], self.out / "jac.csv"))
        values = {row["task"]: float(row["jaccard"]) for row in overlap if row["seed"] != "mean"}
        self.assertAlmostEqual(values["0"], 1 / 3, places=5)
        self.assertEqual(values["1"], 1.0)

    def test_mode_delta_needs_pairs(self):
        """Test deltas without independent runs are undefined"""
        with self.assertRaises(MetricError):
            emit_mode_delta([record()], self.out / "modes.csv")

    def test_lca_tasks(self):
        """Test the seen-task LCA per task index"""
        rows = read_rows(emit_lca_tasks([record()], self.out / "lca.csv"))
        self.assertEqual([row["task"] for row in rows], ["0", "1"])
        self.assertAlmostEqual(float(rows[1]["lca_seen_mean"]), 0.65)


class TestCommandLine(unittest.TestCase):
    """Test the command-line front door"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write_config(self, data):
        path = self.dir / "exp.yaml"
        path.write_text(yaml.safe_dump(data))
        return str(path)

    def test_run_then_metrics(self):
        """Test a sweep followed by recomputing its summary"""
        data = dict(SMALL, seeds=[0], task_orders=[[0, 1]])
        out = self.dir / "out"
        self.assertEqual(main.main(["run", "--config", self.write_config(data), "--out", str(out), "--quiet"]),
                         main.EXIT_OK)
        self.assertEqual(main.main(["metrics", "--runs", str(out), "--out", str(self.dir / "again.csv")]),
                         main.EXIT_OK)
        self.assertEqual((out / "summary.csv").read_bytes(), (self.dir / "again.csv").read_bytes())

    def test_config_error_exit_code(self):
        """Test an invalid config exits with the config error code"""
        path = self.write_config(dict(SMALL, budget_fraction=0))
        self.assertEqual(main.main(["run", "--config", path, "--out", str(self.dir / "o")]), main.EXIT_CONFIG)

    def test_failed_run_exit_code(self):
        """Test failed runs exit with the run failure code"""
        data = dict(SMALL, dataset="mnist_split", data_dir=str(self.dir / "missing"), task_orders=1, synthetic={})
        path = self.write_config(data)
        self.assertEqual(main.main(["run", "--config", path, "--out", str(self.dir / "o"), "--quiet"]),
                         main.EXIT_RUN_FAILED)


if __name__ == '__main__':
    unittest.main()
