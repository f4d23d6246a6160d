import csv
import json
import statistics

import numpy as np
import pytest

from critfl.cli import main
from critfl.errors import ConfigError
from critfl.harness import (METRIC_COLUMNS, config_from_dict, emit_metrics, fmt, load_config,
                            rounds_to_target, run_dir_name, run_experiment, sweep_recover_rounds)

BASE = {
    "federation": {"arch": [4, 8, 3], "n_clients": 4, "clients_per_round": 2, "local_steps": 2,
                   "batch_size": 8, "lr0": 0.1, "lr_decay": 0.98, "weight_decay": 5e-4,
                   "rounds": 5, "master_seed": 1},
    "data": {"classes": 3, "dim": 4, "n": 120, "n_test": 60, "spread": 0.5, "seed": 0},
    "schedule": {"ratio": 0.3, "recover_round": 2},
}


def cfg(**overrides):
    raw = json.loads(json.dumps(BASE))
    for section, values in overrides.items():
        raw.setdefault(section, {}).update(values)
    return config_from_dict(raw)


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            cfg(federation={"bogus": 1})

    def test_unknown_section(self):
        raw = dict(BASE, extra={})
        with pytest.raises(ConfigError, match="extra"):
            config_from_dict(raw)

    def test_missing_federation(self):
        with pytest.raises(ConfigError):
            config_from_dict({"data": {}})

    def test_invalid_values_fail_before_compute(self):
        with pytest.raises(ConfigError):
            cfg(federation={"clients_per_round": 9})
        with pytest.raises(ConfigError):
            cfg(schedule={"ratio": 0})
        with pytest.raises(ConfigError):
            cfg(partition={"kind": "dirichlet"})

    def test_arch_mismatch(self):
        with pytest.raises(ConfigError):
            run_experiment(cfg(federation={"arch": [5, 8, 3]}))

    def test_round_trip(self, tmp_path):
        c = cfg()
        p = tmp_path / "c.json"
        p.write_text(json.dumps(c.to_dict()))
        assert load_config(p) == c


class TestRun:
    def test_rows(self):
        rec = run_experiment(cfg())
        assert len(rec.metrics) == 5
        assert rec.final_accuracy == rec.metrics[-1].test_accuracy
        assert rec.best_accuracy == max(m.test_accuracy for m in rec.metrics)

    def test_rounds_to_target(self):
        accs = [0.1, 0.5, 0.4, 0.8, 0.7]
        assert rounds_to_target(accs, 0.45) == 1
        assert rounds_to_target(accs, 0.75) == 3
        assert rounds_to_target(accs, 0.9) is None
        targets = np.linspace(0, 0.8, 50)
        rounds = [rounds_to_target(accs, x) for x in targets]
        assert rounds == sorted(rounds)

    def test_default_target_is_fraction_of_final(self):
        rec = run_experiment(cfg())
        assert rec.target == pytest.approx(0.99 * rec.final_accuracy)
        assert rec.rounds_to_target is not None

    def test_explicit_target(self):
        rec = run_experiment(cfg(run={"target_accuracy": 1.0}))
        assert rec.target == 1.0


class TestEmit:
    def test_schema_and_rows(self, tmp_path):
        rec = run_experiment(cfg(federation={"rounds": 3}))
        emit_metrics(rec, tmp_path)
        with open(tmp_path / "metrics.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == METRIC_COLUMNS
        assert len(rows) == 4
        assert [float(r[3]) for r in rows[1:]] == [m.test_accuracy for m in rec.metrics]
        meta = json.loads((tmp_path / "run.json").read_text())
        assert {"config", "seed", "final_accuracy", "rounds_to_target", "version",
                "best_accuracy", "advisory_critical_end"} <= set(meta)
        assert meta["seed"] == 1

    def test_re_emit_identical(self, tmp_path):
        rec = run_experiment(cfg())
        emit_metrics(rec, tmp_path / "a")
        emit_metrics(rec, tmp_path / "b")
        for name in ("metrics.csv", "run.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_rerun_identical(self, tmp_path):
        emit_metrics(run_experiment(cfg()), tmp_path / "a")
        emit_metrics(run_experiment(cfg()), tmp_path / "b")
        assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()

    def test_seventeen_digits_round_trip(self):
        for x in (0.1, 1 / 3, 2.0 ** -40, 123456.789):
            assert float(fmt(x)) == x

    def test_partial_after_schedule(self):
        rec = run_experiment(cfg(schedule={"ratio": 1.0, "recover_round": 2, "after_ratio": 0.25}))
        assert [m.active_ratio for m in rec.metrics] == [1.0, 1.0, 0.25, 0.25, 0.25]

    def test_shipped_configs_load(self):
        from pathlib import Path
        paths = sorted((Path(__file__).parents[1] / "configs").glob("*.json"))
        assert paths
        for path in paths:
            load_config(path)

    def test_no_temp_files_left(self, tmp_path):
        emit_metrics(run_experiment(cfg()), tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["metrics.csv", "run.json"]


class TestSweep:
    def test_single_m(self):
        s = sweep_recover_rounds(cfg(), [0], [1, 2, 3])
        assert len(s.rows) == 1 and s.rows[0].n_seeds == 3

    def test_duplicates_rejected(self):
        with pytest.raises(ConfigError):
            sweep_recover_rounds(cfg(), [0, 0], [1])
        with pytest.raises(ConfigError):
            sweep_recover_rounds(cfg(), [], [1])

    def test_sorted_with_never_last(self):
        s = sweep_recover_rounds(cfg(federation={"rounds": 2}), [None, 3, 0], [1])
        assert [r.recover_round for r in s.rows] == [0, 3, None]

    def test_rows_recomputable_from_files(self, tmp_path):
        seeds = [1, 2, 3]
        s = sweep_recover_rounds(cfg(), [0, 3], seeds)
        emit_metrics(s, tmp_path)
        for row in s.rows:
            finals = []
            for seed in seeds:
                meta = json.loads((tmp_path / run_dir_name(row.recover_round, seed) / "run.json").read_text())
                finals.append(meta["final_accuracy"])
            assert abs(statistics.fmean(finals) - row.mean_final_accuracy) <= 1e-12
            assert abs(statistics.stdev(finals) - row.std_final_accuracy) <= 1e-12
        with open(tmp_path / "summary.csv", newline="") as fh:
            assert len(list(csv.reader(fh))) == 3

    def test_processes_match_sequential(self):
        a = sweep_recover_rounds(cfg(federation={"rounds": 3}), [0, 2], [1, 2])
        b = sweep_recover_rounds(cfg(federation={"rounds": 3}), [0, 2], [1, 2], jobs=2)
        assert a.rows == b.rows


class TestCli:
    def _write_cfg(self, tmp_path, raw=None):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(raw or BASE))
        return p

    def test_run(self, tmp_path, capsys):
        assert main(["run", "--config", str(self._write_cfg(tmp_path)), "--out", str(tmp_path / "o")]) == 0
        assert (tmp_path / "o" / "metrics.csv").exists()
        assert "final_accuracy" in capsys.readouterr().out

    def test_sweep(self, tmp_path):
        code = main(["sweep", "--config", str(self._write_cfg(tmp_path)), "--recover-rounds", "0,2",
                     "--seeds", "1,2", "--out", str(tmp_path / "s")])
        assert code == 0
        assert (tmp_path / "s" / "summary.csv").exists()
        assert (tmp_path / "s" / "M2_seed1" / "metrics.csv").exists()

    def test_gen_data_then_csv_run(self, tmp_path):
        tr, te = tmp_path / "train.csv", tmp_path / "test.csv"
        assert main(["gen-data", "--classes", "3", "--dim", "4", "--n", "90", "--spread", "0.5",
                     "--seed", "2", "--out", str(tr), "--n-test", "30", "--test-out", str(te)]) == 0
        raw = json.loads(json.dumps(BASE))
        raw["data"] = {"source": "csv", "train": str(tr), "test": str(te)}
        assert main(["run", "--config", str(self._write_cfg(tmp_path, raw)),
                     "--out", str(tmp_path / "o")]) == 0

    def test_config_error_exit(self, tmp_path, capsys):
        raw = json.loads(json.dumps(BASE))
        raw["federation"]["nope"] = 1
        assert main(["run", "--config", str(self._write_cfg(tmp_path, raw)),
                     "--out", str(tmp_path / "o")]) == 2
        assert "nope" in capsys.readouterr().err

    def test_data_error_exit(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("0,1.0\n1\n")
        raw = json.loads(json.dumps(BASE))
        raw["data"] = {"source": "csv", "train": str(bad), "test": str(bad)}
        assert main(["run", "--config", str(self._write_cfg(tmp_path, raw)),
                     "--out", str(tmp_path / "o")]) == 3

    def test_io_error_exit(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["run", "--config", str(self._write_cfg(tmp_path)),
                     "--out", str(blocker / "sub")]) == 4
        assert main(["run", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 4
