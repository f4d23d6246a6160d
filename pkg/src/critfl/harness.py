"""Experiment configuration, single runs, recover-round sweeps and metric files."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import statistics
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

from . import __version__
from .data import (Dataset, generate_synthetic_split, load_dataset, partition_iid,
                   partition_noniid_shards)
from .errors import ConfigError
from .federation import FedConfig, FederatedRun, RoundMetrics
from .fisher import FimOptions
from .schedules import DataSchedule, ParticipationSchedule, detect_critical_end

METRIC_COLUMNS = ("round", "lr", "train_loss", "test_accuracy", "fedfim_trace", "cum_trace",
                  "active_ratio", "pool_size", "n_selected", "wall_ms")
SUMMARY_COLUMNS = ("recover_round", "n_seeds", "mean_final_accuracy", "std_final_accuracy",
                   "mean_rounds_to_target", "mean_cum_trace", "std_cum_trace")


@dataclass(frozen=True)
class DataSpec:
    source: str = "synthetic"
    classes: int = 4
    dim: int = 16
    n: int = 4096
    n_test: int = 4096
    spread: float = 0.6
    seed: int = 0
    mean_scale: Optional[float] = None
    train: Optional[str] = None
    test: Optional[str] = None

    def __post_init__(self):
        if self.source not in ("synthetic", "csv"):
            raise ConfigError(f"data.source must be 'synthetic' or 'csv', got {self.source!r}")
        if self.source == "csv" and not (self.train and self.test):
            raise ConfigError("csv data needs both 'train' and 'test' paths")
        if self.source == "synthetic" and self.n_test < 1:
            raise ConfigError("synthetic data needs n_test >= 1")

    def load(self) -> tuple[Dataset, Dataset]:
        if self.source == "synthetic":
            return generate_synthetic_split(self.classes, self.dim, self.n, self.n_test,
                                            self.spread, self.seed, self.mean_scale)
        train = load_dataset(self.train)
        return train, load_dataset(self.test, num_classes=train.num_classes)


@dataclass(frozen=True)
class PartitionSpec:
    kind: str = "iid"
    shards_per_client: int = 2

    def __post_init__(self):
        if self.kind not in ("iid", "shards"):
            raise ConfigError(f"partition.kind must be 'iid' or 'shards', got {self.kind!r}")

    def build(self, dataset: Dataset, n_clients: int, seed: int):
        if self.kind == "iid":
            return partition_iid(dataset, n_clients, seed)
        return partition_noniid_shards(dataset, n_clients, self.shards_per_client, seed)


@dataclass(frozen=True)
class RunOptions:
    target_accuracy: Optional[float] = None
    target_fraction: float = 0.99
    weight_by: str = "active"
    workers: int = 1
    record_wall_time: bool = False
    # advisory detector threshold; reported in run.json only
    critical_growth_fraction: float = 0.1

    def __post_init__(self):
        if self.target_accuracy is not None and not 0 <= self.target_accuracy <= 1:
            raise ConfigError(f"target_accuracy must lie in [0, 1], got {self.target_accuracy}")
        if not 0 < self.target_fraction <= 1:
            raise ConfigError(f"target_fraction must lie in (0, 1], got {self.target_fraction}")


@dataclass(frozen=True)
class ExperimentConfig:
    federation: FedConfig
    data: DataSpec = DataSpec()
    partition: PartitionSpec = PartitionSpec()
    schedule: DataSchedule = DataSchedule()
    participation: ParticipationSchedule = ParticipationSchedule()
    fisher: Optional[FimOptions] = FimOptions()
    run: RunOptions = RunOptions()

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.replace(federation=dataclasses.replace(self.federation, master_seed=seed))

    def with_recover_round(self, m: Optional[int]) -> "ExperimentConfig":
        return self.replace(schedule=dataclasses.replace(self.schedule, recover_round=m))

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["federation"]["arch"] = list(self.federation.arch)
        return out


_SECTIONS = {
    "federation": FedConfig,
    "data": DataSpec,
    "partition": PartitionSpec,
    "schedule": DataSchedule,
    "participation": ParticipationSchedule,
    "fisher": FimOptions,
    "run": RunOptions,
}


def _build(cls, section: str, raw: Any):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"section {section!r}: {exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    if "federation" not in raw:
        raise ConfigError("config needs a 'federation' section")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name not in raw:
            continue
        if name == "fisher" and raw[name] is None:
            kwargs[name] = None
        else:
            kwargs[name] = _build(cls, name, raw[name])
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(raw)


@dataclass
class RunRecord:
    config: ExperimentConfig
    metrics: list[RoundMetrics]
    final_accuracy: float
    best_accuracy: float
    rounds_to_target: Optional[int]
    target: float

    @property
    def final_cum_trace(self) -> float:
        return self.metrics[-1].cum_trace


def rounds_to_target(accuracies: Sequence[float], target: float) -> Optional[int]:
    """First round index whose accuracy reaches ``target``, or None."""
    for t, acc in enumerate(accuracies):
        if acc >= target:
            return t
    return None


def run_experiment(config: ExperimentConfig) -> RunRecord:
    fed = config.federation
    train, test = config.data.load()
    partitions = config.partition.build(train, fed.n_clients, fed.master_seed)
    sim = FederatedRun(fed, train, test, partitions, config.schedule, config.participation,
                       config.fisher, weight_by=config.run.weight_by,
                       workers=config.run.workers, record_wall_time=config.run.record_wall_time)
    metrics = sim.run()
    accs = [m.test_accuracy for m in metrics]
    final = accs[-1]
    target = config.run.target_accuracy
    if target is None:
        target = config.run.target_fraction * final
    return RunRecord(config, metrics, final, max(accs), rounds_to_target(accs, target), target)


@dataclass
class SweepRow:
    recover_round: Optional[int]
    n_seeds: int
    mean_final_accuracy: float
    std_final_accuracy: float
    mean_rounds_to_target: Optional[float]
    mean_cum_trace: float
    std_cum_trace: float


@dataclass
class SweepSummary:
    rows: list[SweepRow]
    seeds: list[int]
    runs: dict[tuple[Optional[int], int], RunRecord] = field(default_factory=dict)


def _sort_key(m):
    return (m is None, m if m is not None else 0)


def _std(values):
    return statistics.stdev(values) if len(values) > 1 else 0.0


def summarize(records: Sequence[RunRecord], recover_round) -> SweepRow:
    accs = [r.final_accuracy for r in records]
    cums = [r.final_cum_trace for r in records]
    reached = [r.rounds_to_target for r in records if r.rounds_to_target is not None]
    return SweepRow(recover_round, len(records), statistics.fmean(accs), _std(accs),
                    statistics.fmean(reached) if reached else None,
                    statistics.fmean(cums), _std(cums))


def sweep_recover_rounds(config: ExperimentConfig, recover_rounds: Sequence[Optional[int]],
                         seeds: Sequence[int], jobs: int = 1) -> SweepSummary:
    """Run every (recover round, seed) pair; one summary row per recover round, ascending."""
    if not recover_rounds or not seeds:
        raise ConfigError("sweep needs at least one recover round and one seed")
    if len(set(recover_rounds)) != len(recover_rounds):
        raise ConfigError(f"duplicate recover rounds in {list(recover_rounds)}")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"duplicate seeds in {list(seeds)}")
    ms = sorted(recover_rounds, key=_sort_key)
    points = [(m, s) for m in ms for s in seeds]
    configs = [config.with_recover_round(m).with_seed(s) for m, s in points]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            records = list(ex.map(run_experiment, configs))
    else:
        records = [run_experiment(c) for c in configs]
    runs = dict(zip(points, records))
    rows = [summarize([runs[(m, s)] for s in seeds], m) for m in ms]
    return SweepSummary(rows, list(seeds), runs)


# ---------------------------------------------------------------- output files

def fmt(value) -> str:
    """17 significant digits, enough to round-trip any double."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, int):
        return str(value)
    return format(float(value), ".17g")


def _jsonable(value):
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _atomic_write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def metrics_csv(metrics: Sequence[RoundMetrics]) -> str:
    rows = [[fmt(m.round), fmt(m.lr), fmt(m.train_loss), fmt(m.test_accuracy),
             fmt(m.fedfim_trace), fmt(m.cum_trace), fmt(m.active_ratio), fmt(m.pool_size),
             fmt(len(m.selected)), fmt(m.wall_ms)] for m in metrics]
    return _csv_text(METRIC_COLUMNS, rows)


def _json_text(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def run_summary(record: RunRecord) -> dict:
    return {
        "config": record.config.to_dict(),
        "seed": record.config.federation.master_seed,
        "final_accuracy": record.final_accuracy,
        "best_accuracy": record.best_accuracy,
        "rounds_to_target": record.rounds_to_target,
        "target_accuracy": record.target,
        "final_cum_trace": record.final_cum_trace,
        "advisory_critical_end": detect_critical_end(
            [m.cum_trace for m in record.metrics], record.config.run.critical_growth_fraction),
        "version": __version__,
    }


def _emit_run(record: RunRecord, out_dir: Path) -> list[Path]:
    return [_atomic_write(out_dir / "metrics.csv", metrics_csv(record.metrics)),
            _atomic_write(out_dir / "run.json", _json_text(run_summary(record)))]


def run_dir_name(m, seed) -> str:
    return f"M{'never' if m is None else m}_seed{seed}"


def _emit_sweep(summary: SweepSummary, out_dir: Path) -> list[Path]:
    paths = []
    for (m, s), record in summary.runs.items():
        paths += _emit_run(record, out_dir / run_dir_name(m, s))
    rows = [[fmt(r.recover_round) if r.recover_round is not None else "never", fmt(r.n_seeds),
             fmt(r.mean_final_accuracy), fmt(r.std_final_accuracy), fmt(r.mean_rounds_to_target),
             fmt(r.mean_cum_trace), fmt(r.std_cum_trace)] for r in summary.rows]
    paths.append(_atomic_write(out_dir / "summary.csv", _csv_text(SUMMARY_COLUMNS, rows)))
    any_run = next(iter(summary.runs.values()), None)
    meta = {
        "seeds": summary.seeds,
        "recover_rounds": [r.recover_round for r in summary.rows],
        "rows": [dataclasses.asdict(r) for r in summary.rows],
        "config": any_run.config.to_dict() if any_run else None,
        "version": __version__,
    }
    paths.append(_atomic_write(out_dir / "sweep.json", _json_text(meta)))
    return paths


def emit_metrics(record: RunRecord | SweepSummary, out_dir) -> list[Path]:
    """Write ``metrics.csv`` + ``run.json`` (a run) or per-run folders plus
    ``summary.csv`` + ``sweep.json`` (a sweep). Returns the written paths."""
    out_dir = Path(out_dir)
    if isinstance(record, SweepSummary):
        return _emit_sweep(record, out_dir)
    return _emit_run(record, out_dir)
