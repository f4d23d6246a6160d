"""FedAvg: client selection, local SGD, size-weighted aggregation."""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._util import TAG_FIM, TAG_LOCAL, TAG_SELECT, convex_combination, stream
from .data import ActiveView, ClientPartition, Dataset, subset_ratio
from .errors import ConfigError, InputError
from .fisher import FimEstimate, FimOptions, cum_trace, fedfim_trace, local_fim_trace
from .nn import ModelParams, evaluate, init_model, loss_and_grad, sgd_step, validate_arch
from .schedules import (DataSchedule, ParticipationSchedule, active_ratio,
                        participation_pool)


@dataclass(frozen=True)
class FedConfig:
    arch: tuple[int, ...]
    n_clients: int = 16
    clients_per_round: int = 4
    local_steps: int = 5
    batch_size: int = 16
    lr0: float = 0.05
    lr_decay: float = 1.0
    weight_decay: float = 0.0
    rounds: int = 100
    master_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "arch", validate_arch(self.arch))
        checks = [
            (self.n_clients >= 1, f"n_clients must be >= 1, got {self.n_clients}"),
            (1 <= self.clients_per_round <= self.n_clients,
             f"clients_per_round must lie in [1, {self.n_clients}], got {self.clients_per_round}"),
            (self.local_steps >= 1, f"local_steps must be >= 1, got {self.local_steps}"),
            (self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}"),
            (self.lr0 > 0, f"lr0 must be positive, got {self.lr0}"),
            (0 < self.lr_decay <= 1, f"lr_decay must lie in (0, 1], got {self.lr_decay}"),
            (self.weight_decay >= 0, f"weight_decay must be >= 0, got {self.weight_decay}"),
            (self.rounds >= 1, f"rounds must be >= 1, got {self.rounds}"),
            (self.master_seed >= 0, f"master_seed must be >= 0, got {self.master_seed}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)


@dataclass
class RoundMetrics:
    round: int
    lr: float
    selected: list[int]
    train_loss: float
    test_accuracy: float
    fedfim_trace: float
    cum_trace: float
    active_ratio: float
    pool_size: int
    wall_ms: float = 0.0
    test_loss: float = float("nan")


def select_clients(pool, m: int, rng: np.random.Generator) -> list[int]:
    """Uniform sample of ``m`` distinct ids from ``pool`` (an int N or a sequence), sorted."""
    ids = np.arange(pool) if isinstance(pool, (int, np.integer)) else np.asarray(pool, dtype=np.int64)
    if not 1 <= m <= len(ids):
        raise ConfigError(f"cannot select {m} clients from a pool of {len(ids)}")
    return sorted(ids[rng.choice(len(ids), size=m, replace=False)].tolist())


def lr_at_round(lr0: float, decay: float, t: int) -> float:
    return lr0 * decay ** t


def local_train(model: ModelParams, dataset: Dataset, indices, steps: int, lr: float,
                batch_size: int, weight_decay: float, rng: np.random.Generator
                ) -> tuple[ModelParams, float]:
    """Run ``steps`` mini-batch SGD steps on ``dataset[indices]``.

    Batches walk a shuffled copy of ``indices`` and reshuffle when it is
    exhausted; the last batch of a pass may be short.  Each batch is sorted
    before the gradient so the result does not depend on in-batch order.
    Returns the new model and the mean mini-batch loss.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise InputError("local training needs a nonempty active set")
    if steps < 1 or batch_size < 1:
        raise ConfigError("steps and batch_size must be >= 1")
    order, pos = rng.permutation(indices), 0
    losses = []
    for _ in range(steps):
        if pos >= len(order):
            order, pos = rng.permutation(indices), 0
        batch = np.sort(order[pos:pos + batch_size])
        pos += batch_size
        value, g = loss_and_grad(model, dataset.X[batch], dataset.y[batch])
        losses.append(value)
        model = sgd_step(model, g, lr, weight_decay)
    return model, float(np.mean(losses))


def aggregate(models: Sequence[ModelParams], sizes: Sequence[int],
              client_ids: Optional[Sequence[int]] = None) -> ModelParams:
    """Size-weighted average of client models.

    With ``client_ids`` the reduction runs in ascending id order regardless of
    the order results arrived in.
    """
    if not models:
        raise InputError("nothing to aggregate")
    if len(models) != len(sizes) or (client_ids is not None and len(client_ids) != len(models)):
        raise InputError("models, sizes and client ids must have equal length")
    arch = models[0].arch
    if any(m.arch != arch for m in models):
        raise InputError("cannot aggregate models with different architectures")
    if any(s < 1 for s in sizes):
        raise InputError("aggregation sizes must be >= 1")
    order = range(len(models)) if client_ids is None else np.argsort(client_ids, kind="stable")
    values = [models[i].values for i in order]
    weights = [float(sizes[i]) for i in order]
    return ModelParams(convex_combination(values, weights), arch)


class FederatedRun:
    """Mutable state of one FedAvg run; call :meth:`run_round` for t = 0, 1, ..."""

    def __init__(self, config: FedConfig, train: Dataset, test: Dataset,
                 partitions: Sequence[ClientPartition],
                 data_schedule: DataSchedule = DataSchedule(),
                 participation: ParticipationSchedule = ParticipationSchedule(),
                 fim: Optional[FimOptions] = FimOptions(),
                 weight_by: str = "active", workers: int = 1,
                 record_wall_time: bool = False):
        if len(partitions) != config.n_clients:
            raise ConfigError(f"{len(partitions)} partitions for {config.n_clients} clients")
        if config.arch[0] != train.dim or config.arch[-1] != train.num_classes:
            raise ConfigError(
                f"arch {list(config.arch)} does not fit data with dim {train.dim} "
                f"and {train.num_classes} classes"
            )
        if test.dim != train.dim or test.num_classes > train.num_classes:
            raise ConfigError("test set does not match the training set's dimension and classes")
        if weight_by not in ("active", "full"):
            raise ConfigError(f"weight_by must be 'active' or 'full', got {weight_by!r}")
        if workers < 1:
            raise ConfigError(f"workers must be >= 1, got {workers}")
        pool = participation.min_pool_size(config.n_clients)
        if pool < config.clients_per_round:
            raise ConfigError(f"participation pool of {pool} clients is smaller than "
                              f"clients_per_round={config.clients_per_round}")
        self.config = config
        self.train, self.test = train, test
        self.partitions = {p.client_id: p for p in partitions}
        if sorted(self.partitions) != list(range(config.n_clients)):
            raise ConfigError("partition client ids must be 0..N-1")
        self.data_schedule = data_schedule
        self.participation = participation
        self.fim = fim
        self.weight_by = weight_by
        self.workers = workers
        self.record_wall_time = record_wall_time
        self.model = init_model(config.arch, config.master_seed)
        self.history: list[RoundMetrics] = []
        self.fim_estimates: list[FimEstimate] = []
        self._trace_history: list[tuple[float, float]] = []

    def _views(self, ids, ratio) -> list[ActiveView]:
        return [subset_ratio(self.partitions[j], ratio) for j in ids]

    def _map(self, fn, items):
        if self.workers == 1 or len(items) < 2:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.workers) as ex:
            return list(ex.map(fn, items))

    def measure_fim(self, model: ModelParams, t: int, ratio: float, selected) -> FimEstimate:
        opts = self.fim
        ids = sorted(self.partitions) if opts.clients == "all" else list(selected)
        views = self._views(ids, ratio if opts.data == "active" else 1.0)
        seed = self.config.master_seed

        def one(view: ActiveView) -> float:
            rng = stream(seed, TAG_FIM, t, view.client_id)
            return local_fim_trace(model, self.train.X[view.indices], opts.mode, opts.n_mc, rng)

        traces = dict(zip(ids, self._map(one, views)))
        sizes = {v.client_id: len(v) for v in views}
        used = sum(sizes.values()) if opts.mode == "exact" else opts.n_mc * len(views)
        return FimEstimate(t, traces, fedfim_trace(traces, sizes), opts.mode, used, sizes)

    def run_round(self, t: int) -> RoundMetrics:
        cfg = self.config
        if t != len(self.history):
            raise ConfigError(f"rounds must run in order; expected {len(self.history)}, got {t}")
        if t >= cfg.rounds:
            raise ConfigError(f"round {t} is past the configured {cfg.rounds} rounds")
        start = time.perf_counter()
        seed = cfg.master_seed
        lr = lr_at_round(cfg.lr0, cfg.lr_decay, t)
        ratio = active_ratio(self.data_schedule, t)
        pool = participation_pool(self.participation, t, cfg.n_clients, seed, cfg.clients_per_round)
        selected = select_clients(pool, cfg.clients_per_round, stream(seed, TAG_SELECT, t))
        views = self._views(selected, ratio)
        sent = self.model

        def train_one(view: ActiveView):
            rng = stream(seed, TAG_LOCAL, t, view.client_id)
            return local_train(sent, self.train, view.indices, cfg.local_steps, lr,
                               cfg.batch_size, cfg.weight_decay, rng)

        results = self._map(train_one, views)
        if self.weight_by == "active":
            sizes = [len(v) for v in views]
        else:
            sizes = [len(v.partition) for v in views]
        self.model = aggregate([m for m, _ in results], sizes, selected)
        train_loss = float(convex_combination([l for _, l in results], [float(s) for s in sizes]))
        acc, test_loss = evaluate(self.model, self.test.X, self.test.y)

        trace = float("nan")
        if self.fim is not None and t % self.fim.every == 0:
            est = self.measure_fim(self.model if self.fim.when == "post" else sent, t, ratio, selected)
            self.fim_estimates.append(est)
            trace = est.fedfim_trace
            self._trace_history.append((lr, trace))
        wall = (time.perf_counter() - start) * 1e3 if self.record_wall_time else 0.0
        row = RoundMetrics(t, lr, selected, train_loss, acc, trace, cum_trace(self._trace_history),
                           ratio, len(pool), wall, test_loss)
        self.history.append(row)
        return row

    def run(self) -> list[RoundMetrics]:
        for t in range(len(self.history), self.config.rounds):
            self.run_round(t)
        return self.history
