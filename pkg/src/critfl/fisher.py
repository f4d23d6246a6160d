"""Trace of the per-client Fisher information, its federated average, and the
learning-rate weighted cumulative trace.

Only traces are computed. ``Tr F = E ||g||^2`` so each estimate needs
per-example squared gradient norms, never the full parameter-by-parameter
matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._util import convex_combination
from .errors import ConfigError, InputError
from .nn import ModelParams, expected_sq_grad_norms, per_example_sq_grad_norms, sample_labels

MODES = ("exact", "sampled")


@dataclass(frozen=True)
class FimOptions:
    """How and when the federated trace is measured during a run.

    mode: ``exact`` sums over all classes, ``sampled`` draws ``n_mc`` labels.
    every: measure on rounds where ``t % every == 0``.
    clients: ``all`` clients or only the round's ``selected`` ones.
    data: each client's ``active`` view or its ``full`` partition.
    when: ``post`` (aggregated model of round t) or ``pre`` (model sent out at round t).
    """
    mode: str = "exact"
    n_mc: int = 256
    every: int = 1
    clients: str = "all"
    data: str = "active"
    when: str = "post"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"fisher mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "sampled" and self.n_mc < 1:
            raise ConfigError(f"n_mc must be >= 1 in sampled mode, got {self.n_mc}")
        if self.every < 1:
            raise ConfigError(f"fisher 'every' must be >= 1, got {self.every}")
        for name, value, allowed in (("clients", self.clients, ("all", "selected")),
                                     ("data", self.data, ("active", "full")),
                                     ("when", self.when, ("post", "pre"))):
            if value not in allowed:
                raise ConfigError(f"fisher {name} must be one of {allowed}, got {value!r}")


@dataclass
class FimEstimate:
    round: int
    local_traces: dict[int, float]
    fedfim_trace: float
    mode: str
    samples_used: int
    sizes: dict[int, int] = field(default_factory=dict)


def local_fim_trace(model: ModelParams, X, mode: str = "exact", n_mc: int = 0,
                    rng: np.random.Generator | None = None) -> float:
    """Trace of one client's Fisher information at ``model`` over the rows of ``X``.

    ``X`` holds the client's active features; labels are never used since
    they are drawn from the model itself.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise InputError("local Fisher trace needs a nonempty active set")
    if mode == "exact":
        return float(np.mean(expected_sq_grad_norms(model, X)))
    if mode == "sampled":
        if n_mc < 1:
            raise ConfigError(f"n_mc must be >= 1 in sampled mode, got {n_mc}")
        if rng is None:
            raise InputError("sampled mode needs a random generator")
        rows = X[rng.integers(0, len(X), size=n_mc)]
        labels = sample_labels(model, rows, rng)
        return float(np.mean(per_example_sq_grad_norms(model, rows, labels)))
    raise ConfigError(f"fisher mode must be one of {MODES}, got {mode!r}")


def _check_keys(a: Mapping, b: Mapping):
    if not a:
        raise InputError("no clients")
    if set(a) != set(b):
        raise InputError(f"trace and size maps cover different clients: {sorted(a)} vs {sorted(b)}")


def fedfim_trace(local_traces: Mapping[int, float], sizes: Mapping[int, int]) -> float:
    """Size-weighted average of local traces, reduced in ascending client id."""
    _check_keys(local_traces, sizes)
    ids = sorted(local_traces)
    if any(sizes[j] <= 0 for j in ids):
        raise InputError("client sizes must be positive")
    return float(convex_combination([float(local_traces[j]) for j in ids],
                                    [float(sizes[j]) for j in ids]))


def cum_trace(history: Iterable[tuple[float, float]]) -> float:
    """``sum_i lr_i * trace_i`` over ``(lr, trace)`` pairs."""
    terms = []
    for i, (lr, tr) in enumerate(history):
        if not lr > 0:
            raise InputError(f"history entry {i}: learning rate must be positive, got {lr}")
        if not tr >= 0:
            raise InputError(f"history entry {i}: trace must be nonnegative, got {tr}")
        terms.append(lr * tr)
    return math.fsum(terms)
