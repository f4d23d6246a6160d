"""Deterministic FedAvg simulator with recover-round schedules and Fisher-trace instrumentation."""

__version__ = "0.1.0"
