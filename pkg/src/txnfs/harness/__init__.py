"""Workload generator, history recorder and strict-serializability checker."""
from .checker import MalformedHistory, Oracle, Valid, Violation, check_strict_serializability, replay_state
from .workload import Metrics, WorkloadConfig, compare_modes, run_workload, smoke_throughput

__all__ = [
    "MalformedHistory",
    "Metrics",
    "Oracle",
    "Valid",
    "Violation",
    "WorkloadConfig",
    "check_strict_serializability",
    "compare_modes",
    "replay_state",
    "run_workload",
    "smoke_throughput",
]
