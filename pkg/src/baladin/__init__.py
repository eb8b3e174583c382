"""Distributed AC optimal power flow by barrier-smoothed consensus coordination."""

from . import cli, coordinate, kkt, local, model, netio, partition, runtime
from .coordinate import SolverOptions, baladin_solve, centralized_solve
from .netio import load_case, parse_matpower
from .partition import build_consensus, coupling_metrics, partition_graph

__all__ = [
    "SolverOptions",
    "baladin_solve",
    "centralized_solve",
    "load_case",
    "parse_matpower",
    "partition_graph",
    "build_consensus",
    "coupling_metrics",
    "cli",
    "coordinate",
    "kkt",
    "local",
    "model",
    "netio",
    "partition",
    "runtime",
]
