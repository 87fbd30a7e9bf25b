"""Distributed safe reach-avoid control of multi-agent systems.

Each agent solves a small QP built from barrier and Lyapunov-like
conditions.  Constraints that couple agents are split with mismatch
variables whose values come from fast primal-dual dynamics run over the
communication graph.
"""

from .constraints import Obstacle, ScenarioParams, Schedule, SingleIntegrator
from .graph import CommParams
from .runtime import RunResult, run

__version__ = "0.1.0"

__all__ = ["CommParams", "Obstacle", "RunResult", "ScenarioParams", "Schedule", "SingleIntegrator", "run"]
