"""Per-image restoration with a softly convexified network, plus the supporting toolkit."""

from .optimize import NumericalAbort, OptimConfig
from .tasks import DncfProblem, NetConfig, TaskResult, run_task

__all__ = ["DncfProblem", "NetConfig", "NumericalAbort", "OptimConfig", "TaskResult", "run_task"]
__version__ = "0.1.0"
