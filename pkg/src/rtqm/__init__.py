"""Discrete-event simulator and analysis toolkit for real-time-aware queue management."""
__version__ = "0.1.0"

from .engine import ConfigurationError, Simulation  # noqa: E402
from .metrics import RunReport, build_report  # noqa: E402
from .runner import RunResult, run_scenario  # noqa: E402
from .workload import Scenario, experiment_template  # noqa: E402

__all__ = [
    "__version__", "ConfigurationError", "Simulation", "RunReport", "build_report",
    "RunResult", "run_scenario", "Scenario", "experiment_template",
]
