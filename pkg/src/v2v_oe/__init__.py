"""Slot-level simulator for auction-based V2V radio resource scheduling with learned bids."""

from .engine import InvariantError, Simulation, run
from .results import RunSummary, SlotMetrics, detect_convergence, export, load
from .scenario import ConfigError, ScenarioConfig, load_config, load_config_file

__all__ = [
    "ConfigError", "InvariantError", "RunSummary", "ScenarioConfig", "Simulation", "SlotMetrics",
    "detect_convergence", "export", "load", "load_config", "load_config_file", "run",
]
