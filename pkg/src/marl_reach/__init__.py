"""Collaborative multi-agent PPO on a perturbed reaching task."""

from marl_reach.errors import (
    CheckpointError,
    ConfigurationError,
    ContractViolation,
    NumericalGuardError,
    OracleFailure,
    ScenarioParseError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigurationError",
    "ContractViolation",
    "NumericalGuardError",
    "OracleFailure",
    "ScenarioParseError",
    "__version__",
]
