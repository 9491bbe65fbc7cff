"""Membership inference attack benchmark over controlled distance variables."""

from .errors import BenchError
from .mmd import MmdConfig, NormMode, mmd
from .presets import MATRIX_PRESETS, PRESETS, get_preset
from .scenarios import EvaluationScenario, build_scenario_matrix

__version__ = "0.1.0"

__all__ = [
    "MATRIX_PRESETS",
    "PRESETS",
    "BenchError",
    "EvaluationScenario",
    "MmdConfig",
    "NormMode",
    "build_scenario_matrix",
    "get_preset",
    "mmd",
]
