"""Desk-scale cross-silo federated learning simulator and ARIA benchmark harness."""

from .numkit import RngStream
from .models import ModelSpec, ModelState
from .data import Dataset, Partition
from .federation import RoundConfig, StrategyConfig, run_federation, centralized_baseline

__all__ = [
    "RngStream",
    "ModelSpec",
    "ModelState",
    "Dataset",
    "Partition",
    "RoundConfig",
    "StrategyConfig",
    "run_federation",
    "centralized_baseline",
]

__version__ = "0.1.0"
