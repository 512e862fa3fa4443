"""Two-phase Lie-group VAE with calibrated non-commutativity diagnostics."""

from .diagnostics import CalibrationState, PairStats
from .estimator import LieGroupVAE
from .model import ModelDims, ModelState
from .trainer import TrainConfig, run_curriculum, train_phase1, train_phase2

__version__ = "0.1.0"

__all__ = [
    "CalibrationState",
    "LieGroupVAE",
    "ModelDims",
    "ModelState",
    "PairStats",
    "TrainConfig",
    "run_curriculum",
    "train_phase1",
    "train_phase2",
    "__version__",
]
