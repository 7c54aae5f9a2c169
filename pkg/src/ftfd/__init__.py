"""Audio-visual forgery detection with a small numpy autodiff engine."""

from .model import FTFDModel, ModelConfig, VARIANTS
from .training import TrainConfig, evaluate, fit

__all__ = ["FTFDModel", "ModelConfig", "VARIANTS", "TrainConfig", "evaluate", "fit"]
__version__ = "0.1.0"
