"""Text-guided 3D segmentation with decomposed convolutions and two-pass refinement."""
from .model import ESICA, ModelConfig, measure_cost, toy_config

__version__ = "0.1.0"
__all__ = ["ESICA", "ModelConfig", "measure_cost", "toy_config"]
