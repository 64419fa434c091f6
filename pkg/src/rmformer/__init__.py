"""Recurrent multi-scale transformer for high-resolution salient object detection."""
from .backbone import CoarsePredictionStage
from .config import ModelConfig, RunConfig, load_config
from .refinement import RMFormer

__version__ = "0.1.0"
__all__ = ["CoarsePredictionStage", "ModelConfig", "RMFormer", "RunConfig", "load_config"]
