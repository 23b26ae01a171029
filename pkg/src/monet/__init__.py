"""Multi-scale overlap detection between image pairs."""
from .network import MONet, Mode
from .pyramid import DESK_CONFIG, FULL_CONFIG, ScaleConfig
from .search import run_pipeline
from .training import TrainConfig

__all__ = ["MONet", "Mode", "ScaleConfig", "DESK_CONFIG", "FULL_CONFIG", "TrainConfig", "run_pipeline"]
