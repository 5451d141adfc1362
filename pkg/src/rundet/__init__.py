"""rundet: a single-stage detector with residual feature blocks and a unified head,
trainable on synthetic shapes with a numpy autograd core."""
from .config import ExperimentConfig
from .detector import Detector, count_macs
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "Detector", "ExperimentConfig", "__version__", "count_macs"]
