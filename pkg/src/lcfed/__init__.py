"""Personalized federated segmentation simulator.

Sites share a U-shaped base body through parameter averaging while keeping
their prediction heads local; local training is calibrated at the feature
level (contrastive site-embedding channel gates) and at the prediction level
(disagreement maps over all sites' heads).
"""

from .config import ExperimentConfig
from .tensor import Tensor

__all__ = ["ExperimentConfig", "Tensor"]
__version__ = "0.1.0"
