"""RGB-D semantic segmentation with separation-and-aggregation gating.

A numpy-only stack: a small reverse-mode autodiff engine, the gated
dual-stream encoder and decoder, a synthetic RGB-D scene generator with HHA
encoding, training, metrics and the ``sagate`` command line.
"""

from .autodiff import Tensor, no_grad
from .config import ExperimentConfig
from .errors import SAGateError
from .fusion import FUSION_KINDS, FeaturePair, FusionConfig, sa_gate
from .model import ModelConfig, forward, init_model_params

__all__ = [
    "Tensor",
    "no_grad",
    "ExperimentConfig",
    "SAGateError",
    "FUSION_KINDS",
    "FeaturePair",
    "FusionConfig",
    "sa_gate",
    "ModelConfig",
    "forward",
    "init_model_params",
]
__version__ = "0.1.0"
