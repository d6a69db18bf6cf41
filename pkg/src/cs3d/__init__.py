"""CS3D: factorized 3D convolutions, soft spiking neurons and spatial-temporal
attention for event-camera classification, on a small numpy autograd core."""

__version__ = "0.1.0"

from .tensor import Tensor, backward, check_gradients, finite_diff_check, no_grad
from .ssn import SsnParams, ssn_forward
from .network import ModelConfig, build_model, c3d_config, cs3d_config, variant_config
from .train import TrainConfig, cross_entropy, evaluate, train
from .profiler import count_flops, integrate_energy, profile

__all__ = [
    "Tensor",
    "backward",
    "check_gradients",
    "finite_diff_check",
    "no_grad",
    "SsnParams",
    "ssn_forward",
    "ModelConfig",
    "build_model",
    "c3d_config",
    "cs3d_config",
    "variant_config",
    "TrainConfig",
    "cross_entropy",
    "evaluate",
    "train",
    "count_flops",
    "integrate_energy",
    "profile",
]
