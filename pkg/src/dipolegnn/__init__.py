"""Differentiable GNN toolkit for molecular dipole moment prediction."""

from .autodiff import Parameter, Tape, Tensor, backward, grad_check
from .model import (
    ModelConfig,
    ModelParams,
    forward,
    load_checkpoint,
    mae_metric,
    rmse_norm_loss,
    save_checkpoint,
)
from .molgraph import Molecule, generate_acene, random_rotation

__version__ = "0.1.0"

__all__ = [
    "Parameter",
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
    "ModelConfig",
    "ModelParams",
    "forward",
    "load_checkpoint",
    "save_checkpoint",
    "mae_metric",
    "rmse_norm_loss",
    "Molecule",
    "generate_acene",
    "random_rotation",
    "__version__",
]
