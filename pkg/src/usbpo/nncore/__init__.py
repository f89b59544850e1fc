"""Minimal differentiable core: MLPs with Gaussian heads, reverse-mode gradients, Adam."""
from .autograd import Var
from .mlp import (
    DYNAMICS_LOG_STD,
    POLICY_LOG_STD,
    GaussianHeadOutput,
    MLPSpec,
    forward,
    forward_vars,
    gaussian_nll,
    gradient,
    init_params,
    member_params,
)
from .optim import Adam, AdamState, adam_step
from .params import ParamVector, read_checkpoint, write_checkpoint

__all__ = [
    "Adam",
    "AdamState",
    "DYNAMICS_LOG_STD",
    "GaussianHeadOutput",
    "MLPSpec",
    "POLICY_LOG_STD",
    "ParamVector",
    "Var",
    "adam_step",
    "forward",
    "forward_vars",
    "gaussian_nll",
    "gradient",
    "init_params",
    "member_params",
    "read_checkpoint",
    "write_checkpoint",
]
