from .base import StateSpaceModel
from .lin_gauss import (
    GaussianBelief,
    LinGaussParams,
    LinearGaussianModel,
    kalman_step,
    simulate_lin_gauss,
)
from .mtt import MttModel, MttParams, mtt_hessian, mtt_simulate

__all__ = [
    "StateSpaceModel",
    "LinGaussParams",
    "LinearGaussianModel",
    "GaussianBelief",
    "kalman_step",
    "simulate_lin_gauss",
    "MttModel",
    "MttParams",
    "mtt_hessian",
    "mtt_simulate",
]
