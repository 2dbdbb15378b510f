"""Sequential MCMC Bayesian filtering for state-space models whose
per-step observation sets are large.

Three filters share one composite MH kernel:

* plain sequential MCMC (``kernel.run_filter_step``),
* adaptive subsampling of the measurement batch inside every
  data-dependent accept/reject (``subsampling.as_filter_step``),
* divide-and-conquer across node samplers exchanging Gaussian
  natural-parameter messages (``ep.ep_filter_step``).
"""

from .ep import EpConfig, GaussianNaturalParams, ep_filter_step
from .kernel import ChainState, KernelConfig, ParticleApproximation, run_filter_step
from .metrics import EvalCounter, StepDiagnostics, acceptance_summary, ks_statistic
from .models import (
    GaussianBelief,
    LinGaussParams,
    LinearGaussianModel,
    MttModel,
    MttParams,
    kalman_step,
)
from .subsampling import ProxyCache, SubsampleOutcome, SubsampleParams, as_filter_step

__version__ = "0.1.0"

__all__ = [
    "ChainState",
    "EpConfig",
    "EvalCounter",
    "GaussianBelief",
    "GaussianNaturalParams",
    "KernelConfig",
    "LinGaussParams",
    "LinearGaussianModel",
    "MttModel",
    "MttParams",
    "ParticleApproximation",
    "ProxyCache",
    "StepDiagnostics",
    "SubsampleOutcome",
    "SubsampleParams",
    "acceptance_summary",
    "as_filter_step",
    "ep_filter_step",
    "kalman_step",
    "ks_statistic",
    "run_filter_step",
    "__version__",
]
