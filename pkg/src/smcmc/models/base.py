"""State-space model contract used by every filter in the package.

A model supplies, for a state ``x`` and a set of conditionally independent
measurements ``z^1..z^M``:

* the per-measurement log-likelihood ``log p(z^i | x)`` (vectorized over i),
* its gradient in ``x`` (used to build linear control variates),
* a global upper bound on the spectral norm of its Hessian (used by the
  subsampled-decision range bound),
* the Markov transition density ``p(x_k | x_{k-1})`` (sampling and
  evaluation).

All stochastic operations take an explicit ``numpy.random.Generator``; the
model objects themselves are immutable after construction and safe to share
across concurrently running chains.
"""

from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np

from ..errors import ContractViolation


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name} must be finite, got {arr!r}")
    return arr


class StateSpaceModel(ABC):
    """Abstract per-measurement likelihood / transition interface."""

    #: dimension of the state vector
    state_dim: int
    #: dimension of one measurement
    obs_dim: int

    # -- likelihood ------------------------------------------------------

    @abstractmethod
    def log_lik_terms(self, batch: np.ndarray, x: np.ndarray) -> np.ndarray:
        """log p(z^i | x) for each row of ``batch``; shape (M,)."""

    @abstractmethod
    def grad_log_lik_terms(self, batch: np.ndarray, x: np.ndarray) -> np.ndarray:
        """d/dx log p(z^i | x) for each row of ``batch``; shape (M, state_dim)."""

    @abstractmethod
    def hessian_bound(self) -> float:
        """Upper bound on the spectral norm of the per-measurement
        log-likelihood Hessian, valid for every (z, x).  Data independent,
        computed once up front."""

    def log_lik_single(self, z: np.ndarray, x: np.ndarray) -> float:
        """Log-likelihood factor of a single measurement."""
        z = self.validate_measurement(z)
        x = self.validate_state(x)
        return float(self.log_lik_terms(z[None, :], x)[0])

    def grad_log_lik_single(self, z: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Gradient in x of the single-measurement log-likelihood."""
        z = self.validate_measurement(z)
        x = self.validate_state(x)
        return self.grad_log_lik_terms(z[None, :], x)[0]

    # -- transition ------------------------------------------------------

    @abstractmethod
    def sample_transition(self, x_prev: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One draw from p(x_k | x_{k-1})."""

    @abstractmethod
    def log_transition(self, x: np.ndarray, x_prev: np.ndarray) -> float:
        """log p(x_k = x | x_{k-1} = x_prev)."""

    def sample_transition_many(self, x_prev: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One transition draw per row of ``x_prev``; shape (N, state_dim)."""
        return np.stack([self.sample_transition(xp, rng) for xp in x_prev])

    def log_transition_many(self, x: np.ndarray, x_prev: np.ndarray) -> np.ndarray:
        """log p(x | x_prev_j) for each row x_prev_j; shape (N,)."""
        return np.array([self.log_transition(x, xp) for xp in x_prev])

    # -- Gaussian transition hooks (needed by EP cavity proposals) --------

    def transition_mean(self, x_prev: np.ndarray) -> np.ndarray:
        """Mean of p(x_k | x_{k-1}) when the transition is Gaussian."""
        raise NotImplementedError

    def transition_precision(self) -> np.ndarray:
        """Precision matrix of the (Gaussian) transition noise."""
        raise NotImplementedError

    # -- validation helpers ------------------------------------------------

    def validate_state(self, x: np.ndarray) -> np.ndarray:
        x = check_finite("state vector", x)
        if x.shape != (self.state_dim,):
            raise ContractViolation(
                f"state vector has shape {x.shape}, expected ({self.state_dim},)"
            )
        return x

    def validate_measurement(self, z: np.ndarray) -> np.ndarray:
        z = check_finite("measurement", z)
        if z.shape != (self.obs_dim,):
            raise ContractViolation(
                f"measurement has shape {z.shape}, expected ({self.obs_dim},)"
            )
        return z

    def validate_batch(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch, dtype=float)
        if batch.ndim != 2 or batch.shape[1] != self.obs_dim:
            raise ContractViolation(
                f"measurement batch has shape {batch.shape}, expected (M, {self.obs_dim})"
            )
        if batch.size and not np.all(np.isfinite(batch)):
            raise ContractViolation("measurement batch contains non-finite entries")
        return batch
