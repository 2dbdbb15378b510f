"""Linear-Gaussian state-space model and its exact Kalman oracle.

Dynamics ``x_k = A x_{k-1} + w``, ``w ~ N(0, Q)``; each of the M
measurements in a step is an independent draw ``z = H x_k + v``,
``v ~ N(0, R_obs)``.  Defaults are the scalar benchmark configuration
(A=0.9, Q=0.08, H=1, R_obs=2).  Everything is written in matrix form so
vector states work too, but the benchmark is one-dimensional.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractViolation
from .base import StateSpaceModel, check_finite


def _as_matrix(a, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    m = np.atleast_2d(np.asarray(a, dtype=float))
    if rows is not None and m.shape != (rows, cols):
        raise ContractViolation(f"expected shape ({rows}, {cols}), got {m.shape}")
    return m


def _check_spd(name: str, m: np.ndarray) -> np.ndarray:
    if not np.allclose(m, m.T, atol=1e-10):
        raise ContractViolation(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise ContractViolation(f"{name} must be positive definite") from None
    return m


@dataclass(frozen=True)
class LinGaussParams:
    """Transition (A, Q) and observation (H, R_obs) matrices.

    Scalars are promoted to 1x1 matrices.  R_obs is the observation noise
    covariance; the name avoids clashing with the range bound used by the
    subsampled sampler.
    """

    a: np.ndarray = 0.9
    q: np.ndarray = 0.08
    h: np.ndarray = 1.0
    r_obs: np.ndarray = 2.0

    def __post_init__(self):
        a = _as_matrix(self.a)
        n = a.shape[0]
        q = _check_spd("Q", _as_matrix(self.q, n, n))
        h = _as_matrix(self.h)
        if h.shape[1] != n:
            raise ContractViolation(f"H has {h.shape[1]} columns, state dim is {n}")
        r = _check_spd("R_obs", _as_matrix(self.r_obs, h.shape[0], h.shape[0]))
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "r_obs", r)

    @property
    def state_dim(self) -> int:
        return self.a.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.h.shape[0]


class LinearGaussianModel(StateSpaceModel):
    def __init__(self, params: LinGaussParams | None = None):
        self.params = params if params is not None else LinGaussParams()
        p = self.params
        self.state_dim = p.state_dim
        self.obs_dim = p.obs_dim
        self._r_inv = np.linalg.inv(p.r_obs)
        self._q_inv = np.linalg.inv(p.q)
        self._q_chol = np.linalg.cholesky(p.q)
        # normalising constants of the two Gaussian densities
        self._log_norm_lik = -0.5 * (
            self.obs_dim * np.log(2.0 * np.pi) + np.linalg.slogdet(p.r_obs)[1]
        )
        self._log_norm_trans = -0.5 * (
            self.state_dim * np.log(2.0 * np.pi) + np.linalg.slogdet(p.q)[1]
        )
        # gradient factor H^T R^-1 and the constant Hessian H^T R^-1 H
        self._ht_rinv = p.h.T @ self._r_inv
        self._hess = self._ht_rinv @ p.h

    # -- likelihood ------------------------------------------------------

    def log_lik_terms(self, batch: np.ndarray, x: np.ndarray) -> np.ndarray:
        r = batch - x @ self.params.h.T
        quad = np.einsum("ij,jk,ik->i", r, self._r_inv, r)
        return self._log_norm_lik - 0.5 * quad

    def grad_log_lik_terms(self, batch: np.ndarray, x: np.ndarray) -> np.ndarray:
        r = batch - x @ self.params.h.T
        return r @ self._ht_rinv.T

    def hessian_bound(self) -> float:
        # the Hessian is the constant -H^T R^-1 H
        return float(np.linalg.norm(self._hess, ord=2))

    # -- transition ------------------------------------------------------

    def sample_transition(self, x_prev: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x_prev = np.asarray(x_prev, dtype=float)
        return self.params.a @ x_prev + self._q_chol @ rng.standard_normal(self.state_dim)

    def sample_transition_many(self, x_prev: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        noise = rng.standard_normal((x_prev.shape[0], self.state_dim))
        return x_prev @ self.params.a.T + noise @ self._q_chol.T

    def log_transition(self, x: np.ndarray, x_prev: np.ndarray) -> float:
        d = np.asarray(x, dtype=float) - self.params.a @ np.asarray(x_prev, dtype=float)
        return float(self._log_norm_trans - 0.5 * d @ self._q_inv @ d)

    def log_transition_many(self, x: np.ndarray, x_prev: np.ndarray) -> np.ndarray:
        d = x[None, :] - x_prev @ self.params.a.T
        quad = np.einsum("ij,jk,ik->i", d, self._q_inv, d)
        return self._log_norm_trans - 0.5 * quad

    def transition_mean(self, x_prev: np.ndarray) -> np.ndarray:
        return self.params.a @ np.asarray(x_prev, dtype=float)

    def transition_precision(self) -> np.ndarray:
        return self._q_inv


def simulate_lin_gauss(
    params: LinGaussParams,
    n_steps: int,
    n_meas: int,
    rng: np.random.Generator,
    init_std: float = 1.0,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Simulate a truth trajectory and per-step measurement batches.

    Returns ``(truth, batches)`` where ``truth`` has shape
    (n_steps + 1, state_dim) with the initial state in row 0, and
    ``batches[k]`` holds the n_meas measurements received at step k+1.
    """
    model = LinearGaussianModel(params)
    n = params.state_dim
    truth = np.empty((n_steps + 1, n))
    truth[0] = init_std * rng.standard_normal(n)
    r_chol = np.linalg.cholesky(params.r_obs)
    batches = []
    for k in range(1, n_steps + 1):
        truth[k] = model.sample_transition(truth[k - 1], rng)
        noise = rng.standard_normal((n_meas, params.obs_dim))
        batches.append(truth[k] @ params.h.T + noise @ r_chol.T)
    return truth, batches


# ---------------------------------------------------------------------------
# Kalman oracle
# ---------------------------------------------------------------------------


@dataclass
class GaussianBelief:
    """Gaussian filtering state, N(mean, cov)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = check_finite("belief mean", np.atleast_1d(self.mean))
        self.cov = check_finite("belief cov", np.atleast_2d(self.cov))
        if not np.allclose(self.cov, self.cov.T, atol=1e-10):
            raise ContractViolation("belief covariance must be symmetric")

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


def kalman_step(
    belief: GaussianBelief, params: LinGaussParams, batch: np.ndarray
) -> GaussianBelief:
    """Exact predict + measurement update for one step.

    The M conditionally independent measurements are absorbed in information
    form, which makes the result invariant to their order.  An empty batch
    reduces to the pure prediction.
    """
    a, q, h, r = params.a, params.q, params.h, params.r_obs
    mean_pred = a @ belief.mean
    cov_pred = a @ belief.cov @ a.T + q
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    m = batch.shape[0] if batch.size else 0
    if m == 0:
        return GaussianBelief(mean_pred, cov_pred)
    r_inv = np.linalg.inv(r)
    info = np.linalg.inv(cov_pred) + m * h.T @ r_inv @ h
    vec = np.linalg.solve(cov_pred, mean_pred) + h.T @ r_inv @ batch.sum(axis=0)
    cov = np.linalg.inv(info)
    cov = 0.5 * (cov + cov.T)
    return GaussianBelief(cov @ vec, cov)
