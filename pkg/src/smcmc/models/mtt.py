"""Multi-target tracking in Poisson clutter.

The state stacks the positions and velocities of ``n_targets`` planar
targets as ``[x_1..x_NT, y_1..y_NT, vx_1..vx_NT, vy_1..vy_NT]``.  Each
target follows an independent near-constant-velocity model.  A step's
measurements are 2-D points: each target emits a Poisson(lambda_x) number
of Gaussian returns around its position, and a Poisson(lambda_c) number of
clutter points falls uniformly on the sensor region.  The per-measurement
likelihood factor is the association-free mixture

    lambda_c / area + lambda_x * sum_j N(z; pos_j, meas_cov),

with the measurement-count constant dropped (it cancels in every ratio the
samplers form).  The clutter density is evaluated as ``1/area`` for every
received point; all data is assumed to come from inside the sensor region.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from ..errors import ContractViolation
from .base import StateSpaceModel


@dataclass(frozen=True)
class MttParams:
    n_targets: int = 3
    t_s: float = 1.0
    sigma_x: float = 0.5
    meas_cov: np.ndarray = None
    lambda_x: float = 1500.0
    lambda_c: float = 4000.0
    region_x: float = 200.0
    region_y: float = 200.0

    def __post_init__(self):
        if self.n_targets < 1:
            raise ContractViolation("n_targets must be >= 1")
        if self.lambda_x < 0 or self.lambda_c < 0:
            raise ContractViolation("measurement rates must be >= 0")
        if self.region_x <= 0 or self.region_y <= 0:
            raise ContractViolation("sensor region must have positive area")
        cov = np.eye(2) if self.meas_cov is None else np.atleast_2d(np.asarray(self.meas_cov, float))
        if cov.shape != (2, 2) or not np.allclose(cov, cov.T, atol=1e-10):
            raise ContractViolation("meas_cov must be a symmetric 2x2 matrix")
        if np.any(np.linalg.eigvalsh(cov) <= 0):
            raise ContractViolation("meas_cov must be positive definite")
        object.__setattr__(self, "meas_cov", cov)

    @property
    def area(self) -> float:
        return self.region_x * self.region_y

    @property
    def clutter_density(self) -> float:
        return self.lambda_c / self.area


def _cv_matrices(t_s: float, sigma_x: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-target transition (A, Q) in [x, y, vx, vy] order."""
    i2 = np.eye(2)
    a = np.block([[i2, t_s * i2], [np.zeros((2, 2)), i2]])
    q = sigma_x**2 * np.block(
        [[(t_s**3 / 3) * i2, (t_s**2 / 2) * i2], [(t_s**2 / 2) * i2, t_s * i2]]
    )
    return a, q


class MttModel(StateSpaceModel):
    def __init__(self, params: MttParams | None = None):
        self.params = params if params is not None else MttParams()
        p = self.params
        self.n_targets = p.n_targets
        self.state_dim = 4 * p.n_targets
        self.obs_dim = 2
        self._a4, self._q4 = _cv_matrices(p.t_s, p.sigma_x)
        if p.sigma_x > 0:
            self._q4_inv = np.linalg.inv(self._q4)
            self._q4_chol = np.linalg.cholesky(self._q4)
            self._log_norm_trans = -0.5 * (
                4 * np.log(2 * np.pi) + np.linalg.slogdet(self._q4)[1]
            )
        else:
            # deterministic kinematics: sampling works, densities do not
            self._q4_inv = None
            self._q4_chol = np.zeros((4, 4))
            self._log_norm_trans = np.nan
        self._sig_inv = np.linalg.inv(p.meas_cov)
        self._gauss_norm = 1.0 / (2 * np.pi * np.sqrt(np.linalg.det(p.meas_cov)))
        self._hess_bound: float | None = None

    # -- state layout helpers ---------------------------------------------

    def positions(self, x: np.ndarray) -> np.ndarray:
        """Per-target positions, shape (n_targets, 2)."""
        return np.asarray(x, float).reshape(4, self.n_targets)[:2].T

    def _per_target(self, x: np.ndarray) -> np.ndarray:
        """(n_targets, 4) view in [x, y, vx, vy] order."""
        return np.asarray(x, float).reshape(4, self.n_targets).T

    def _flatten(self, per_target: np.ndarray) -> np.ndarray:
        return per_target.T.reshape(self.state_dim)

    # -- likelihood ---------------------------------------------------------

    def _target_densities(self, batch: np.ndarray, x: np.ndarray) -> np.ndarray:
        """N(z_i; pos_j, meas_cov) for all (i, j); shape (M, n_targets)."""
        d = batch[:, None, :] - self.positions(x)[None, :, :]
        quad = np.einsum("mtj,jk,mtk->mt", d, self._sig_inv, d)
        return self._gauss_norm * np.exp(-0.5 * quad)

    def log_lik_terms(self, batch: np.ndarray, x: np.ndarray) -> np.ndarray:
        p = self.params
        mix = p.clutter_density + p.lambda_x * self._target_densities(batch, x).sum(axis=1)
        with np.errstate(divide="ignore"):
            return np.log(mix)

    def grad_log_lik_terms(self, batch: np.ndarray, x: np.ndarray) -> np.ndarray:
        p = self.params
        nt = self.n_targets
        dens = self._target_densities(batch, x)
        mix = p.clutter_density + p.lambda_x * dens.sum(axis=1)
        d = batch[:, None, :] - self.positions(x)[None, :, :]
        u = np.einsum("jk,mtk->mtj", self._sig_inv, d)
        # velocity entries are exactly zero: the mixture ignores velocities
        grad = np.zeros((batch.shape[0], self.state_dim))
        scaled = p.lambda_x * dens[:, :, None] * u / mix[:, None, None]
        grad[:, :nt] = scaled[:, :, 0]
        grad[:, nt : 2 * nt] = scaled[:, :, 1]
        return grad

    def hessian_bound(self) -> float:
        if self._hess_bound is None:
            p = self.params
            key = (
                p.n_targets, p.lambda_x, p.lambda_c, p.region_x, p.region_y,
                p.meas_cov.tobytes(),
            )
            if key not in _HESS_BOUND_CACHE:
                _HESS_BOUND_CACHE[key] = _max_hessian_norm(p)
            self._hess_bound = _HESS_BOUND_CACHE[key]
        return self._hess_bound

    # -- transition ----------------------------------------------------------

    def sample_transition(self, x_prev: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        per = self._per_target(x_prev)
        noise = rng.standard_normal((self.n_targets, 4))
        return self._flatten(per @ self._a4.T + noise @ self._q4_chol.T)

    def sample_transition_many(self, x_prev: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n = x_prev.shape[0]
        per = x_prev.reshape(n, 4, self.n_targets).transpose(0, 2, 1)
        noise = rng.standard_normal((n, self.n_targets, 4))
        out = per @ self._a4.T + noise @ self._q4_chol.T
        return out.transpose(0, 2, 1).reshape(n, self.state_dim)

    def log_transition(self, x: np.ndarray, x_prev: np.ndarray) -> float:
        if self._q4_inv is None:
            raise ContractViolation("transition density undefined for sigma_x = 0")
        d = self._per_target(x) - self._per_target(x_prev) @ self._a4.T
        quad = np.einsum("tj,jk,tk->", d, self._q4_inv, d)
        return float(self.n_targets * self._log_norm_trans - 0.5 * quad)

    def log_transition_many(self, x: np.ndarray, x_prev: np.ndarray) -> np.ndarray:
        n = x_prev.shape[0]
        per_prev = x_prev.reshape(n, 4, self.n_targets).transpose(0, 2, 1)
        d = self._per_target(x)[None] - per_prev @ self._a4.T
        quad = np.einsum("ntj,jk,ntk->n", d, self._q4_inv, d)
        return self.n_targets * self._log_norm_trans - 0.5 * quad

    def transition_mean(self, x_prev: np.ndarray) -> np.ndarray:
        return self._flatten(self._per_target(x_prev) @ self._a4.T)

    def transition_precision(self) -> np.ndarray:
        # state index = block * n_targets + target, so the global precision
        # is the per-target precision kron'd with the identity over targets
        return np.kron(self._q4_inv, np.eye(self.n_targets))

    def velocity_dims(self) -> np.ndarray:
        """Indices of all velocity components in the state layout."""
        return np.arange(2 * self.n_targets, 4 * self.n_targets)


# ---------------------------------------------------------------------------
# Appendix Hessian and its offline norm bound
# ---------------------------------------------------------------------------


def mtt_hessian(params: MttParams, z: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Position-block Hessian of the per-measurement log-likelihood.

    ``positions`` is (n_targets, 2); the result is (2*n_targets,
    2*n_targets) with 2x2 blocks in target-major order, block (l, j)
    differentiating with respect to the positions of targets l and j.
    """
    positions = np.atleast_2d(np.asarray(positions, float))
    if not np.all(np.isfinite(positions)):
        raise ContractViolation("target positions must be finite")
    disp = np.asarray(z, float)[None, :] - positions
    return _hessian_from_displacements(params, disp)


def _hessian_from_displacements(params: MttParams, disp: np.ndarray) -> np.ndarray:
    nt = disp.shape[0]
    sig_inv = np.linalg.inv(params.meas_cov)
    norm = 1.0 / (2 * np.pi * np.sqrt(np.linalg.det(params.meas_cov)))
    quad = np.einsum("tj,jk,tk->t", disp, sig_inv, disp)
    dens = norm * np.exp(-0.5 * quad)
    lam = params.lambda_x
    den = params.clutter_density + lam * dens.sum()
    u = disp @ sig_inv.T  # u_l = Sigma^-1 (z - p_l)
    h = np.zeros((2 * nt, 2 * nt))
    for l in range(nt):
        sl = slice(2 * l, 2 * l + 2)
        others = lam * (dens.sum() - dens[l]) + params.clutter_density
        h[sl, sl] = (
            -lam * dens[l] / den * sig_inv
            + lam * dens[l] * others / den**2 * np.outer(u[l], u[l])
        )
        for j in range(nt):
            if j == l:
                continue
            h[sl, 2 * j : 2 * j + 2] = (
                -(lam**2) * dens[l] * dens[j] / den**2 * np.outer(u[l], u[j])
            )
    return h


_HESS_BOUND_CACHE: dict = {}


def _max_hessian_norm(params: MttParams) -> float:
    """Numeric upper bound on the spectral norm of the mixture Hessian.

    The Hessian depends on the displacements z - pos_j only, so the bound
    is found offline: maximise the norm over a grid of displacement
    configurations (single active target, co-located groups, and pairs),
    refine the best configuration locally, then inflate by 10%.
    """
    p = params
    if p.lambda_x == 0:
        return 0.0
    if p.clutter_density == 0:
        # without a clutter floor the mixture Hessian is unbounded unless
        # there is a single target (plain Gaussian log-likelihood)
        if p.n_targets == 1:
            return float(np.linalg.norm(np.linalg.inv(p.meas_cov), ord=2))
        return float("inf")

    span = 6.0 * np.sqrt(np.linalg.eigvalsh(p.meas_cov)[-1])

    def norm_of(disp: np.ndarray) -> float:
        return float(np.abs(np.linalg.eigvalsh(_hessian_from_displacements(p, disp))).max())

    grid = np.linspace(-span, span, 41)
    gx, gy = np.meshgrid(grid, grid)
    singles = np.column_stack([gx.ravel(), gy.ravel()])

    best_val, best_disp = 0.0, np.zeros((1, 2))
    # k targets co-located at a single displacement, the rest irrelevant
    for k in range(1, p.n_targets + 1):
        for d in singles:
            v = norm_of(np.tile(d, (k, 1)))
            if v > best_val:
                best_val, best_disp = v, np.tile(d, (k, 1))
    # pairs of active targets on a coarser joint grid
    if p.n_targets >= 2:
        coarse = np.linspace(-span, span, 13)
        cx, cy = np.meshgrid(coarse, coarse)
        pts = np.column_stack([cx.ravel(), cy.ravel()])
        for d1 in pts:
            for d2 in pts:
                disp = np.stack([d1, d2])
                v = norm_of(disp)
                if v > best_val:
                    best_val, best_disp = v, disp

    res = minimize(
        lambda flat: -norm_of(flat.reshape(-1, 2)),
        best_disp.ravel(),
        method="Nelder-Mead",
        options={"xatol": 1e-6, "fatol": 1e-10, "maxiter": 2000},
    )
    best_val = max(best_val, -res.fun)
    return 1.1 * best_val


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


def mtt_simulate(
    params: MttParams,
    n_steps: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Simulate target tracks and per-step measurement batches.

    Targets start uniformly inside the central quarter of the sensor region
    with per-axis speeds uniform on [-1, 1].  Returns ``(truth, batches,
    origins)``: truth has shape (n_steps + 1, 4 * n_targets) with row 0 the
    initial state; ``batches[k]`` is the shuffled (M_k, 2) batch of step
    k+1; ``origins[k]`` records, for diagnostics only, the index of the
    originating target (or -1 for clutter) of each measurement.
    """
    if n_steps < 1:
        raise ContractViolation("n_steps must be >= 1")
    p = params
    model = MttModel(p)
    nt = p.n_targets
    pos0 = np.column_stack(
        [
            rng.uniform(-p.region_x / 4, p.region_x / 4, nt),
            rng.uniform(-p.region_y / 4, p.region_y / 4, nt),
        ]
    )
    vel0 = rng.uniform(-1.0, 1.0, (nt, 2))
    truth = np.empty((n_steps + 1, model.state_dim))
    truth[0] = model._flatten(np.hstack([pos0, vel0]))
    sig_chol = np.linalg.cholesky(p.meas_cov)
    batches, origins = [], []
    for k in range(1, n_steps + 1):
        truth[k] = model.sample_transition(truth[k - 1], rng)
        pos = model.positions(truth[k])
        pts, who = [], []
        for j in range(nt):
            m_j = rng.poisson(p.lambda_x)
            if m_j:
                pts.append(pos[j] + rng.standard_normal((m_j, 2)) @ sig_chol.T)
                who.append(np.full(m_j, j))
        m_c = rng.poisson(p.lambda_c)
        if m_c:
            clutter = np.column_stack(
                [
                    rng.uniform(-p.region_x / 2, p.region_x / 2, m_c),
                    rng.uniform(-p.region_y / 2, p.region_y / 2, m_c),
                ]
            )
            pts.append(clutter)
            who.append(np.full(m_c, -1))
        if pts:
            batch = np.vstack(pts)
            who = np.concatenate(who)
            perm = rng.permutation(batch.shape[0])
            batches.append(batch[perm])
            origins.append(who[perm])
        else:
            batches.append(np.empty((0, 2)))
            origins.append(np.empty(0, dtype=int))
    return truth, batches, origins
