"""Composite-kernel sequential MCMC filter step.

One filter step targets the joint distribution of (x_k, x_{k-1}) given all
data up to step k, with the previous step's posterior represented by an
unweighted particle set.  The kernel sweeps an ordered subset of three
stages:

* ``joint_draw``     -- independence MH move of the pair (x_k, x_{k-1}):
  x_{k-1}* is a uniform particle, x_k* a transition draw, so the
  acceptance ratio reduces to a likelihood ratio.
* ``refine_prev``    -- conditional update of x_{k-1} given x_k.  Either
  the exact conditional (particle weights proportional to the transition
  density into the current x_k, always accepted) or a uniform index
  proposal accepted on the transition-density ratio.  Touches no data.
* ``refine_current`` -- blockwise MH update of x_k given x_{k-1}, with a
  conditional-prior, random-walk, or externally supplied Gaussian
  proposal.

Running N + N_b sweeps and discarding the first N_b yields the next
unweighted particle set.

The optional ``cavity``/``cavity_proposal`` hooks multiply an extra
(unnormalised) Gaussian factor into the target and/or replace the
transition proposal by its product with that factor; they are how the
divide-and-conquer node samplers reuse this kernel unchanged.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .metrics import EvalCounter, StepDiagnostics
from .models.base import StateSpaceModel
from .rng import as_seed_seq

JOINT_DRAW = "joint_draw"
REFINE_PREV = "refine_prev"
REFINE_CURRENT = "refine_current"
_STAGES = (JOINT_DRAW, REFINE_PREV, REFINE_CURRENT)


@dataclass
class ParticleApproximation:
    """N unweighted samples of the filtering distribution at one step."""

    particles: np.ndarray  # (N, state_dim)
    step_index: int = 0

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=float))
        if self.particles.size and not np.all(np.isfinite(self.particles)):
            raise ContractViolation("particles must be finite")

    def __len__(self) -> int:
        return self.particles.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.particles.mean(axis=0)


@dataclass
class ChainState:
    """Current (x_k, x_{k-1}) pair of one Markov chain.

    ``log_lik_sum`` caches the summed per-measurement log-likelihood of
    ``x`` against the step's batch; it is filled lazily the first time a
    data-dependent stage needs it and updated on accept/reject instead of
    being recomputed.
    """

    x: np.ndarray
    x_prev: np.ndarray
    log_lik_sum: float | None = None


@dataclass
class KernelConfig:
    """Composite-kernel configuration for one filter.

    ``blocks`` partitions the state indices updated by ``refine_current``
    (None means one full-state block).  ``current_proposal`` is "prior"
    (conditional transition draw, full-state block only), "random_walk"
    (Gaussian step with covariance ``rw_cov``), or "cavity" (externally
    supplied Gaussian proposal).  ``prev_proposal`` is "weighted" (exact
    conditional resampling, acceptance 1) or "uniform" (uniform index
    proposal accepted on the transition-prior ratio).
    """

    n_retained: int
    n_burn_in: int
    stages: tuple = (JOINT_DRAW, REFINE_PREV, REFINE_CURRENT)
    blocks: list | None = None
    current_proposal: str = "prior"
    rw_cov: float | np.ndarray = 0.01
    prev_proposal: str = "weighted"

    def validate(self, state_dim: int) -> None:
        if self.n_retained < 1:
            raise ContractViolation("n_retained must be >= 1")
        if self.n_burn_in < 0:
            raise ContractViolation("n_burn_in must be >= 0")
        if not self.stages or any(s not in _STAGES for s in self.stages):
            raise ContractViolation(f"stages must be a nonempty subset of {_STAGES}")
        if self.current_proposal not in ("prior", "random_walk", "cavity"):
            raise ContractViolation(f"unknown current proposal {self.current_proposal!r}")
        if self.prev_proposal not in ("weighted", "uniform"):
            raise ContractViolation(f"unknown prev proposal {self.prev_proposal!r}")
        if REFINE_CURRENT in self.stages:
            blocks = self.resolved_blocks(state_dim)
            flat = np.concatenate(blocks)
            if len(np.unique(flat)) != len(flat) or set(flat.tolist()) != set(range(state_dim)):
                raise ContractViolation("blocks must disjointly cover all state dimensions")
            if self.current_proposal in ("prior", "cavity") and len(blocks) != 1:
                raise ContractViolation(
                    f"{self.current_proposal} proposal updates the full state; "
                    "use a single block"
                )

    def resolved_blocks(self, state_dim: int) -> list:
        if self.blocks is None:
            return [np.arange(state_dim)]
        return [np.asarray(b, dtype=int) for b in self.blocks]


class BatchLikelihood:
    """Counting access to a step's per-measurement log-likelihoods."""

    def __init__(self, model: StateSpaceModel, batch: np.ndarray, counter: EvalCounter):
        self.model = model
        self.batch = batch
        self.counter = counter
        self.m = batch.shape[0]

    def sum_log_lik(self, x: np.ndarray) -> float:
        if self.m == 0:
            return 0.0
        self.counter.add_lik(self.m)
        return float(self.model.log_lik_terms(self.batch, x).sum())

    def terms_at(self, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        self.counter.add_lik(len(idx))
        return self.model.log_lik_terms(self.batch[idx], x)

    def grad_pass(self, x: np.ndarray) -> np.ndarray:
        self.counter.add_grad(self.m)
        return self.model.grad_log_lik_terms(self.batch, x)


def mh_accept(log_ratio: float, rng: np.random.Generator) -> bool:
    """Accept with probability min(1, exp(log_ratio))."""
    if np.isnan(log_ratio):  # -inf minus -inf: both states impossible
        return False
    u = rng.uniform()
    log_u = np.log(u) if u > 0.0 else -np.inf
    return bool(log_u < log_ratio)


def _ensure_sum(chain: ChainState, lik: BatchLikelihood) -> float:
    if chain.log_lik_sum is None:
        chain.log_lik_sum = lik.sum_log_lik(chain.x)
    return chain.log_lik_sum


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def joint_draw(
    chain: ChainState,
    prev: ParticleApproximation,
    lik: BatchLikelihood,
    model: StateSpaceModel,
    rng: np.random.Generator,
    cavity=None,
    cavity_proposal=None,
) -> bool:
    """Independence MH move of the pair (x_k, x_{k-1})."""
    if len(prev) == 0:
        raise ContractViolation("previous particle set is empty")
    cur_sum = _ensure_sum(chain, lik)
    j = rng.integers(len(prev))
    xp_star = prev.particles[j].copy()
    if cavity_proposal is not None:
        x_star = cavity_proposal.sample(xp_star, rng)
    else:
        x_star = model.sample_transition(xp_star, rng)
    prop_sum = lik.sum_log_lik(x_star)
    log_ratio = prop_sum - cur_sum
    if cavity_proposal is not None:
        # proposal = transition * cavity renormalised given x_{k-1}; the
        # x_{k-1}-dependent normaliser survives in the ratio
        log_ratio += cavity_proposal.log_norm(xp_star) - cavity_proposal.log_norm(chain.x_prev)
    elif cavity is not None:
        log_ratio += cavity.log_eval(x_star) - cavity.log_eval(chain.x)
    if mh_accept(log_ratio, rng):
        chain.x, chain.x_prev, chain.log_lik_sum = x_star, xp_star, prop_sum
        return True
    return False


def refine_prev(
    chain: ChainState,
    prev: ParticleApproximation,
    model: StateSpaceModel,
    rng: np.random.Generator,
    diag: StepDiagnostics | None = None,
) -> bool:
    """Exact conditional resampling of x_{k-1} given the current x_k.

    Particle weights are proportional to the transition density into the
    current x_k, which is the exact conditional on the particle support,
    so the move is always accepted.  Touches no data.
    """
    if len(prev) == 0:
        raise ContractViolation("previous particle set is empty")
    log_w = model.log_transition_many(chain.x, prev.particles)
    top = log_w.max()
    if not np.isfinite(top):
        # all transition weights underflowed: fall back to a uniform draw
        if diag is not None:
            diag.prev_weight_fallbacks += 1
        idx = int(rng.integers(len(prev)))
    else:
        w = np.exp(log_w - top)
        cum = np.cumsum(w)
        idx = min(int(np.searchsorted(cum, rng.uniform() * cum[-1])), len(prev) - 1)
    chain.x_prev = prev.particles[idx].copy()
    return True


def refine_prev_uniform(
    chain: ChainState,
    prev: ParticleApproximation,
    model: StateSpaceModel,
    rng: np.random.Generator,
) -> bool:
    """Uniform-index proposal for x_{k-1}, accepted on the ratio of
    transition priors into the current x_k.  Touches no data."""
    if len(prev) == 0:
        raise ContractViolation("previous particle set is empty")
    j = rng.integers(len(prev))
    xp_star = prev.particles[j].copy()
    log_ratio = model.log_transition(chain.x, xp_star) - model.log_transition(
        chain.x, chain.x_prev
    )
    if mh_accept(log_ratio, rng):
        chain.x_prev = xp_star
        return True
    return False


def refine_current_block(
    chain: ChainState,
    block: np.ndarray,
    lik: BatchLikelihood,
    model: StateSpaceModel,
    rng: np.random.Generator,
    proposal: str = "prior",
    rw_chol: np.ndarray | None = None,
    cavity=None,
    cavity_proposal=None,
) -> bool:
    """MH update of the coordinates in ``block`` of x_k given x_{k-1}."""
    cur_sum = _ensure_sum(chain, lik)
    if proposal == "prior":
        x_star = model.sample_transition(chain.x_prev, rng)
        prop_sum = lik.sum_log_lik(x_star)
        log_ratio = prop_sum - cur_sum
        if cavity is not None:
            log_ratio += cavity.log_eval(x_star) - cavity.log_eval(chain.x)
    elif proposal == "cavity":
        x_star = cavity_proposal.sample(chain.x_prev, rng)
        # proposal ∝ transition * cavity, both present in the target and
        # x_{k-1} is held fixed: everything but the likelihood cancels
        prop_sum = lik.sum_log_lik(x_star)
        log_ratio = prop_sum - cur_sum
    elif proposal == "random_walk":
        x_star = chain.x.copy()
        x_star[block] += rw_chol @ rng.standard_normal(len(block))
        prop_sum = lik.sum_log_lik(x_star)
        log_ratio = (
            prop_sum
            - cur_sum
            + model.log_transition(x_star, chain.x_prev)
            - model.log_transition(chain.x, chain.x_prev)
        )
        if cavity is not None:
            log_ratio += cavity.log_eval(x_star) - cavity.log_eval(chain.x)
    else:
        raise ContractViolation(f"unknown proposal {proposal!r}")
    if mh_accept(log_ratio, rng):
        chain.x, chain.log_lik_sum = x_star, prop_sum
        return True
    return False


# ---------------------------------------------------------------------------
# Filter step
# ---------------------------------------------------------------------------


def init_chain_state(
    prev: ParticleApproximation, model: StateSpaceModel, rng: np.random.Generator
) -> ChainState:
    """Uniform previous particle plus one transition draw."""
    j = rng.integers(len(prev))
    x_prev = prev.particles[j].copy()
    return ChainState(x=model.sample_transition(x_prev, rng), x_prev=x_prev)


def _rw_chols(cfg: KernelConfig, blocks: list) -> dict:
    chols = {}
    for b in blocks:
        d = len(b)
        if d in chols:
            continue
        if np.ndim(cfg.rw_cov) == 0:
            chols[d] = np.sqrt(float(cfg.rw_cov)) * np.eye(d)
        else:
            cov = np.asarray(cfg.rw_cov, dtype=float)
            if cov.shape != (d, d):
                raise ContractViolation(
                    f"rw_cov shape {cov.shape} does not match block size {d}"
                )
            chols[d] = np.linalg.cholesky(cov)
    return chols


def run_filter_step(
    prev: ParticleApproximation,
    batch: np.ndarray,
    model: StateSpaceModel,
    cfg: KernelConfig,
    seed,
    counter: EvalCounter | None = None,
    cavity=None,
    cavity_proposal=None,
    init_chain: ChainState | None = None,
    step_index: int = 0,
) -> tuple[ParticleApproximation, StepDiagnostics, ChainState]:
    """Run N + N_b composite-kernel sweeps and return the retained set.

    ``seed`` is an int or SeedSequence; per-stage generators are spawned
    from it so any stage's stream can be reproduced in isolation.  When
    ``init_chain`` is given (warm start) its cached likelihood sum must
    refer to this same batch.
    """
    cfg.validate(model.state_dim)
    batch = model.validate_batch(batch)
    if len(prev) == 0:
        raise ContractViolation("previous particle set is empty")
    step_counter = EvalCounter()
    lik = BatchLikelihood(model, batch, step_counter)
    children = as_seed_seq(seed).spawn(6)
    init_rng, joint_rng, prev_rng, curr_rng = map(np.random.default_rng, children[:4])
    diag = StepDiagnostics()
    t0 = time.perf_counter()

    chain = init_chain if init_chain is not None else init_chain_state(prev, model, init_rng)
    blocks = cfg.resolved_blocks(model.state_dim)
    rw_chols = _rw_chols(cfg, blocks) if cfg.current_proposal == "random_walk" else {}

    retained = np.empty((cfg.n_retained, model.state_dim))
    total = cfg.n_retained + cfg.n_burn_in
    for m in range(1, total + 1):
        for stage in cfg.stages:
            if stage == JOINT_DRAW:
                acc = joint_draw(
                    chain, prev, lik, model, joint_rng,
                    cavity=cavity, cavity_proposal=cavity_proposal,
                )
                diag.record(JOINT_DRAW, acc)
            elif stage == REFINE_PREV:
                if cfg.prev_proposal == "weighted":
                    acc = refine_prev(chain, prev, model, prev_rng, diag)
                else:
                    acc = refine_prev_uniform(chain, prev, model, prev_rng)
                diag.record(REFINE_PREV, acc)
            else:
                for block in blocks:
                    acc = refine_current_block(
                        chain, block, lik, model, curr_rng,
                        proposal=cfg.current_proposal,
                        rw_chol=rw_chols.get(len(block)),
                        cavity=cavity, cavity_proposal=cavity_proposal,
                    )
                    diag.record(REFINE_CURRENT, acc)
        if m > cfg.n_burn_in:
            retained[m - cfg.n_burn_in - 1] = chain.x

    diag.lik_evals = step_counter.lik
    diag.grad_evals = step_counter.grad
    diag.wall_ms = 1000.0 * (time.perf_counter() - t0)
    if counter is not None:
        counter.merge(step_counter)
    return ParticleApproximation(retained, step_index), diag, chain
