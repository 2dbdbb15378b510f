"""Adaptive-subsampling MH decisions and the subsampled filter step.

Each data-dependent accept/reject in the composite kernel compares the mean
log-likelihood ratio over the batch against a threshold psi derived from
the uniform MH draw and the prior/proposal terms.  Instead of evaluating
all M measurements, the decision is made from a growing uniform subsample
drawn without replacement: a first-order Taylor control variate (the
"proxy") is subtracted from every log-ratio term, and an empirical
Bernstein confidence radius tells us when the subsample mean is provably
on one side of the threshold.  If the radius never separates, the batch is
exhausted and the decision is the exact one.

Per-measurement log-likelihoods of the chain's current state are cached
between decisions (with a validity mask, since a partially evaluated
accepted proposal only refreshes the entries it touched), so a decision
costs one evaluation per cached term and two per uncached one.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .kernel import (
    REFINE_CURRENT,
    REFINE_PREV,
    JOINT_DRAW,
    BatchLikelihood,
    ChainState,
    KernelConfig,
    ParticleApproximation,
    _rw_chols,
    init_chain_state,
    refine_prev,
    refine_prev_uniform,
)
from .metrics import EvalCounter, StepDiagnostics
from .models.base import StateSpaceModel
from .rng import as_seed_seq


@dataclass(frozen=True)
class SubsampleParams:
    """Stopping-rule knobs: geometric batch growth factor, total failure
    budget, and the exponent of the per-loop budget allocation."""

    growth: float = 1.2
    delta: float = 0.1
    power: float = 2.0

    def __post_init__(self):
        if not self.growth > 1.0:
            raise ContractViolation("growth factor must be > 1")
        if not 0.0 < self.delta < 1.0:
            raise ContractViolation("delta must be in (0, 1)")
        if not self.power > 1.0:
            raise ContractViolation("power must be > 1")


@dataclass
class ProxyCache:
    """Per-measurement gradients at the expansion point, plus the Hessian
    bound used for the Taylor-remainder range bound."""

    x_plus: np.ndarray
    grads: np.ndarray  # (M, state_dim)
    grad_mean: np.ndarray
    hess_bound: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.grads)):
            raise ContractViolation("proxy gradients must be finite")
        if self.hess_bound < 0:
            raise ContractViolation("Hessian bound must be >= 0")


@dataclass
class SubsampleOutcome:
    """Result of one adaptive decision.

    ``lam`` is the proxy-corrected subsample mean; ``estimate`` adds back
    the full-batch proxy mean, i.e. the quantity compared against psi;
    ``radius`` is the confidence radius at the stopping loop.
    """

    lam: float
    consumed: int
    accept: bool
    loops: int
    estimate: float
    radius: float = float("inf")


def build_proxy(
    model: StateSpaceModel,
    batch: np.ndarray,
    x_plus: np.ndarray,
    counter: EvalCounter | None = None,
) -> ProxyCache:
    """One full gradient pass at the expansion point."""
    batch = model.validate_batch(batch)
    x_plus = model.validate_state(np.asarray(x_plus, dtype=float))
    if batch.shape[0]:
        if counter is not None:
            counter.add_grad(batch.shape[0])
        grads = model.grad_log_lik_terms(batch, x_plus)
    else:
        grads = np.zeros((0, model.state_dim))
    mean = grads.mean(axis=0) if batch.shape[0] else np.zeros(model.state_dim)
    return ProxyCache(x_plus, grads, mean, model.hessian_bound())


def _proxy_from_lik(model, lik: BatchLikelihood, x_plus: np.ndarray) -> ProxyCache:
    if lik.m:
        grads = lik.grad_pass(x_plus)
        mean = grads.mean(axis=0)
    else:
        grads = np.zeros((0, model.state_dim))
        mean = np.zeros(model.state_dim)
    return ProxyCache(np.asarray(x_plus, float).copy(), grads, mean, model.hessian_bound())


def proxy_eval(cache: ProxyCache, i: int, x_from: np.ndarray, x_to: np.ndarray) -> float:
    """Linear control-variate value for the i-th log-likelihood ratio."""
    return float(cache.grads[i] @ (np.asarray(x_to, float) - np.asarray(x_from, float)))


def range_bound(cache: ProxyCache, x_from: np.ndarray, x_to: np.ndarray) -> float:
    """Upper bound on the spread of the proxy-corrected log-ratio terms.

    Both Taylor remainders are bounded by Y * ||x - x+||^2 / 2, and the
    range of the corrected terms is at most twice their sum.
    """
    d_from = np.asarray(x_from, float) - cache.x_plus
    d_to = np.asarray(x_to, float) - cache.x_plus
    return float(cache.hess_bound * (d_from @ d_from + d_to @ d_to))


def bernstein_radius(var: float, range_bound: float, count: int, delta: float) -> float:
    """Empirical Bernstein confidence radius for a mean of ``count`` terms."""
    if not 0.0 < delta < 1.0:
        raise ContractViolation("delta must be in (0, 1)")
    if var < 0 or count < 1:
        raise ContractViolation("need var >= 0 and count >= 1")
    log_term = math.log(3.0 / delta)
    return math.sqrt(2.0 * var * log_term / count) + 3.0 * range_bound * log_term / count


def delta_schedule(loop: int, params: SubsampleParams) -> float:
    """Per-loop failure budget; sums below the total budget over all loops."""
    if loop < 1:
        raise ContractViolation("loop index starts at 1")
    p = params.power
    return (p - 1.0) / (p * loop**p) * params.delta


class SubsampleState:
    """Per-step cache of current-state per-measurement log-likelihoods."""

    def __init__(self, lik: BatchLikelihood):
        self.lik = lik
        self.m = lik.m
        self.values = np.empty(self.m)
        self.valid = np.zeros(self.m, dtype=bool)

    class _Pair:
        def __init__(self, state: "SubsampleState", x_from, x_to):
            self.state = state
            self.x_from = np.asarray(x_from, float)
            self.x_to = np.asarray(x_to, float)
            self.prop = np.empty(state.m)
            self.touched = np.zeros(state.m, dtype=bool)

        def ratio_terms(self, idx: np.ndarray) -> np.ndarray:
            st = self.state
            prop = st.lik.terms_at(self.x_to, idx)
            self.prop[idx] = prop
            self.touched[idx] = True
            need = idx[~st.valid[idx]]
            if need.size:
                st.values[need] = st.lik.terms_at(self.x_from, need)
                st.valid[need] = True
            return prop - st.values[idx]

        def commit(self, accepted: bool) -> None:
            if accepted:
                st = self.state
                st.values[self.touched] = self.prop[self.touched]
                st.valid = self.touched

    def pair(self, x_from, x_to) -> "SubsampleState._Pair":
        return SubsampleState._Pair(self, x_from, x_to)


def adaptive_decide(
    store: SubsampleState,
    x_from: np.ndarray,
    x_to: np.ndarray,
    cache: ProxyCache,
    psi: float,
    params: SubsampleParams,
    rng: np.random.Generator,
) -> SubsampleOutcome:
    """Grow a without-replacement subsample until the Bernstein radius
    separates the proxy-corrected estimate from psi, or the batch is
    exhausted (in which case the decision is the exact one)."""
    if not np.isfinite(psi):
        raise ContractViolation("psi must be finite")
    m = store.m
    if m == 0:
        return SubsampleOutcome(0.0, 0, bool(0.0 > psi), 0, 0.0, 0.0)
    pair = store.pair(x_from, x_to)
    delta_x = pair.x_to - pair.x_from
    proxy_mean = float(cache.grad_mean @ delta_x)
    rb = range_bound(cache, x_from, x_to)
    perm = rng.permutation(m)
    consumed, lam, batch_size, loops = 0, 0.0, 1, 0
    # unbiased variance of the corrected terms via sums centred on the
    # first term (cancellation-safe for near-constant terms)
    shift = 0.0
    s1 = s2 = 0.0
    growth, budget, power = params.growth, params.delta, params.power
    coeff = (power - 1.0) / power * budget
    while True:
        loops += 1
        new_idx = perm[consumed:batch_size]
        corrected = pair.ratio_terms(new_idx) - cache.grads[new_idx] @ delta_x
        if loops == 1:
            shift = float(corrected[0])
        centred = corrected - shift
        s1 += float(centred.sum())
        s2 += float(centred @ centred)
        lam = (consumed * lam + float(corrected.sum())) / batch_size
        consumed = batch_size
        if consumed > 1:
            var = max((s2 - s1 * s1 / consumed) / (consumed - 1), 0.0)
        else:
            var = 0.0
        delta_w = coeff / loops**power
        log_term = math.log(3.0 / delta_w)
        radius = (
            math.sqrt(2.0 * var * log_term / consumed)
            + 3.0 * rb * log_term / consumed
        )
        batch_size = min(max(int(math.ceil(growth * consumed)), consumed + 1), m)
        if abs(lam + proxy_mean - psi) >= radius or consumed == m:
            break
    estimate = lam + proxy_mean
    accept = bool(estimate > psi)
    pair.commit(accept)
    return SubsampleOutcome(lam, consumed, accept, loops, estimate, radius)


# ---------------------------------------------------------------------------
# Subsampled filter step
# ---------------------------------------------------------------------------


def as_filter_step(
    prev: ParticleApproximation,
    batch: np.ndarray,
    model: StateSpaceModel,
    cfg: KernelConfig,
    params: SubsampleParams,
    seed,
    counter: EvalCounter | None = None,
    step_index: int = 0,
) -> tuple[ParticleApproximation, StepDiagnostics, ChainState]:
    """Same contract as ``run_filter_step``, with every data-dependent MH
    decision routed through the adaptive stopping rule.

    Proposal and uniform draws come from the same per-stage streams as the
    plain filter, and the subsample index draws from separate streams, so
    a degenerate budget (delta -> 0) reproduces the plain filter's output
    exactly.  The proxy is refreshed at sweep 1 and at the end of burn-in.
    """
    cfg.validate(model.state_dim)
    if cfg.current_proposal == "cavity":
        raise ContractViolation(
            "subsampled steps support prior or random_walk current proposals"
        )
    batch = model.validate_batch(batch)
    step_counter = EvalCounter()
    lik = BatchLikelihood(model, batch, step_counter)
    store = SubsampleState(lik)
    children = as_seed_seq(seed).spawn(6)
    init_rng, joint_rng, prev_rng, curr_rng, joint_sub_rng, curr_sub_rng = map(
        np.random.default_rng, children
    )
    diag = StepDiagnostics()
    t0 = time.perf_counter()

    chain = init_chain_state(prev, model, init_rng)
    blocks = cfg.resolved_blocks(model.state_dim)
    rw_chols = _rw_chols(cfg, blocks) if cfg.current_proposal == "random_walk" else {}
    m_eff = max(lik.m, 1)  # psi scaling; the empty batch keeps exact decisions

    def log_u(rng: np.random.Generator) -> float:
        u = rng.uniform()
        return float(np.log(u)) if u > 0.0 else -np.inf

    proxy: ProxyCache | None = None
    retained = np.empty((cfg.n_retained, model.state_dim))
    total = cfg.n_retained + cfg.n_burn_in
    for m in range(1, total + 1):
        if m == 1 or m == cfg.n_burn_in:
            proxy = _proxy_from_lik(model, lik, chain.x)
        for stage in cfg.stages:
            if stage == JOINT_DRAW:
                j = joint_rng.integers(len(prev))
                xp_star = prev.particles[j].copy()
                x_star = model.sample_transition(xp_star, joint_rng)
                psi = log_u(joint_rng) / m_eff  # prior and proposal cancel
                out = adaptive_decide(store, chain.x, x_star, proxy, psi, params, joint_sub_rng)
                if out.accept:
                    chain.x, chain.x_prev = x_star, xp_star
                diag.record(JOINT_DRAW, out.accept)
                diag.consumed.append(out.consumed / m_eff)
            elif stage == REFINE_PREV:
                # data free: identical to the plain filter
                if cfg.prev_proposal == "weighted":
                    acc = refine_prev(chain, prev, model, prev_rng, diag)
                else:
                    acc = refine_prev_uniform(chain, prev, model, prev_rng)
                diag.record(REFINE_PREV, acc)
            else:
                for block in blocks:
                    if cfg.current_proposal == "prior":
                        x_star = model.sample_transition(chain.x_prev, curr_rng)
                        psi = log_u(curr_rng) / m_eff
                    else:
                        x_star = chain.x.copy()
                        x_star[block] += rw_chols[len(block)] @ curr_rng.standard_normal(
                            len(block)
                        )
                        psi = (
                            log_u(curr_rng)
                            + model.log_transition(chain.x, chain.x_prev)
                            - model.log_transition(x_star, chain.x_prev)
                        ) / m_eff
                    out = adaptive_decide(
                        store, chain.x, x_star, proxy, psi, params, curr_sub_rng
                    )
                    if out.accept:
                        chain.x = x_star
                    diag.record(REFINE_CURRENT, out.accept)
                    diag.consumed.append(out.consumed / m_eff)
        if m > cfg.n_burn_in:
            retained[m - cfg.n_burn_in - 1] = chain.x

    diag.lik_evals = step_counter.lik
    diag.grad_evals = step_counter.grad
    diag.wall_ms = 1000.0 * (time.perf_counter() - t0)
    if counter is not None:
        counter.merge(step_counter)
    return ParticleApproximation(retained, step_index), diag, chain
