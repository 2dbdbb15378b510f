"""Divide-and-conquer filtering with expectation-propagation messages.

A step's measurements are partitioned across D node samplers.  Each node
runs the composite kernel against its local target: its shard's
likelihood, the transition prior, its own previous particle set, and the
product of the D-1 other nodes' Gaussian likelihood approximations (the
cavity).  After every round each node fits Gaussian natural parameters to
its posterior samples and to a fresh predictive sample, forms its message
by natural-parameter subtraction, and all messages are exchanged at a
synchronization barrier.  After the last round the node sample sets are
pooled.

Natural parameters here are the precision-scaled mean ``h`` and the
precision matrix ``prec``; messages are unnormalized Gaussian factors
``exp(h'x - x' prec x / 2)``.  Nodes within a round are independent and may
run concurrently; results are bit-identical either way because every node
draws from its own seed-derived stream and merging is by node index.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve, cholesky

from .errors import ContractViolation, DegenerateFitError, DegenerateProposalError
from .kernel import KernelConfig, ParticleApproximation, run_filter_step
from .metrics import EvalCounter, StepDiagnostics
from .models.base import StateSpaceModel
from .rng import as_seed_seq

logger = logging.getLogger(__name__)


@dataclass
class GaussianNaturalParams:
    """Gaussian natural parameters (precision-scaled mean, precision)."""

    h: np.ndarray
    prec: np.ndarray

    def __post_init__(self):
        self.h = np.atleast_1d(np.asarray(self.h, dtype=float))
        self.prec = np.atleast_2d(np.asarray(self.prec, dtype=float))
        if not (np.all(np.isfinite(self.h)) and np.all(np.isfinite(self.prec))):
            raise ContractViolation("natural parameters must be finite")
        if not np.allclose(self.prec, self.prec.T, atol=1e-10):
            raise ContractViolation("precision matrix must be symmetric")

    @property
    def dim(self) -> int:
        return self.h.shape[0]

    @classmethod
    def zero(cls, dim: int) -> "GaussianNaturalParams":
        return cls(np.zeros(dim), np.zeros((dim, dim)))

    def is_zero(self) -> bool:
        return not (np.any(self.h) or np.any(self.prec))

    def log_eval(self, x: np.ndarray) -> float:
        """Log of the unnormalized factor at x."""
        return float(self.h @ x - 0.5 * x @ self.prec @ x)

    def to_mean_cov(self) -> tuple[np.ndarray, np.ndarray]:
        cov = np.linalg.inv(self.prec)
        return cov @ self.h, 0.5 * (cov + cov.T)

    @classmethod
    def from_mean_cov(cls, mean, cov) -> "GaussianNaturalParams":
        prec = np.linalg.inv(np.atleast_2d(np.asarray(cov, float)))
        prec = 0.5 * (prec + prec.T)
        return cls(prec @ np.atleast_1d(mean), prec)


def combine(messages) -> GaussianNaturalParams:
    """Sum of natural-parameter factors (product of the densities)."""
    messages = list(messages)
    if not messages:
        raise ContractViolation("combine needs at least one factor")
    h = sum(m.h for m in messages)
    prec = sum(m.prec for m in messages)
    return GaussianNaturalParams(h, prec)


def default_pd_floor(mat: np.ndarray) -> float:
    """Scale-relative eigenvalue floor used when none is configured."""
    n = mat.shape[0]
    return 1e-8 * max(float(np.trace(mat)), 0.0) / n


def pd_projection(mat: np.ndarray, eps: float) -> np.ndarray:
    """Clamp the eigenvalues of a symmetric matrix at ``eps``.

    Idempotent: input whose smallest eigenvalue already reaches the floor
    is returned unchanged.
    """
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if not np.allclose(mat, mat.T, atol=1e-10):
        raise ContractViolation("pd_projection expects a symmetric matrix")
    vals, vecs = np.linalg.eigh(mat)
    if vals[0] >= eps:
        return mat
    out = (vecs * np.maximum(vals, eps)) @ vecs.T
    return 0.5 * (out + out.T)


def partition_measurements(batch: np.ndarray, n_nodes: int, rng: np.random.Generator) -> list:
    """Random disjoint cover of the batch with sizes differing by at most 1."""
    if n_nodes < 1:
        raise ContractViolation("n_nodes must be >= 1")
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    perm = rng.permutation(batch.shape[0])
    return [batch[idx] for idx in np.array_split(perm, n_nodes)]


def np_from_samples(samples: np.ndarray, eps: float | None = None) -> GaussianNaturalParams:
    """Fit Gaussian natural parameters by moment matching.

    Uses the sample mean and the unbiased covariance, symmetrized and
    eigenvalue-floored before inversion.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    n, d = samples.shape
    if n < d + 1:
        raise DegenerateFitError(
            f"need at least {d + 1} samples to fit a {d}-dimensional Gaussian, got {n}"
        )
    mean = samples.mean(axis=0)
    cov = np.atleast_2d(np.cov(samples, rowvar=False, ddof=1))
    cov = 0.5 * (cov + cov.T)
    if eps is None:
        eps = default_pd_floor(cov)
    cov = pd_projection(cov, eps)
    vals, vecs = np.linalg.eigh(cov)
    if vals[0] <= 0:
        raise DegenerateFitError("sample covariance is singular after projection")
    prec = (vecs / vals) @ vecs.T
    prec = 0.5 * (prec + prec.T)
    return GaussianNaturalParams(prec @ mean, prec)


def cavity_np_update(
    post_np: GaussianNaturalParams,
    pred_np: GaussianNaturalParams,
    received,
    mask_dims=None,
    eps: float | None = None,
) -> GaussianNaturalParams:
    """Message update: posterior fit minus (predictive fit + received).

    Masked dimensions (state components the likelihood cannot inform) are
    forced to exactly zero; the remaining block is eigenvalue-floored since
    the difference of two positive definite matrices need not be one.
    """
    received = list(received)
    h = post_np.h - pred_np.h - sum((r.h for r in received), np.zeros(post_np.dim))
    prec = post_np.prec - pred_np.prec - sum(
        (r.prec for r in received), np.zeros_like(post_np.prec)
    )
    prec = 0.5 * (prec + prec.T)
    if mask_dims is not None and len(mask_dims):
        mask = np.asarray(mask_dims, dtype=int)
        keep = np.setdiff1d(np.arange(post_np.dim), mask)
        h = h.copy()
        h[mask] = 0.0
        sub = prec[np.ix_(keep, keep)]
        sub = pd_projection(sub, default_pd_floor(sub) if eps is None else eps)
        out = np.zeros_like(prec)
        out[np.ix_(keep, keep)] = sub
        prec = out
    else:
        prec = pd_projection(prec, default_pd_floor(prec) if eps is None else eps)
    return GaussianNaturalParams(h, prec)


def cavity_proposal_np(trans_np: GaussianNaturalParams, received) -> GaussianNaturalParams:
    """Natural parameters of the transition-times-cavity proposal."""
    nps = combine([trans_np, *received])
    try:
        np.linalg.cholesky(nps.prec)
    except np.linalg.LinAlgError:
        raise DegenerateProposalError("proposal precision is not positive definite") from None
    return nps


class CavityProposal:
    """Sampler for the proposal proportional to p(x_k | x_{k-1}) times the
    cavity factor, with the x_{k-1}-dependent log-normalizer needed when
    the pair (x_k, x_{k-1}) moves jointly."""

    def __init__(self, model: StateSpaceModel, cavity: GaussianNaturalParams):
        self.model = model
        self.h_c = cavity.h
        self.q_inv = model.transition_precision()
        prec = self.q_inv + cavity.prec
        try:
            self._low = cholesky(prec, lower=True)
        except np.linalg.LinAlgError:
            raise DegenerateProposalError(
                "transition-plus-cavity precision is not positive definite"
            ) from None
        # A A^T = prec^{-1}; A = L^{-T} for prec = L L^T
        self._sample_mat = np.linalg.inv(self._low).T

    def _shift(self, x_prev: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        m = self.model.transition_mean(x_prev)
        return m, self.q_inv @ m + self.h_c

    def sample(self, x_prev: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        _, b = self._shift(x_prev)
        mu = cho_solve((self._low, True), b)
        return mu + self._sample_mat @ rng.standard_normal(b.shape[0])

    def log_norm(self, x_prev: np.ndarray) -> float:
        """log of the proposal's normalizer as a function of x_{k-1}, up to
        an x_{k-1}-independent constant."""
        m, b = self._shift(x_prev)
        return float(0.5 * b @ cho_solve((self._low, True), b) - 0.5 * m @ (self.q_inv @ m))


# ---------------------------------------------------------------------------
# EP filter step
# ---------------------------------------------------------------------------


@dataclass
class EpConfig:
    """Node count, EP rounds, optional eigenvalue floor, and whether node
    samplers run on a thread pool."""

    n_nodes: int = 4
    n_rounds: int = 2
    pd_floor: float | None = None
    parallel: bool = False

    def validate(self) -> None:
        if self.n_nodes < 1:
            raise ContractViolation("n_nodes must be >= 1")
        if self.n_rounds < 1:
            raise ContractViolation("n_rounds must be >= 1")


@dataclass
class EpStepResult:
    node_particles: list
    node_diagnostics: list  # final round, one per node
    round_diagnostics: list  # [round][node]
    pooled: ParticleApproximation
    pooled_mean: np.ndarray
    messages: list  # message-log records, one per (round, node)
    lik_evals: int
    grad_evals: int
    wall_ms: float


def _spawn_tree(seed, n_rounds: int, n_nodes: int):
    """Deterministic seed layout: partition stream plus one child per
    (round, node)."""
    children = as_seed_seq(seed).spawn(1 + n_rounds)
    return children[0], [r.spawn(n_nodes) for r in children[1:]]


def ep_filter_step(
    prev_per_node: list,
    batch: np.ndarray,
    model: StateSpaceModel,
    epcfg: EpConfig,
    kcfg: KernelConfig,
    seed,
    counter: EvalCounter | None = None,
    mask_dims=None,
    step_index: int = 0,
) -> EpStepResult:
    """One filtering step of the D-node message-passing sampler.

    ``prev_per_node`` holds each node's own previous particle set (nodes
    never exchange particles, only natural parameters).  Messages start
    flat at every step; each round re-runs the composite kernel against
    the node's local target with a warm-started chain, nodes exchange
    messages at the round barrier, and the last round's samples are
    pooled.  Non-flat cavities redirect the joint draw and any
    conditional-prior refinement to the cavity-informed Gaussian proposal.
    """
    epcfg.validate()
    n_nodes, n_rounds = epcfg.n_nodes, epcfg.n_rounds
    if len(prev_per_node) != n_nodes:
        raise ContractViolation("one previous particle set per node required")
    batch = model.validate_batch(batch)
    t0 = time.perf_counter()
    part_seed, node_seeds = _spawn_tree(seed, n_rounds, n_nodes)
    shards = partition_measurements(batch, n_nodes, np.random.default_rng(part_seed))

    dim = model.state_dim
    messages = [GaussianNaturalParams.zero(dim) for _ in range(n_nodes)]
    chains = [None] * n_nodes
    records = []
    round_diags = []
    node_particles = node_diags = None

    def node_task(rnd: int, d: int, received: list):
        kernel_seed, pred_seed = node_seeds[rnd][d].spawn(2)
        cavity = combine(received) if received else GaussianNaturalParams.zero(dim)
        node_cfg = kcfg
        cavity_arg = proposal = None
        if not cavity.is_zero():
            cavity_arg = cavity
            try:
                proposal = CavityProposal(model, cavity)
                if kcfg.current_proposal == "prior":
                    node_cfg = replace(kcfg, current_proposal="cavity")
            except DegenerateProposalError:
                # keep the cavity in the target but propose from the
                # transition alone
                logger.warning(
                    "node %d round %d: cavity proposal not positive definite, "
                    "falling back to the transition proposal", d, rnd,
                )
                proposal = None
        node_counter = EvalCounter()
        parts, diag, chain = run_filter_step(
            prev_per_node[d], shards[d], model, node_cfg, kernel_seed,
            counter=node_counter, cavity=cavity_arg, cavity_proposal=proposal,
            init_chain=chains[d], step_index=step_index,
        )
        post_np = np_from_samples(parts.particles, epcfg.pd_floor)
        pred = model.sample_transition_many(
            prev_per_node[d].particles, np.random.default_rng(pred_seed)
        )
        pred_np = np_from_samples(pred, epcfg.pd_floor)
        eta = cavity_np_update(post_np, pred_np, received, mask_dims, epcfg.pd_floor)
        return parts, diag, chain, eta, node_counter

    for rnd in range(n_rounds):
        received_per_node = [
            [messages[i] for i in range(n_nodes) if i != d] for d in range(n_nodes)
        ]
        if epcfg.parallel and n_nodes > 1:
            with ThreadPoolExecutor(max_workers=n_nodes) as pool:
                futures = [
                    pool.submit(node_task, rnd, d, received_per_node[d])
                    for d in range(n_nodes)
                ]
                results = [f.result() for f in futures]
        else:
            results = [node_task(rnd, d, received_per_node[d]) for d in range(n_nodes)]

        # synchronization barrier: only now do new messages become visible
        node_particles = [r[0] for r in results]
        node_diags = [r[1] for r in results]
        chains = [r[2] for r in results]
        messages = [r[3] for r in results]
        if counter is not None:
            for r in results:
                counter.merge(r[4])
        round_diags.append(node_diags)
        for d in range(n_nodes):
            records.append(message_record(step_index, rnd, d, messages[d]))

    pooled = ParticleApproximation(
        np.concatenate([p.particles for p in node_particles]), step_index
    )
    pooled_mean = np.mean([p.mean for p in node_particles], axis=0)
    lik_evals = sum(d.lik_evals for ds in round_diags for d in ds)
    grad_evals = sum(d.grad_evals for ds in round_diags for d in ds)
    return EpStepResult(
        node_particles=node_particles,
        node_diagnostics=node_diags,
        round_diagnostics=round_diags,
        pooled=pooled,
        pooled_mean=pooled_mean,
        messages=records,
        lik_evals=lik_evals,
        grad_evals=grad_evals,
        wall_ms=1000.0 * (time.perf_counter() - t0),
    )


# ---------------------------------------------------------------------------
# Message log (for logging/replay of the exchanged factors)
# ---------------------------------------------------------------------------


def message_record(k: int, rnd: int, node: int, nps: GaussianNaturalParams) -> dict:
    """Wire record with h flat and the precision's lower triangle row-major."""
    n = nps.dim
    return {
        "k": int(k),
        "round": int(rnd),
        "node": int(node),
        "dim": n,
        "h": nps.h.tolist(),
        "prec_lower": nps.prec[np.tril_indices(n)].tolist(),
    }


def record_to_np(record: dict) -> GaussianNaturalParams:
    n = int(record["dim"])
    prec = np.zeros((n, n))
    prec[np.tril_indices(n)] = record["prec_lower"]
    prec = prec + np.tril(prec, -1).T
    return GaussianNaturalParams(np.asarray(record["h"], dtype=float), prec)


def write_message_log(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_message_log(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
