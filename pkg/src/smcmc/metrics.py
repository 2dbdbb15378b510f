"""Evaluation instrumentation: KS statistic, tracking RMSE, acceptance
summaries, and exact likelihood-evaluation counting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation


class EvalCounter:
    """Exact counts of per-measurement likelihood and gradient evaluations.

    One counter is confined to a single step (or a single EP node within a
    step) and merged at synchronization points, so counts are deterministic
    under concurrent execution.
    """

    __slots__ = ("lik", "grad")

    def __init__(self):
        self.lik = 0
        self.grad = 0

    def add_lik(self, n: int) -> None:
        self.lik += int(n)

    def add_grad(self, n: int) -> None:
        self.grad += int(n)

    def merge(self, other: "EvalCounter") -> None:
        self.lik += other.lik
        self.grad += other.grad


@dataclass
class StepDiagnostics:
    """Per-step bookkeeping for one filter step.

    ``accepted``/``proposed`` count MH decisions per stage name;
    ``consumed`` holds the S_m/M fraction of every subsampled decision
    (adaptive runs only).
    """

    accepted: dict = field(default_factory=dict)
    proposed: dict = field(default_factory=dict)
    lik_evals: int = 0
    grad_evals: int = 0
    consumed: list = field(default_factory=list)
    prev_weight_fallbacks: int = 0
    wall_ms: float = 0.0

    def record(self, stage: str, accepted: bool) -> None:
        self.proposed[stage] = self.proposed.get(stage, 0) + 1
        self.accepted[stage] = self.accepted.get(stage, 0) + int(accepted)

    def acceptance(self, stage: str) -> float:
        """Acceptance fraction in [0, 1], nan if the stage never ran."""
        n = self.proposed.get(stage, 0)
        if n == 0:
            return float("nan")
        return self.accepted.get(stage, 0) / n

    def acceptance_pct(self, stage: str) -> float:
        """Acceptance rate in [0, 100], as reported in summary tables."""
        return 100.0 * self.acceptance(stage)

    def mean_consumed(self) -> float:
        return float(np.mean(self.consumed)) if self.consumed else float("nan")


def ks_statistic(samples, oracle_cdf) -> float:
    """Two-sided Kolmogorov-Smirnov distance sup |F_hat - G|.

    Evaluated at both edges of every empirical step, which is where the
    supremum of the difference between a step function and a continuous
    cdf is attained.
    """
    samples = np.sort(np.asarray(samples, dtype=float).ravel())
    n = samples.size
    if n == 0:
        raise ContractViolation("ks_statistic needs at least one sample")
    g = np.asarray(oracle_cdf(samples), dtype=float)
    upper = np.arange(1, n + 1) / n - g
    lower = g - np.arange(0, n) / n
    return float(max(upper.max(), lower.max()))


def ks_one_sided(samples, oracle_cdf) -> float:
    """One-sided variant max_x (F_hat(x) - G(x))."""
    samples = np.sort(np.asarray(samples, dtype=float).ravel())
    n = samples.size
    if n == 0:
        raise ContractViolation("ks_one_sided needs at least one sample")
    g = np.asarray(oracle_cdf(samples), dtype=float)
    return float((np.arange(1, n + 1) / n - g).max())


def rmse_positions(estimates: np.ndarray, truth: np.ndarray, position_dims) -> np.ndarray:
    """Per-step RMSE averaged over the given position dimensions.

    ``estimates`` and ``truth`` are (T, state_dim) arrays; the result is a
    length-T vector of sqrt(mean_d (err_d^2)) over ``position_dims``.
    """
    estimates = np.atleast_2d(np.asarray(estimates, float))
    truth = np.atleast_2d(np.asarray(truth, float))
    if estimates.shape != truth.shape:
        raise ContractViolation(
            f"estimates shape {estimates.shape} != truth shape {truth.shape}"
        )
    dims = np.asarray(position_dims, dtype=int)
    err = estimates[:, dims] - truth[:, dims]
    return np.sqrt(np.mean(err**2, axis=1))


def acceptance_summary(rates) -> tuple[float, float, float, float]:
    """(min, median, mean, max) of per-step acceptance rates."""
    rates = np.asarray(rates, dtype=float)
    rates = rates[~np.isnan(rates)]
    if rates.size == 0:
        raise ContractViolation("acceptance_summary needs at least one rate")
    return (
        float(rates.min()),
        float(np.median(rates)),
        float(rates.mean()),
        float(rates.max()),
    )
