"""Experiment configuration: flat dotted-key text documents.

A config file is a sequence of ``section.key = value`` lines (``#`` starts
a comment).  Omitted keys fall back to the benchmark defaults listed in
the README; unknown keys and invariant violations raise ``ConfigError``
naming the offending key path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError
from .kernel import JOINT_DRAW, REFINE_CURRENT, REFINE_PREV, KernelConfig
from .models import LinGaussParams, MttParams
from .subsampling import SubsampleParams

ALGOS = ("smcmc", "as_smcmc", "ep_smcmc")
MODELS = ("lin_gauss", "mtt")


@dataclass
class LinGaussSection:
    a: float = 0.9
    q: float = 0.08
    h: float = 1.0
    r_obs: float = 2.0
    m: int = 500
    init_std: float = 1.0


@dataclass
class MttSection:
    n_targets: int = 3
    lambda_x: float = 1500.0
    lambda_c: float = 4000.0
    area: float = 4.0e4
    sigma_x: float = 0.5
    t_s: float = 1.0
    meas_var: float = 1.0
    init_pos_std: float = 1.0
    init_vel_std: float = 0.5


@dataclass
class KernelSection:
    n: int = 4000
    n_burn: int | None = None  # None -> ceil(0.1 * n)
    stages: tuple | None = None  # None -> model default
    current_proposal: str | None = None  # None -> model default
    prev_proposal: str = "uniform"
    rw_var: float = 0.01

    def burn_in(self) -> int:
        return self.n_burn if self.n_burn is not None else math.ceil(0.1 * self.n)


@dataclass
class SubsampleSection:
    gamma_s: float = 1.2
    delta_s: float = 0.1
    p_s: float = 2.0


@dataclass
class EpSection:
    nodes: int = 4
    iterations: int = 2
    node_n: int = 500
    node_n_burn: int | None = None  # None -> ceil(0.1 * node_n)
    parallel: bool = False

    def burn_in(self) -> int:
        return self.node_n_burn if self.node_n_burn is not None else math.ceil(0.1 * self.node_n)


@dataclass
class ExperimentConfig:
    model: str = "lin_gauss"
    algo: str = "smcmc"
    runs: int = 10
    steps: int = 20
    seed: int = 0
    lin_gauss: LinGaussSection = field(default_factory=LinGaussSection)
    mtt: MttSection = field(default_factory=MttSection)
    kernel: KernelSection = field(default_factory=KernelSection)
    subsample: SubsampleSection = field(default_factory=SubsampleSection)
    ep: EpSection = field(default_factory=EpSection)

    # -- derived objects ---------------------------------------------------

    def model_params(self):
        if self.model == "lin_gauss":
            s = self.lin_gauss
            return LinGaussParams(a=s.a, q=s.q, h=s.h, r_obs=s.r_obs)
        s = self.mtt
        side = math.sqrt(s.area)
        return MttParams(
            n_targets=s.n_targets,
            t_s=s.t_s,
            sigma_x=s.sigma_x,
            meas_cov=s.meas_var * np.eye(2),
            lambda_x=s.lambda_x,
            lambda_c=s.lambda_c,
            region_x=side,
            region_y=side,
        )

    def default_stages(self) -> tuple:
        if self.model == "lin_gauss":
            return (REFINE_PREV, REFINE_CURRENT)
        return (JOINT_DRAW, REFINE_CURRENT)

    def kernel_config(self, n: int | None = None, n_burn: int | None = None) -> KernelConfig:
        k = self.kernel
        stages = k.stages if k.stages is not None else self.default_stages()
        proposal = k.current_proposal
        if proposal is None:
            proposal = "prior" if self.model == "lin_gauss" else "random_walk"
        blocks = None
        rw_cov: float | np.ndarray = k.rw_var
        if self.model == "mtt" and proposal == "random_walk":
            nt = self.mtt.n_targets
            # one block per target: its two positions and two velocities
            blocks = [np.array([t, nt + t, 2 * nt + t, 3 * nt + t]) for t in range(nt)]
            rw_cov = k.rw_var * np.eye(4)
        return KernelConfig(
            n_retained=n if n is not None else k.n,
            n_burn_in=n_burn if n_burn is not None else k.burn_in(),
            stages=tuple(stages),
            blocks=blocks,
            current_proposal=proposal,
            rw_cov=rw_cov,
            prev_proposal=k.prev_proposal,
        )

    def subsample_params(self) -> SubsampleParams:
        s = self.subsample
        return SubsampleParams(growth=s.gamma_s, delta=s.delta_s, power=s.p_s)


_STAGE_NAMES = {JOINT_DRAW, REFINE_PREV, REFINE_CURRENT}


def _parse_bool(text: str, key: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _coerce(key: str, text: str, kind):
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {text!r}") from None
    return text


# key -> (section attr or None, field name, type)
_SCHEMA = {
    "model": (None, "model", str),
    "algo": (None, "algo", str),
    "runs": (None, "runs", int),
    "steps": (None, "steps", int),
    "seed": (None, "seed", int),
}
for _sec, _cls in (
    ("lin_gauss", LinGaussSection),
    ("mtt", MttSection),
    ("kernel", KernelSection),
    ("subsample", SubsampleSection),
    ("ep", EpSection),
):
    for _f in fields(_cls):
        _SCHEMA[f"{_sec}.{_f.name}"] = (_sec, _f.name, _f.type)


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a config document."""
    cfg = ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.partition("#")[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        section, name, _ = _SCHEMA[key]
        target = cfg if section is None else getattr(cfg, section)
        setattr(target, name, _convert(key, name, value))
    validate_config(cfg)
    return cfg


def _convert(key: str, name: str, value: str):
    if key in ("kernel.stages",):
        stages = tuple(s.strip() for s in value.split(",") if s.strip())
        bad = [s for s in stages if s not in _STAGE_NAMES]
        if bad:
            raise ConfigError(f"{key}: unknown stage(s) {bad}")
        return stages
    if key in ("kernel.n_burn", "ep.node_n_burn"):
        return _coerce(key, value, int)
    if key == "ep.parallel":
        return _parse_bool(value, key)
    if key in ("model", "algo", "kernel.current_proposal", "kernel.prev_proposal"):
        return value.replace("-", "_")
    _, _, kind = _SCHEMA[key]
    if kind in ("int", int):
        return _coerce(key, value, int)
    if kind in ("float", float):
        return _coerce(key, value, float)
    return value


def validate_config(cfg: ExperimentConfig) -> None:
    def fail(key, msg):
        raise ConfigError(f"{key}: {msg}")

    if cfg.model not in MODELS:
        fail("model", f"must be one of {MODELS}, got {cfg.model!r}")
    if cfg.algo not in ALGOS:
        fail("algo", f"must be one of {ALGOS}, got {cfg.algo!r}")
    if cfg.runs < 1:
        fail("runs", "must be >= 1")
    if cfg.steps < 1:
        fail("steps", "must be >= 1")
    if cfg.seed < 0:
        fail("seed", "must be >= 0")
    if cfg.lin_gauss.m < 0:
        fail("lin_gauss.m", "must be >= 0")
    if cfg.lin_gauss.q <= 0 or cfg.lin_gauss.r_obs <= 0:
        fail("lin_gauss.q", "noise variances must be > 0")
    if cfg.mtt.n_targets < 1:
        fail("mtt.n_targets", "must be >= 1")
    if cfg.mtt.lambda_x < 0 or cfg.mtt.lambda_c < 0:
        fail("mtt.lambda_x", "rates must be >= 0")
    if cfg.mtt.area <= 0:
        fail("mtt.area", "must be > 0")
    if cfg.kernel.n < 1:
        fail("kernel.n", "must be >= 1")
    if cfg.kernel.burn_in() < 0:
        fail("kernel.n_burn", "must be >= 0")
    if cfg.kernel.prev_proposal not in ("weighted", "uniform"):
        fail("kernel.prev_proposal", f"unknown value {cfg.kernel.prev_proposal!r}")
    if cfg.kernel.current_proposal not in (None, "prior", "random_walk"):
        fail("kernel.current_proposal", f"unknown value {cfg.kernel.current_proposal!r}")
    if cfg.kernel.rw_var <= 0:
        fail("kernel.rw_var", "must be > 0")
    if not 0.0 < cfg.subsample.delta_s < 1.0:
        fail("subsample.delta_s", f"must be in (0, 1), got {cfg.subsample.delta_s}")
    if cfg.subsample.gamma_s <= 1.0:
        fail("subsample.gamma_s", "must be > 1")
    if cfg.subsample.p_s <= 1.0:
        fail("subsample.p_s", "must be > 1")
    if cfg.ep.nodes < 1:
        fail("ep.nodes", "must be >= 1")
    if cfg.ep.iterations < 1:
        fail("ep.iterations", "must be >= 1")
    if cfg.ep.node_n < 1:
        fail("ep.node_n", "must be >= 1")
    # exercise model parameter construction so bad combinations fail early
    cfg.model_params()
    cfg.kernel_config().validate(
        1 if cfg.model == "lin_gauss" else 4 * cfg.mtt.n_targets
    )
