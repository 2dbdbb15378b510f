"""Natural-parameter fitting, message updates, cavity proposals, and the
node-parallel filter step."""

import numpy as np
import pytest

from conftest import batch_means_se
from smcmc.ep import (
    CavityProposal,
    EpConfig,
    GaussianNaturalParams,
    _spawn_tree,
    cavity_np_update,
    cavity_proposal_np,
    combine,
    ep_filter_step,
    message_record,
    np_from_samples,
    partition_measurements,
    pd_projection,
    read_message_log,
    record_to_np,
    write_message_log,
)
from smcmc.errors import ContractViolation, DegenerateFitError, DegenerateProposalError
from smcmc.kernel import (
    JOINT_DRAW,
    REFINE_CURRENT,
    REFINE_PREV,
    KernelConfig,
    ParticleApproximation,
    run_filter_step,
)
from smcmc.metrics import EvalCounter
from smcmc.models import (
    GaussianBelief,
    LinGaussParams,
    LinearGaussianModel,
    MttModel,
    MttParams,
    kalman_step,
    mtt_simulate,
)


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------


def test_partition_even_split():
    batch = np.arange(12, dtype=float).reshape(6, 2)
    shards = partition_measurements(batch, 3, np.random.default_rng(0))
    assert sorted(len(s) for s in shards) == [2, 2, 2]
    merged = np.vstack(shards)
    assert sorted(map(tuple, merged)) == sorted(map(tuple, batch))


def test_partition_single_node():
    batch = np.arange(10, dtype=float).reshape(5, 2)
    shards = partition_measurements(batch, 1, np.random.default_rng(1))
    assert len(shards) == 1
    assert sorted(map(tuple, shards[0])) == sorted(map(tuple, batch))


def test_partition_uneven_split():
    batch = np.arange(10, dtype=float).reshape(5, 2)
    shards = partition_measurements(batch, 3, np.random.default_rng(2))
    assert sorted(len(s) for s in shards) == [1, 2, 2]


# ---------------------------------------------------------------------------
# moment fitting and projection
# ---------------------------------------------------------------------------


def test_np_from_samples_two_point():
    nps = np_from_samples(np.array([[-1.0], [1.0]]), eps=0.0)
    assert nps.h == pytest.approx([0.0], abs=1e-15)
    assert nps.prec[0, 0] == pytest.approx(0.5)  # unbiased variance is 2


def test_np_from_samples_monte_carlo():
    rng = np.random.default_rng(3)
    samples = rng.standard_normal((100_000, 3))
    nps = np_from_samples(samples)
    assert np.linalg.norm(nps.prec - np.eye(3), ord=2) < 0.05


def test_np_from_samples_affine_equivariance():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((500, 1))
    a, b = 2.5, -1.0
    fit_x = np_from_samples(x, eps=0.0)
    fit_y = np_from_samples(a * x + b, eps=0.0)
    mean_x = fit_x.to_mean_cov()[0]
    mean_y = fit_y.to_mean_cov()[0]
    assert mean_y[0] == pytest.approx(a * mean_x[0] + b, rel=1e-12)


def test_np_from_samples_too_few():
    with pytest.raises(DegenerateFitError):
        np_from_samples(np.zeros((2, 2)))


def test_pd_projection_identity_unchanged():
    eye = np.eye(3)
    out = pd_projection(eye, 1e-6)
    assert out is eye  # already above the floor: returned untouched


def test_pd_projection_clamps_negative_eigenvalue():
    out = pd_projection(np.diag([1.0, -0.1]), 1e-6)
    np.testing.assert_allclose(np.diag(out), [1.0, 1e-6], rtol=1e-9)


def test_pd_projection_idempotent():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((4, 4))
    m = a @ a.T - 0.5 * np.eye(4)
    once = pd_projection(m, 1e-8)
    twice = pd_projection(once, 1e-8)
    np.testing.assert_allclose(once, twice, atol=1e-12)


def test_pd_projection_requires_symmetry():
    with pytest.raises(ContractViolation):
        pd_projection(np.array([[1.0, 2.0], [0.0, 1.0]]), 1e-8)


# ---------------------------------------------------------------------------
# message update
# ---------------------------------------------------------------------------


def test_cavity_np_update_no_received():
    post = GaussianNaturalParams(np.array([3.0]), np.array([[3.0]]))
    pred = GaussianNaturalParams(np.array([1.0]), np.array([[1.0]]))
    out = cavity_np_update(post, pred, [], eps=0.0)
    assert out.h[0] == pytest.approx(2.0)
    assert out.prec[0, 0] == pytest.approx(2.0)


def test_cavity_np_update_scalar_arithmetic():
    post = GaussianNaturalParams(np.array([3.0]), np.array([[3.0]]))
    pred = GaussianNaturalParams(np.array([1.0]), np.array([[1.0]]))
    other = GaussianNaturalParams(np.array([1.0]), np.array([[1.0]]))
    out = cavity_np_update(post, pred, [other], eps=0.0)
    assert out.prec[0, 0] == pytest.approx(1.0)
    assert out.h[0] == pytest.approx(1.0)


def test_cavity_np_update_masking():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((4, 4))
    post = GaussianNaturalParams(rng.standard_normal(4), a @ a.T + 4 * np.eye(4))
    pred = GaussianNaturalParams(rng.standard_normal(4), np.eye(4))
    out = cavity_np_update(post, pred, [], mask_dims=[2, 3])
    assert np.all(out.h[2:] == 0.0)
    assert np.all(out.prec[2:, :] == 0.0)
    assert np.all(out.prec[:, 2:] == 0.0)
    assert np.all(np.linalg.eigvalsh(out.prec) >= -1e-12)


# ---------------------------------------------------------------------------
# cavity proposal
# ---------------------------------------------------------------------------


def test_cavity_proposal_np_no_messages_is_transition():
    trans = GaussianNaturalParams(np.array([2.0]), np.array([[12.5]]))
    out = cavity_proposal_np(trans, [])
    assert out.prec[0, 0] == pytest.approx(12.5)
    assert out.h[0] == pytest.approx(2.0)


def test_cavity_proposal_np_scalar_product():
    x_prev = 0.6
    trans = GaussianNaturalParams(np.array([0.9 * x_prev / 0.08]), np.array([[1 / 0.08]]))
    msg = GaussianNaturalParams(np.array([0.0]), np.array([[1.0]]))
    out = cavity_proposal_np(trans, [msg])
    assert out.prec[0, 0] == pytest.approx(13.5)
    mean, cov = out.to_mean_cov()
    assert mean[0] == pytest.approx((0.9 * x_prev / 0.08) / 13.5)
    assert cov[0, 0] == pytest.approx(1 / 13.5)


def test_cavity_proposal_np_rejects_indefinite():
    trans = GaussianNaturalParams(np.zeros(1), np.array([[0.5]]))
    bad = GaussianNaturalParams(np.zeros(1), np.array([[-1.0]]))
    with pytest.raises(DegenerateProposalError):
        cavity_proposal_np(trans, [bad])


def test_cavity_proposal_density_matches_product_on_grid():
    model = LinearGaussianModel(LinGaussParams())
    cavity = GaussianNaturalParams(np.array([0.3]), np.array([[1.2]]))
    prop = CavityProposal(model, cavity)
    x_prev = np.array([0.5])
    grid = np.linspace(-4, 4, 60_001)
    log_prod = np.array(
        [model.log_transition(np.array([g]), x_prev) + cavity.log_eval(np.array([g]))
         for g in grid]
    )
    prod = np.exp(log_prod - log_prod.max())
    prod /= np.trapezoid(prod, grid)
    prec = 1 / 0.08 + 1.2
    mu = (0.9 * 0.5 / 0.08 + 0.3) / prec
    gauss = np.sqrt(prec / (2 * np.pi)) * np.exp(-0.5 * prec * (grid - mu) ** 2)
    l1 = np.trapezoid(np.abs(prod - gauss), grid)
    assert l1 < 1e-6
    # sampling moments agree with the analytic product
    rng = np.random.default_rng(7)
    draws = np.array([prop.sample(x_prev, rng)[0] for _ in range(20_000)])
    assert draws.mean() == pytest.approx(mu, abs=4 * np.sqrt(1 / prec / 20_000))
    assert draws.var() == pytest.approx(1 / prec, rel=0.05)


def test_cavity_proposal_log_norm_matches_quadrature():
    model = LinearGaussianModel(LinGaussParams())
    cavity = GaussianNaturalParams(np.array([-0.2]), np.array([[0.7]]))
    prop = CavityProposal(model, cavity)
    grid = np.linspace(-6, 6, 120_001)

    def numeric_log_norm(x_prev):
        vals = np.array(
            [model.log_transition(np.array([g]), np.array([x_prev]))
             + cavity.log_eval(np.array([g])) for g in grid]
        )
        peak = vals.max()
        return peak + np.log(np.trapezoid(np.exp(vals - peak), grid))

    # log-normalizer differences must match quadrature (constants cancel)
    a, b = 0.3, -0.8
    analytic = prop.log_norm(np.array([a])) - prop.log_norm(np.array([b]))
    numeric = numeric_log_norm(a) - numeric_log_norm(b)
    assert analytic == pytest.approx(numeric, abs=1e-8)


# ---------------------------------------------------------------------------
# Gaussian fixed point (exact-moment message passing)
# ---------------------------------------------------------------------------


def test_one_round_recovers_exact_likelihood_factors():
    # with exact Gaussian moments in place of sample fits, one round makes
    # each message equal its shard's exact likelihood factor, so the
    # cavity-corrected sum reproduces the full-data posterior
    rng = np.random.default_rng(8)
    params = LinGaussParams()
    r = 2.0
    prior = GaussianNaturalParams(np.array([0.4 / 0.3]), np.array([[1 / 0.3]]))
    shards = [rng.normal(0.3, np.sqrt(r), size=(m,)) for m in (40, 60, 25, 75)]
    lik_np = [
        GaussianNaturalParams(np.array([z.sum() / r]), np.array([[len(z) / r]]))
        for z in shards
    ]
    messages = []
    for d in range(4):
        received = []  # flat start
        post = combine([prior, lik_np[d], *received])
        pred = prior
        messages.append(cavity_np_update(post, pred, received, eps=0.0))
    for msg, lik in zip(messages, lik_np):
        np.testing.assert_allclose(msg.h, lik.h, atol=1e-8)
        np.testing.assert_allclose(msg.prec, lik.prec, atol=1e-8)
    pooled = combine([prior, *messages])
    full = combine([prior, *lik_np])
    np.testing.assert_allclose(pooled.h, full.h, atol=1e-8)
    np.testing.assert_allclose(pooled.prec, full.prec, atol=1e-8)


# ---------------------------------------------------------------------------
# EP filter step
# ---------------------------------------------------------------------------


def _lg_setup(seed=9, m=120, n_prev=200):
    model = LinearGaussianModel(LinGaussParams())
    rng = np.random.default_rng(seed)
    prev = ParticleApproximation(0.2 + 0.1 * rng.standard_normal((n_prev, 1)))
    batch = 0.25 + np.sqrt(2.0) * rng.standard_normal((m, 1))
    return model, prev, batch


def _lg_kcfg(n=200, nb=20):
    return KernelConfig(
        n_retained=n, n_burn_in=nb,
        stages=(REFINE_PREV, REFINE_CURRENT), prev_proposal="uniform",
    )


def test_single_node_matches_plain_filter_bitwise():
    model, prev, batch = _lg_setup()
    kcfg = _lg_kcfg()
    epcfg = EpConfig(n_nodes=1, n_rounds=1)
    result = ep_filter_step([prev], batch, model, epcfg, kcfg, seed=10)
    # reproduce the node's shard and kernel stream and run it directly
    part_seed, node_seeds = _spawn_tree(10, 1, 1)
    shard = partition_measurements(batch, 1, np.random.default_rng(part_seed))[0]
    kernel_seed, _ = node_seeds[0][0].spawn(2)
    plain, _, _ = run_filter_step(prev, shard, model, kcfg, kernel_seed)
    assert np.array_equal(result.pooled.particles, plain.particles)


def test_ep_parallel_bit_identical_to_serial():
    model, prev, batch = _lg_setup()
    kcfg = _lg_kcfg()
    prevs = [prev] + [
        ParticleApproximation(prev.particles + 0.01 * d) for d in (1, 2, 3)
    ]
    serial = ep_filter_step(
        prevs, batch, model, EpConfig(n_nodes=4, n_rounds=2, parallel=False), kcfg, seed=11
    )
    parallel = ep_filter_step(
        prevs, batch, model, EpConfig(n_nodes=4, n_rounds=2, parallel=True), kcfg, seed=11
    )
    for a, b in zip(serial.node_particles, parallel.node_particles):
        assert np.array_equal(a.particles, b.particles)
    assert serial.messages == parallel.messages
    assert serial.lik_evals == parallel.lik_evals


def test_ep_pooled_mean_identity():
    model, prev, batch = _lg_setup()
    result = ep_filter_step(
        [prev] * 3, batch, model, EpConfig(n_nodes=3, n_rounds=1), _lg_kcfg(), seed=12
    )
    assert result.pooled_mean[0] == pytest.approx(result.pooled.particles.mean(), abs=1e-12)


def test_ep_eval_counts_per_node():
    model, prev, batch = _lg_setup(m=120)
    n, nb = 150, 15
    kcfg = _lg_kcfg(n=n, nb=nb)
    epcfg = EpConfig(n_nodes=4, n_rounds=2)
    counter = EvalCounter()
    result = ep_filter_step([prev] * 4, batch, model, epcfg, kcfg, seed=13, counter=counter)
    m_d = 30  # balanced shards of 120 across 4 nodes
    # one data-touching stage; the warm-started second round skips the
    # initial cache fill
    per_node = 2 * (n + nb) * m_d + m_d
    assert result.lik_evals == 4 * per_node
    assert counter.lik == result.lik_evals


def test_ep_matches_kalman_mean_lin_gauss():
    model, prev, batch = _lg_setup(m=200, n_prev=500)
    params = model.params
    belief_prev = GaussianBelief(np.array([0.2]), np.array([[0.01]]))
    rng = np.random.default_rng(14)
    prevs = [
        ParticleApproximation(
            belief_prev.mean + belief_prev.std * rng.standard_normal((500, 1))
        )
        for _ in range(4)
    ]
    oracle = kalman_step(belief_prev, params, batch)
    kcfg = KernelConfig(
        n_retained=500, n_burn_in=50,
        stages=(REFINE_PREV, REFINE_CURRENT), prev_proposal="uniform",
    )
    result = ep_filter_step(
        prevs, batch, model, EpConfig(n_nodes=4, n_rounds=2), kcfg, seed=15
    )
    se = np.sqrt(
        np.mean([batch_means_se(p.particles[:, 0]) ** 2 for p in result.node_particles])
        / 4
    )
    assert abs(result.pooled_mean[0] - oracle.mean[0]) < 3 * max(se, 1e-4)


def test_ep_velocity_mask_and_psd_messages():
    params = MttParams(n_targets=2, lambda_x=30.0, lambda_c=60.0, region_x=60.0, region_y=60.0)
    model = MttModel(params)
    truth, batches, _ = mtt_simulate(params, 1, np.random.default_rng(16))
    rng = np.random.default_rng(17)
    scale = np.concatenate([np.full(4, 1.0), np.full(4, 0.5)])
    prevs = [
        ParticleApproximation(truth[0] + rng.standard_normal((150, 8)) * scale)
        for _ in range(2)
    ]
    nt = params.n_targets
    blocks = [np.array([t, nt + t, 2 * nt + t, 3 * nt + t]) for t in range(nt)]
    kcfg = KernelConfig(
        n_retained=150, n_burn_in=15,
        stages=(JOINT_DRAW, REFINE_CURRENT),
        blocks=blocks, current_proposal="random_walk", rw_cov=0.01 * np.eye(4),
    )
    result = ep_filter_step(
        prevs, batches[0], model, EpConfig(n_nodes=2, n_rounds=2), kcfg, seed=18,
        mask_dims=model.velocity_dims(),
    )
    assert len(result.messages) == 4  # one per (round, node)
    for rec in result.messages:
        nps = record_to_np(rec)
        assert np.all(nps.h[4:] == 0.0)
        assert np.all(nps.prec[4:, :] == 0.0)
        assert np.all(nps.prec[:, 4:] == 0.0)
        assert np.all(np.linalg.eigvalsh(nps.prec) >= -1e-10)


def test_message_log_roundtrip(tmp_path):
    rng = np.random.default_rng(19)
    a = rng.standard_normal((3, 3))
    nps = GaussianNaturalParams(rng.standard_normal(3), a @ a.T)
    rec = message_record(4, 1, 2, nps)
    assert rec["k"] == 4 and rec["round"] == 1 and rec["node"] == 2 and rec["dim"] == 3
    assert len(rec["prec_lower"]) == 6  # lower triangle of a 3x3
    path = tmp_path / "messages.jsonl"
    write_message_log(path, [rec])
    loaded = read_message_log(path)
    assert loaded == [rec]
    back = record_to_np(loaded[0])
    np.testing.assert_allclose(back.prec, nps.prec, atol=1e-12)
    np.testing.assert_allclose(back.h, nps.h, atol=1e-12)


def test_ep_config_validation():
    with pytest.raises(ContractViolation):
        EpConfig(n_nodes=0).validate()
    with pytest.raises(ContractViolation):
        EpConfig(n_rounds=0).validate()
    model, prev, batch = _lg_setup()
    with pytest.raises(ContractViolation):
        ep_filter_step([prev], batch, model, EpConfig(n_nodes=2), _lg_kcfg(), seed=20)
