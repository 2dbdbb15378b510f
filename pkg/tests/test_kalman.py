"""Kalman oracle: closed-form values, conjugate-update algebra, ordering."""

import numpy as np
import pytest

from smcmc.models import GaussianBelief, LinGaussParams, kalman_step


@pytest.fixture()
def params():
    return LinGaussParams()


def test_single_measurement_closed_form(params):
    belief = kalman_step(GaussianBelief(np.zeros(1), np.eye(1)), params, np.array([[1.0]]))
    assert belief.mean[0] == pytest.approx(0.89 / 2.89, rel=1e-12)
    assert belief.cov[0, 0] == pytest.approx(0.89 * (1 - 0.89 / 2.89), rel=1e-12)


def test_empty_batch_is_pure_prediction(params):
    belief = kalman_step(GaussianBelief(np.array([2.0]), np.array([[0.5]])), params,
                         np.empty((0, 1)))
    assert belief.mean[0] == pytest.approx(0.9 * 2.0)
    assert belief.cov[0, 0] == pytest.approx(0.81 * 0.5 + 0.08)


def test_repeated_measurement_equals_tighter_noise(params):
    m = 8
    z = 0.7
    batch = np.full((m, 1), z)
    b1 = kalman_step(GaussianBelief(np.zeros(1), np.eye(1)), params, batch)
    # conjugate algebra: M identical measurements == one with noise R/M
    tight = LinGaussParams(r_obs=params.r_obs[0, 0] / m)
    b2 = kalman_step(GaussianBelief(np.zeros(1), np.eye(1)), tight, np.array([[z]]))
    assert b1.mean[0] == pytest.approx(b2.mean[0], rel=1e-12)
    assert b1.cov[0, 0] == pytest.approx(b2.cov[0, 0], rel=1e-12)


def test_batch_order_invariance(params):
    rng = np.random.default_rng(0)
    batch = rng.normal(size=(100, 1))
    b1 = kalman_step(GaussianBelief(np.zeros(1), np.eye(1)), params, batch)
    b2 = kalman_step(GaussianBelief(np.zeros(1), np.eye(1)), params, batch[::-1])
    assert abs(b1.mean[0] - b2.mean[0]) < 1e-10
    assert abs(b1.cov[0, 0] - b2.cov[0, 0]) < 1e-10


def test_sequential_updates_match_batch(params):
    rng = np.random.default_rng(1)
    batch = rng.normal(size=(25, 1))
    together = kalman_step(GaussianBelief(np.zeros(1), np.eye(1)), params, batch)
    # one-by-one conjugate updates after a single prediction
    no_dynamics = LinGaussParams(a=1.0, q=1e-300, h=1.0, r_obs=2.0)
    belief = kalman_step(GaussianBelief(np.zeros(1), np.eye(1)), params, batch[:1])
    for z in batch[1:]:
        belief = kalman_step(belief, no_dynamics, z[None, :])
    assert belief.mean[0] == pytest.approx(together.mean[0], rel=1e-9)
    assert belief.cov[0, 0] == pytest.approx(together.cov[0, 0], rel=1e-6)
