import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from infodesign import gradcore as gc
from infodesign.flow import FlowConfig, init_flow
from infodesign.objective import (ContrastiveBatch, cre_gap, cre_rows, eig_lambda_derivative, eig_per_design,
                                  info_nce_lambda, loglik_matrix, nce_lambda_loss, nce_loss, nce_rows, nwj_bound,
                                  validation_loglik)
from infodesign.sim import GaussOracle

matrices = hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 9)),
                      elements=st.floats(-30, 30, allow_nan=False))


def gauss_batch(n, L, xi, seed, lam=0.0):
    sim = GaussOracle()
    rng = np.random.default_rng(seed)
    theta0 = sim.prior.sample(rng, n)
    xis = np.full((n, 1), float(xi))
    y = sim.simulate(theta0, xis, rng)
    return sim, ContrastiveBatch(theta0, sim.prior.sample(rng, L), y, xis, lam)


@given(matrices)
def test_nce_rows_never_exceed_log_l_plus_one(m):
    L = m.shape[1] - 1
    rows = nce_rows(m, L)
    assert np.all(rows <= math.log(L + 1) + 1e-12)


@given(matrices)
def test_cre_gap_identity(m):
    L = m.shape[1] - 1
    np.testing.assert_allclose(nce_rows(m, L) - cre_rows(m, L), cre_gap(m, L), atol=1e-9)


@given(matrices)
def test_cre_below_nce_exactly_when_anchor_weight_is_small(m):
    L = m.shape[1] - 1
    gap = cre_gap(m, L)
    w = np.exp(m - m.max(axis=1, keepdims=True))
    anchor_small = w[:, 0] <= w[:, 1:].mean(axis=1) * (1 + 1e-9)
    assert np.all(gap[anchor_small] >= -1e-9)


def test_cre_can_exceed_nce():
    m = np.array([[0.0, -5.0, -5.0]])
    assert cre_rows(m, 2)[0] > nce_rows(m, 2)[0]


@given(matrices, st.floats(-1, 3))
def test_two_forms_of_lambda_bound_agree(m, lam):
    L = m.shape[1] - 1
    b = ContrastiveBatch(np.zeros((m.shape[0], 1)), np.zeros((L, 1)), np.zeros((m.shape[0], 1)), lam=lam)
    a = nce_lambda_loss(None, b, m=m)
    c = info_nce_lambda(None, b, m=m)
    np.testing.assert_allclose(a.per_row, c.per_row, atol=1e-9)


def test_lambda_bound_is_linear_in_lambda_with_mean_anchor_slope(rng):
    m = rng.normal(size=(16, 8))
    b = ContrastiveBatch(np.zeros((16, 1)), np.zeros((7, 1)), np.zeros((16, 1)))
    vals = []
    for lam in (0.0, 0.5, 1.0):
        b.lam = lam
        vals.append(info_nce_lambda(None, b, m=m).value)
    assert (vals[2] - vals[0]) / 1.0 == pytest.approx(m[:, 0].mean(), abs=1e-12)
    assert vals[1] - vals[0] == pytest.approx(0.5 * (vals[2] - vals[0]), abs=1e-12)


def test_lambda_derivative_helper_is_mean_anchor_loglik():
    sim, b = gauss_batch(32, 15, 2.0, 0)
    m = gc.value(loglik_matrix(sim.likelihood(), b))
    assert eig_lambda_derivative(sim.likelihood(), b) == pytest.approx(m[:, 0].mean(), abs=1e-12)


def test_context_blind_model_gives_zero_information():
    f = init_flow(FlowConfig(y_dim=1, theta_dim=1, xi_dim=1, hidden=8))
    _, b = gauss_batch(64, 31, 2.0, 1)
    est = nce_loss(f, b)
    assert abs(est.value) < 1e-12


def test_exact_likelihood_recovers_analytic_mi():
    sim, b = gauss_batch(4000, 1023, 2.0, 2)
    est = nce_loss(sim.likelihood(), b)
    assert est.value <= est.bound_cap
    assert est.value == pytest.approx(0.5 * math.log(5.0), abs=max(0.03, 4 * est.se))


def test_entropy_corrected_cap_holds_for_exact_likelihood():
    for lam in (0.1, 1.0):
        sim, b = gauss_batch(2000, 127, 2.0, 3, lam=lam)
        est = info_nce_lambda(sim.likelihood(), b)
        cap = math.log(128) - lam * sim.conditional_entropy()
        assert est.value <= cap + 3 * est.se


def test_per_design_eig_has_one_value_per_row():
    sim, b = gauss_batch(10, 7, 1.0, 4)
    per, est = eig_per_design(sim.likelihood(), b)
    assert per.shape == (10,)
    assert est.value == pytest.approx(per.mean())


def test_per_row_contrastive_sets_are_supported(rng):
    sim = GaussOracle()
    theta0 = rng.normal(size=(5, 1))
    b = ContrastiveBatch(theta0, rng.normal(size=(5, 3, 1)), rng.normal(size=(5, 1)), np.ones((5, 1)))
    assert b.per_row and b.all_thetas().shape == (5, 4, 1)
    m = gc.value(loglik_matrix(sim.likelihood(), b))
    assert m.shape == (5, 4)


def test_loss_gradient_reaches_design_and_matches_finite_differences():
    sim, b = gauss_batch(6, 4, 1.5, 5, lam=0.5)
    model = sim.likelihood()
    rng = np.random.default_rng(5)
    u = rng.normal(size=(6, 1))

    def f(x):
        xi = gc.reshape(x, (6, 1)) if isinstance(x, gc.Tensor) else x.reshape(6, 1)
        y = b.theta0 * xi + u
        batch = ContrastiveBatch(b.theta0, b.theta_contrast, y, xi, b.lam)
        out = info_nce_lambda(model, batch)
        return out.tensor if isinstance(x, gc.Tensor) else out.value

    assert gc.grad_check(f, np.full(6, 1.5)).ok(1e-6)


def test_non_finite_loglik_names_the_row():
    class Bad:
        def log_prob(self, y, theta, xi, params=None):
            out = np.zeros(gc.value(y).shape[0])
            out[7] = np.nan
            return out

    b = ContrastiveBatch(np.zeros((3, 1)), np.zeros((2, 1)), np.zeros((3, 1)))
    with pytest.raises(FloatingPointError, match="row 2"):
        loglik_matrix(Bad(), b)


def test_batch_rejects_mismatched_rows():
    with pytest.raises(ValueError):
        ContrastiveBatch(np.zeros((3, 1)), np.zeros((2, 1)), np.zeros((4, 1)))
    with pytest.raises(ValueError):
        ContrastiveBatch(np.zeros((3, 1)), np.zeros((2, 1)), np.zeros((3, 1)), lam=float("nan"))


def test_nwj_with_optimal_critic_matches_mi():
    sim = GaussOracle()
    rng = np.random.default_rng(6)
    n, xi = 20000, 2.0
    theta = sim.prior.sample(rng, n)
    xis = np.full((n, 1), xi)
    y = sim.simulate(theta, xis, rng)
    var_y = 1 + xi**2

    def critic(y, th, x):
        lp = -0.5 * (y - th * x) ** 2
        lm = -0.5 * y**2 / var_y - 0.5 * math.log(var_y)
        return (1.0 + lp - lm)[:, 0]

    val, se = nwj_bound(critic, (y, theta, xis), rng=rng)
    assert val == pytest.approx(0.5 * math.log(5.0), abs=4 * se + 0.01)


def test_nwj_overflow_is_reported():
    def critic(y, th, x):
        return np.full(len(y), 1e4)

    with pytest.raises(FloatingPointError):
        nwj_bound(critic, (np.zeros((3, 1)), np.zeros((3, 1)), None))


def test_validation_loglik_of_exact_model_matches_entropy():
    sim = GaussOracle()
    rng = np.random.default_rng(7)
    theta = sim.prior.sample(rng, 5000)
    xis = np.full((5000, 1), 1.0)
    y = sim.simulate(theta, xis, rng)
    mean, se = validation_loglik(sim.likelihood(), y, theta, xis)
    assert mean == pytest.approx(-sim.conditional_entropy(), abs=4 * se)
    with pytest.raises(ValueError):
        validation_loglik(sim.likelihood(), np.zeros((0, 1)), np.zeros((0, 1)), np.zeros((0, 1)))
