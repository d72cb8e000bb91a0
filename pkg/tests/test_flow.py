import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infodesign import gradcore as gc
from infodesign.flow import (FlowConfig, init_flow, load_checkpoint, rq_spline_forward, rq_spline_inverse,
                             save_checkpoint, spline_params)
from infodesign.sim import stream

LOG_N0 = -0.5 * math.log(2 * math.pi)


def random_flow(y_dim=2, theta_dim=2, xi_dim=1, seed=0, scale=0.3, **kw):
    cfg = FlowConfig(y_dim=y_dim, theta_dim=theta_dim, xi_dim=xi_dim, n_bijectors=kw.pop("n_bijectors", 3),
                     hidden=kw.pop("hidden", 8), depth=kw.pop("depth", 2), seed=seed, **kw)
    f = init_flow(cfg)
    rng = np.random.default_rng(seed + 100)
    f.set_flat(f.flat() + scale * rng.standard_normal(f.n_params))
    return f


def inputs(f, n, seed=1):
    rng = np.random.default_rng(seed)
    c = f.config
    y = rng.standard_normal((n, c.y_dim)) * 2
    theta = rng.standard_normal((n, c.theta_dim))
    xi = rng.uniform(-1, 1, (n, c.xi_dim)) if c.xi_dim else None
    return y, theta, xi


def random_spline(rng, rows, bins=5, scale=1.5):
    return spline_params(rng.standard_normal((rows, bins)) * scale, rng.standard_normal((rows, bins)) * scale,
                         rng.standard_normal((rows, bins - 1)) * scale, tail_bound=3.0)


# -- splines -----------------------------------------------------------------


def test_spline_logdet_matches_central_difference_slope(rng):
    x = np.linspace(-3, 3, 101)
    p = random_spline(rng, 101)
    y, lad = rq_spline_forward(x, p)
    h = 1e-6
    yp, _ = rq_spline_forward(x + h, p)
    ym, _ = rq_spline_forward(x - h, p)
    inner = np.abs(np.abs(x) - 3) > 2e-6
    slope = (yp - ym) / (2 * h)
    np.testing.assert_allclose(lad[inner], np.log(slope[inner]), atol=1e-4)


def test_spline_identity_with_zero_raw_parameters():
    x = np.linspace(-6, 6, 41)
    p = spline_params(np.zeros((41, 4)), np.zeros((41, 4)), np.zeros((41, 3)))
    y, lad = rq_spline_forward(x, p)
    np.testing.assert_allclose(y, x, atol=1e-12)
    np.testing.assert_allclose(lad, 0.0, atol=1e-12)


def test_spline_is_identity_outside_tails(rng):
    x = np.array([-10.0, -3.5, 3.2, 50.0])
    y, lad = rq_spline_forward(x, random_spline(rng, 4))
    np.testing.assert_array_equal(y, x)
    np.testing.assert_array_equal(lad, 0.0)


def test_spline_rejects_non_finite_input(rng):
    with pytest.raises(FloatingPointError):
        rq_spline_forward(np.array([np.nan]), random_spline(rng, 1))


def test_degenerate_bins_are_clamped_not_raised():
    raw = np.array([[50.0, -50.0, -50.0, -50.0, -50.0]])
    p = spline_params(raw, raw, np.zeros((1, 4)), tail_bound=3.0)
    assert np.all(gc.value(p.widths) >= 1e-3 * 6 - 1e-12)
    y, lad = rq_spline_forward(np.array([0.3]), p)
    assert np.all(np.isfinite(lad))


@given(st.integers(0, 10_000))
def test_spline_strictly_monotone_and_invertible(seed):
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(-4, 4, 50))
    p = random_spline(rng, 1)
    # broadcast one spline over all points
    pp = type(p)(*(np.repeat(gc.value(a), 50, axis=0) if i < 5 else a for i, a in enumerate(
        (p.knots_x, p.knots_y, p.widths, p.heights, p.derivatives, p.tail_bound))))
    y, lad = rq_spline_forward(x, pp)
    assert np.all(np.diff(y) > 0)
    assert np.all(np.isfinite(lad))
    xr, ladi = rq_spline_inverse(y, pp)
    np.testing.assert_allclose(xr, x, atol=1e-9)
    np.testing.assert_allclose(ladi, -lad, atol=1e-8)


# -- flow ----------------------------------------------------------------------


def test_identity_flow_at_zero_is_standard_normal_constant():
    f = init_flow(FlowConfig(y_dim=1, theta_dim=1, xi_dim=1, hidden=8))
    lp = f.log_prob(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
    assert float(lp[0]) == pytest.approx(-0.918938533204672, abs=1e-12)


@pytest.mark.parametrize("y_dim", [1, 2, 3])
def test_fresh_flow_equals_base_density(y_dim):
    f = init_flow(FlowConfig(y_dim=y_dim, theta_dim=2, xi_dim=1, hidden=8, seed=3))
    y, theta, xi = inputs(f, 100)
    lp = f.log_prob(y, theta, xi)
    np.testing.assert_allclose(lp, y_dim * LOG_N0 - 0.5 * np.sum(y**2, axis=1), atol=1e-10)


def test_identity_flow_sample_equals_base_draw():
    f = init_flow(FlowConfig(y_dim=2, theta_dim=1, hidden=8))
    theta = np.zeros((5, 1))
    u = stream(7, "flow", 1).standard_normal((5, 2))
    np.testing.assert_allclose(f.sample(theta, seed=7), u, rtol=0, atol=1e-12)


def test_same_seed_gives_identical_parameters():
    a = init_flow(FlowConfig(y_dim=2, theta_dim=2, seed=11))
    b = init_flow(FlowConfig(y_dim=2, theta_dim=2, seed=11))
    np.testing.assert_array_equal(a.flat(), b.flat())


@pytest.mark.parametrize("y_dim,theta_dim,xi_dim", [(1, 1, 1), (2, 2, 0), (3, 2, 4)])
def test_parameter_count_closed_form(y_dim, theta_dim, xi_dim):
    cfg = FlowConfig(y_dim=y_dim, theta_dim=theta_dim, xi_dim=xi_dim, n_bijectors=5, hidden=16, depth=2, bins=4)
    assert init_flow(cfg).n_params == cfg.expected_param_count()
    f = FlowConfig(y_dim=1, theta_dim=1, xi_dim=1, n_bijectors=1, hidden=4, depth=1, bins=4, affine=False)
    # 2 inputs -> 4 hidden -> 11 spline parameters
    assert init_flow(f).n_params == 2 * 4 + 4 + 4 * 11 + 11


@pytest.mark.parametrize("y_dim", [1, 2, 3])
def test_round_trip(y_dim):
    f = random_flow(y_dim=y_dim)
    y, theta, xi = inputs(f, 64)
    u, ld = f.to_base(y, theta, xi)
    yr, ldi = f.from_base(u, theta, xi)
    assert np.max(np.abs(yr - y)) < 1e-6
    np.testing.assert_allclose(ld + ldi, 0.0, atol=1e-9)


def test_log_prob_gradients_match_finite_differences():
    f = random_flow(y_dim=2, n_bijectors=2, hidden=4)
    y, theta, xi = inputs(f, 3)
    names = list(f.params)
    shapes = [f.params[k].shape for k in names]

    def unflat(x):
        out, pos = {}, 0
        for k, s in zip(names, shapes):
            n = int(np.prod(s))
            out[k] = gc.reshape(x[pos : pos + n], s) if isinstance(x, gc.Tensor) else x[pos : pos + n].reshape(s)
            pos += n
        return out

    def by_phi(x):
        r = gc.sum(f.log_prob(y, theta, xi, params=unflat(x)))
        return r

    assert gc.grad_check(by_phi, f.flat()).ok(1e-4)
    assert gc.grad_check(lambda t: gc.sum(f.log_prob(y, gc.reshape(t, theta.shape), xi)), theta.ravel()).ok(1e-4)
    assert gc.grad_check(lambda t: gc.sum(f.log_prob(y, theta, gc.reshape(t, xi.shape))), xi.ravel()).ok(1e-4)


def test_log_prob_rejects_bad_shapes():
    f = random_flow(y_dim=2)
    y, theta, xi = inputs(f, 4)
    with pytest.raises(ValueError):
        f.log_prob(y[:, :1], theta, xi)


def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    f = random_flow(y_dim=2, xi_dim=1)
    y, theta, xi = inputs(f, 20)
    path = save_checkpoint(tmp_path / "checkpoint_5.bin", f, step=5, seed=9)
    g, header = load_checkpoint(path)
    assert header["step"] == 5 and header["seed"] == 9
    np.testing.assert_array_equal(f.log_prob(y, theta, xi), g.log_prob(y, theta, xi))


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"not a flow")
    with pytest.raises(ValueError):
        load_checkpoint(p)


@settings(max_examples=10)
@given(st.integers(0, 1000))
def test_density_integrates_to_one_in_1d(seed):
    f = random_flow(y_dim=1, theta_dim=1, xi_dim=0, seed=seed, scale=0.5)
    # Gauss-Legendre panels between the images of an even base-space grid
    u = np.linspace(-8, 8, 161)[:, None]
    knots, _ = f.from_base(u, np.full((u.size, 1), 0.4))
    knots = knots[:, 0]
    x, w = np.polynomial.legendre.leggauss(20)
    half = 0.5 * np.diff(knots)[:, None]
    pts = (0.5 * (knots[1:] + knots[:-1]))[:, None] + half * x
    lp = f.log_prob(pts.reshape(-1, 1), np.full((pts.size, 1), 0.4)).reshape(pts.shape)
    mass = float(np.sum(half * w * np.exp(lp)))
    assert mass == pytest.approx(1.0, abs=1e-3)
