import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from infodesign import gradcore as gc
from infodesign.config import TrainConfig
from infodesign.designopt import (DesignDistribution, GroupSettings, OptimizerState, PlateauScheduler, RunRecord,
                                  TrainingError, clip_by_global_norm, optimizer_step, sample_designs,
                                  sigma_schedule, train_round, truncated_normal)
from infodesign.experiments import make_config
from infodesign.designopt import build_flow
from infodesign.sim import GaussOracle, stream


def test_sigma_schedule_examples():
    d = DesignDistribution([0.0], [-1.0], [1.0], 2.0, 0.1, 4.0, 100)
    assert sigma_schedule(d, 0) == 2.0
    assert sigma_schedule(d, 50) == pytest.approx(0.1 + 1.9 * math.exp(-2.0), abs=1e-12)
    assert sigma_schedule(d, 50) == pytest.approx(0.3571, abs=1e-4)


@given(st.floats(0.01, 10), st.floats(0, 0.009), st.floats(0.5, 10), st.integers(2, 500))
def test_sigma_schedule_strictly_decreasing_and_bounded(s0, s1, rho, N):
    d = DesignDistribution([0.0], [-1.0], [1.0], s0, s1, rho, N)
    vals = np.array([sigma_schedule(d, n) for n in range(N + 1)])
    assert np.all(np.diff(vals) < 0)
    assert np.all((vals >= s1) & (vals <= s0))


def test_point_mass_limit():
    d = DesignDistribution([3.7], [-1e12], [1e12])
    xi = sample_designs(d, 50, seed=0)
    np.testing.assert_array_equal(xi, 3.7)


def test_degenerate_bounds_rejected():
    with pytest.raises(ValueError):
        DesignDistribution([0.0], [1.0], [1.0])


def test_sample_mean_of_centred_truncated_normal():
    d = DesignDistribution([0.0], [-100.0], [100.0], 2.0, 2.0, 1.0, 1)
    xi = sample_designs(d, 100_000, seed=1)[:, 0]
    assert abs(xi.mean()) < 3 * 2.0 / math.sqrt(xi.size)


def test_truncated_normal_matches_rejection_sampling():
    mu, sigma, lo, hi = 1.0, 2.0, -0.5, 4.0
    d = DesignDistribution([mu], [lo], [hi], sigma, sigma, 1.0, 1)
    xi = np.sort(sample_designs(d, 100_000, seed=2)[:, 0])
    rng = np.random.default_rng(3)
    draws = mu + sigma * rng.standard_normal(400_000)
    ref = draws[(draws >= lo) & (draws <= hi)][:100_000]
    assert stats.ks_2samp(xi, ref).statistic < 0.01
    assert xi.min() >= lo and xi.max() <= hi


@given(st.floats(-9, 9), st.floats(0.1, 20), st.integers(0, 1000))
def test_designs_always_within_bounds(mu, sigma, seed):
    d = DesignDistribution([mu], [-10.0], [10.0], sigma, sigma, 1.0, 1)
    xi = sample_designs(d, 200, seed=seed)
    assert np.all(xi >= -10.0) and np.all(xi <= 10.0)


@pytest.mark.parametrize("mu,sigma", [(0.0, 1.0), (8.0, 3.0), (-9.5, 0.7), (2.0, 0.0)])
def test_reparameterised_design_gradient(mu, sigma):
    v = stream(4, "designopt", 0).random((64, 1))

    def f(m):
        out = truncated_normal(m, sigma, v, np.array([-10.0]), np.array([10.0]))
        return gc.sum(gc.square(out) * 0.1) if isinstance(m, gc.Tensor) else float(np.sum(0.1 * gc.value(out) ** 2))

    assert gc.grad_check(f, np.array([mu])).ok(1e-3)


def test_clip_to_threshold():
    g = {"a": np.array([30.0, 40.0])}
    clipped, norm = clip_by_global_norm(g, 5.0)
    assert norm == 50.0
    assert np.linalg.norm(clipped["a"]) == pytest.approx(5.0, abs=1e-12)


def test_first_adam_step_is_lr_times_sign():
    st_ = OptimizerState({"xi": GroupSettings(0.01, beta2=0.95)})
    out = optimizer_step(st_, {"mu": np.array([1.0, 2.0])}, {"mu": np.array([3.0, -1e-3])}, "xi")
    np.testing.assert_allclose(out["mu"], [1.0 - 0.01, 2.0 + 0.01], atol=1e-9)


def test_zero_gradient_leaves_parameters():
    st_ = OptimizerState({"phi": GroupSettings(0.1)}, clip=5.0)
    p = {"w": np.array([0.3, -0.2])}
    out = optimizer_step(st_, p, {"w": np.zeros(2)}, "phi")
    np.testing.assert_array_equal(out["w"], p["w"])


def test_non_finite_gradient_rejected():
    st_ = OptimizerState({"phi": GroupSettings(0.1)})
    with pytest.raises(FloatingPointError):
        optimizer_step(st_, {"w": np.zeros(1)}, {"w": np.array([np.inf])}, "phi")


def test_plateau_scheduler_reduces_and_floors():
    s = PlateauScheduler(factor=0.8, patience=5, window=1, min_scale=0.5)
    scales = [s.update(1.0) for _ in range(40)]
    assert scales[0] == 1.0
    assert min(scales) == 0.5
    assert scales[6] == pytest.approx(0.8)
    s2 = PlateauScheduler(factor=0.8, patience=5, window=1)
    assert all(s2.update(10.0 - k) == 1.0 for k in range(40))


def _gauss_setup(seed=0, steps=20, **train):
    cfg = make_config("gauss-oracle", train=dict(steps=steps, batch_size=8, n_contrastive=7, **train),
                      flow=dict(hidden=4, depth=1, n_bijectors=1), pool_size=64)
    sim = GaussOracle()
    flow = build_flow(sim, cfg, seed)
    sampler = sim.prepare_round(sim.prior.sample(stream(seed, "experiments", 0), 64), seed)
    return cfg, sim, flow, sampler


def test_frozen_optimizer_keeps_state_and_checkpoints_best_draw():
    cfg, sim, flow, sampler = _gauss_setup(lr=0.0, design_lr=0.0, sigma_start=1.0, sigma_end=0.5)
    phi0 = flow.flat().copy()
    d = DesignDistribution([2.0], sim.low, sim.high, 1.0, 0.5, 5.0, 20)
    ck, flow, rec = train_round(sampler, flow, d, cfg.train, seed=0)
    np.testing.assert_array_equal(flow.flat(), phi0)
    np.testing.assert_array_equal(d.mu, [2.0])
    assert ck.eig_star == rec.column("eig").max()


def test_training_is_deterministic():
    out = []
    for _ in range(2):
        cfg, sim, flow, sampler = _gauss_setup(design_lr=0.05, sigma_start=1.0, sigma_end=0.1)
        d = DesignDistribution([1.0], sim.low, sim.high, 1.0, 0.1, 5.0, 20)
        ck, flow, rec = train_round(sampler, flow, d, cfg.train, seed=3)
        out.append((rec.steps, flow.flat()))
    assert out[0][0] == out[1][0]
    np.testing.assert_array_equal(out[0][1], out[1][1])


def test_checkpoint_is_max_step_eig_and_record_round_trips(tmp_path):
    cfg, sim, flow, sampler = _gauss_setup(steps=30, design_lr=0.1)
    d = DesignDistribution([1.0], sim.low, sim.high)
    ck, flow, rec = train_round(sampler, flow, d, cfg.train, seed=1)
    assert ck.eig_star == rec.column("eig").max()
    assert rec.steps[-1]["eig_star"] == ck.eig_star
    rec.write_csv(tmp_path / "m.csv")
    back = RunRecord.read_csv(tmp_path / "m.csv")
    assert back.steps == rec.steps


def test_record_requires_increasing_steps():
    r = RunRecord(0)
    r.append({"step": 0})
    with pytest.raises(ValueError):
        r.append({"step": 0})


def test_non_finite_loss_aborts_with_dump():
    cfg, sim, flow, sampler = _gauss_setup(steps=3)

    class BadSampler:
        def __init__(self, inner):
            self.sim, self.pool = inner.sim, inner.pool

        def simulate(self, idx, xi, rng):
            return np.full((len(idx), 1), np.nan)

    d = DesignDistribution([1.0], sim.low, sim.high)
    with pytest.raises(TrainingError) as err:
        train_round(BadSampler(sampler), flow, d, cfg.train, seed=0)
    assert err.value.step == 0


def test_simulator_failure_propagates_with_step():
    cfg, sim, flow, sampler = _gauss_setup(steps=3)

    class Boom:
        def __init__(self, inner):
            self.sim, self.pool = inner.sim, inner.pool

        def simulate(self, idx, xi, rng):
            raise RuntimeError("boom")

    with pytest.raises(TrainingError, match="boom"):
        train_round(Boom(sampler), flow, DesignDistribution([1.0], sim.low, sim.high), cfg.train, seed=0)


def test_train_config_defaults_follow_table():
    t = TrainConfig()
    assert (t.clip, t.lr_anneal, t.final_lr, t.xi_beta2) == (5.0, 0.8, 1e-4, 0.95)
