"""Desk-scale experiment recipes shared by the CLI, scripts and acceptance tests.

Each function runs one cell (one seed, one setting) and returns plain
numbers plus the training record, so callers can aggregate across seeds.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .config import McmcConfig, RunConfig, parse_config
from .designopt import DesignDistribution, build_flow, evaluate_eig, initial_mu, train_round
from .inference import (exact_gauss_posterior, inflate_variance, sbc_coverage, surrogate_posterior)
from .objective import ContrastiveBatch, nce_loss, validation_loglik
from .sim import GaussOracle, Simulator, make_simulator, stream


def make_config(task: str, train: dict | None = None, flow: dict | None = None, **top) -> RunConfig:
    raw = {"task": task, "train": train or {}, "flow": flow or {}}
    raw.update(top)
    return parse_config(raw)


def fixed_design_dist(sim: Simulator, xi, steps: int) -> DesignDistribution | None:
    if sim.xi_dim == 0:
        return None
    return DesignDistribution(np.broadcast_to(np.asarray(xi, dtype=np.float64), (sim.xi_dim,)), sim.low, sim.high,
                              0.0, 0.0, 1.0, max(steps, 1))


def _validation_set(sim: Simulator, seed: int, n: int, xi=None):
    rng = stream(seed, "experiments", 1)
    theta = sim.prior.sample(rng, n)
    xis = None
    if sim.xi_dim:
        xis = np.broadcast_to(np.asarray(xi, dtype=np.float64), (n, sim.xi_dim)).copy()
    return theta, xis, sim.simulate(theta, xis, rng)


def heldout_mi(model, sim: Simulator, theta, xis, y, L: int, seed: int, chunk: int = 64):
    """lambda = 0 contrastive bound on held-out pairs with prior contrastive draws."""
    rng = stream(seed, "experiments", 2)
    contrast = sim.prior.sample(rng, L)
    rows = []
    for s in range(0, len(y), chunk):
        sl = slice(s, s + chunk)
        b = ContrastiveBatch(theta[sl], contrast, y[sl], None if xis is None else xis[sl])
        rows.append(nce_loss(model, b).per_row)
    r = np.concatenate(rows)
    return float(r.mean()), float(r.std(ddof=1) / math.sqrt(r.size))


def sweep_cell(cfg: RunConfig, L: int, lam: float, seed: int, xi=None, eval_every: int | None = None,
               validation_size: int | None = None, eval_L: int = 127):
    """Train one (L, lambda) cell with batch ``L + 1``; return curves and final metrics.

    Curves hold the training-batch EIG every step and, every ``eval_every``
    steps, the held-out log-likelihood and held-out lambda = 0 bound.
    """
    sim = make_simulator(cfg.task, **cfg.simulator)
    eval_every = eval_every or cfg.sweep.eval_every
    nval = validation_size or cfg.sweep.validation_size
    t = dataclasses.replace(cfg.train, n_contrastive=L, batch_size=L + 1, lam=lam, train_design=False,
                            sigma_start=0.0, sigma_end=0.0)
    flow = build_flow(sim, cfg, seed)
    xi = xi if xi is not None else (cfg.train.mu_init if cfg.train.mu_init is not None else None)
    if sim.xi_dim and xi is None:
        xi = 0.5 * (sim.low + sim.high)
    pool = sim.prior.sample(stream(seed, "experiments", 3), cfg.pool_size)
    sampler = sim.prepare_round(pool, seed)
    dist = fixed_design_dist(sim, xi, t.steps)
    vt, vx, vy = _validation_set(sim, seed + 10_000, nval, xi)
    curve = []

    def cb(n, row, fl):
        if (n + 1) % eval_every == 0 or n + 1 == t.steps:
            ll, ll_se = validation_loglik(fl, vy, vt, vx)
            mi, mi_se = heldout_mi(fl, sim, vt, vx, vy, eval_L, seed)
            curve.append({"step": n + 1, "val_loglik": ll, "val_loglik_se": ll_se, "heldout_mi": mi,
                          "heldout_mi_se": mi_se, "train_eig": row["eig"]})

    ck, flow, rec = train_round(sampler, flow, dist, t, seed, callback=cb)
    return {"L": L, "lam": lam, "seed": seed, "curve": curve, "record": rec, "flow": flow, "checkpoint": ck,
            "final": curve[-1] if curve else None}


def gauss_fixed_design(seed: int, xi: float = 2.0, steps: int = 1500, L: int = 127, batch: int = 32,
                       lam: float = 0.0, lr: float = 3e-3, flow: dict | None = None, eval_batch: int = 4096):
    """Fit the surrogate on the Gaussian oracle at a fixed design; evaluate the bound."""
    cfg = make_config("gauss-oracle", train=dict(steps=steps, batch_size=batch, n_contrastive=L, lam=lam, lr=lr,
                                                 train_design=False, eval_batch=eval_batch),
                      flow=flow or dict(hidden=16, depth=2, n_bijectors=2), pool_size=4096)
    sim = GaussOracle()
    flow_ = build_flow(sim, cfg, seed)
    pool = sim.prior.sample(stream(seed, "experiments", 4), cfg.pool_size)
    sampler = sim.prepare_round(pool, seed)
    ck, flow_, rec = train_round(sampler, flow_, fixed_design_dist(sim, xi, steps), cfg.train, seed)
    ev = evaluate_eig(flow_, sampler, np.array([xi]), eval_batch, L, seed, keys=(1,), lam=0.0)
    return {"eig": ev.value, "eig_se": ev.se, "record": rec, "flow": flow_, "sim": sim, "checkpoint": ck,
            "analytic": float(sim.analytic_mi(xi)), "cap": math.log(L + 1), "entropy": sim.conditional_entropy()}


def gauss_design_search(seed: int, steps: int = 500, batch: int = 64, L: int = 63, design_lr: float = 0.1,
                        sigma_start: float = 2.0, sigma_end: float = 0.1, flow: dict | None = None):
    """Optimise the design on the Gaussian oracle (information grows with |xi|)."""
    cfg = make_config("gauss-oracle", train=dict(steps=steps, batch_size=batch, n_contrastive=L, lr=3e-3,
                                                 design_lr=design_lr, sigma_start=sigma_start, sigma_end=sigma_end),
                      flow=flow or dict(hidden=16, depth=2, n_bijectors=2), pool_size=4096)
    sim = GaussOracle()
    flow_ = build_flow(sim, cfg, seed)
    pool = sim.prior.sample(stream(seed, "experiments", 5), cfg.pool_size)
    sampler = sim.prepare_round(pool, seed)
    dist = DesignDistribution(initial_mu(sim, cfg.train, seed), sim.low, sim.high, sigma_start, sigma_end,
                              cfg.train.rho, steps)
    ck, flow_, rec = train_round(sampler, flow_, dist, cfg.train, seed)
    return {"checkpoint": ck, "flow": flow_, "record": rec, "sim": sim, "dist": dist}


def linear_dimension_run(seed: int, D: int, steps: int = 2000, lam: float = 0.0, eval_batch: int = 512,
                         eval_L: int | None = 1023, flow: dict | None = None, lr: float = 1e-3,
                         design_lr: float = 0.05, batch: int | None = None):
    """Noisy linear model with ``D`` designs; the bound at the checkpoint design and flow.

    The evaluation uses a larger contrastive set than training because the
    information at D >= 5 exceeds ``log(L + 1)`` for the training ``L``.
    """
    train = dict(steps=steps, lam=lam, lr=lr, design_lr=design_lr)
    if batch is not None:
        train["batch_size"] = batch
    cfg = make_config("linear", train=train, flow=flow or dict(hidden=32, depth=2, n_bijectors=2),
                      simulator={"design_dim": D}, pool_size=4096)
    sim = make_simulator("linear", design_dim=D)
    flow_ = build_flow(sim, cfg, seed)
    pool = sim.prior.sample(stream(seed, "experiments", 6), cfg.pool_size)
    sampler = sim.prepare_round(pool, seed)
    dist = DesignDistribution(initial_mu(sim, cfg.train, seed), sim.low, sim.high, 0.0, 0.0, 1.0, steps)
    ck, flow_, rec = train_round(sampler, flow_, dist, cfg.train, seed)
    ck_flow = flow_.copy()
    ck_flow.set_flat(ck.phi)
    L = eval_L or cfg.train.n_contrastive
    ev = evaluate_eig(ck_flow, sampler, ck.xi_star, eval_batch, L, seed, keys=(2,))
    return {"eig": ev.value, "eig_se": ev.se, "checkpoint": ck, "record": rec, "D": D, "L": L, "flow": ck_flow}


SIR_ABLATION = {"sigma_start": 20.0, "sigma_end": 0.5, "mu_init": 1.0, "design_lr": 0.02}


def sir_round_one(seed: int, sigma_start: float, steps: int = 1000, batch: int = 64, L: int = 63,
                  mu_init: float = 1.0, sigma_end: float = 0.5, design_lr: float = 0.02, lr: float = 3e-3,
                  pool_size: int = 512, flow: dict | None = None, sim_kw: dict | None = None):
    """First SIR design round; ``sigma_start = 0`` gives plain point-design gradients.

    The default start sits in the early flat stretch where almost nothing
    has happened yet, so a point design sees weak gradients.
    """
    sigma_end = min(sigma_end, sigma_start)
    cfg = make_config("sir", train=dict(steps=steps, batch_size=batch, n_contrastive=L, lr=lr, design_lr=design_lr,
                                        sigma_start=sigma_start, sigma_end=sigma_end, mu_init=[mu_init]),
                      flow=flow or dict(hidden=32, depth=2, n_bijectors=2), pool_size=pool_size,
                      simulator=sim_kw or {})
    sim = make_simulator("sir", **cfg.simulator)
    flow_ = build_flow(sim, cfg, seed)
    pool = sim.prior.sample(stream(seed, "experiments", 7), cfg.pool_size)
    sampler = sim.prepare_round(pool, seed)
    dist = DesignDistribution([mu_init], sim.low, sim.high, sigma_start, sigma_end, cfg.train.rho, steps)
    ck, flow_, rec = train_round(sampler, flow_, dist, cfg.train, seed)
    return {"checkpoint": ck, "record": rec, "flow": flow_}


def gauss_sbc(seed: int, trials: int = 200, train_steps: int = 500, mcmc: McmcConfig | None = None,
              draws: int = 200, inflate: float = 4.0, refine_steps: int = 2000, refine_lr: float = 1e-3,
              refine_batch: int = 128, flow: dict | None = None):
    """Calibration of the trained Gaussian-oracle pipeline at its checkpoint design.

    ``refine_steps`` continues surrogate training at the fixed checkpoint
    design before sampling.  Returns ``(curve, inflated_curve, exact_curve, design)``.
    """
    res = gauss_design_search(seed, steps=train_steps, flow=flow or dict(hidden=32, depth=2, n_bijectors=2))
    sim: GaussOracle = res["sim"]
    xi = res["checkpoint"].xi_star
    model = res["flow"]
    if refine_steps > 0:
        cfg = make_config("gauss-oracle", train=dict(steps=refine_steps, batch_size=refine_batch,
                                                     n_contrastive=63, lr=refine_lr, final_lr=1e-5,
                                                     train_design=False))
        pool = sim.prior.sample(stream(seed, "experiments", 8), 4096)
        _, model, _ = train_round(sim.prepare_round(pool, seed), model, fixed_design_dist(sim, xi, refine_steps),
                                  cfg.train, seed, round_idx=1)
    mcmc = mcmc or McmcConfig(chains=2, warmup=500, draws=1000)
    post = surrogate_posterior(model, sim.prior, mcmc, draws=draws)
    curve = sbc_coverage(post, sim, trials, seed=seed, design=xi)
    wide = sbc_coverage(inflate_variance(post, inflate), sim, trials, seed=seed, design=xi)
    exact = sbc_coverage(exact_gauss_posterior(sim, draws), sim, trials, seed=seed, design=xi)
    return curve, wide, exact, xi


TWO_MOONS_CELLS = {"L7": (7, 0.0), "L127": (127, 0.0), "L127_lam1": (127, 1.0)}


def two_moons_cells(seed: int, steps: int = 300, lr: float = 3e-3, flow: dict | None = None,
                    validation_size: int = 512, eval_every: int | None = None):
    """The three two-moons cells behind the L and lambda trends, trained for matched steps."""
    cfg = make_config("two-moons", train=dict(steps=steps, lr=lr),
                      flow=flow or dict(hidden=16, depth=2, n_bijectors=2), pool_size=4096)
    return {key: sweep_cell(cfg, L, lam, seed, eval_every=eval_every or steps, validation_size=validation_size)
            for key, (L, lam) in TWO_MOONS_CELLS.items()}
