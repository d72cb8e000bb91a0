"""Posterior sampling through the trained surrogate, and its diagnostics.

The target is ``p(theta) * prod_i p_phi(y_i | theta, xi_i)``.  Sampling is
adaptive random-walk Metropolis in an unconstrained parameterisation (log
for positive parameters, logit for bounded ones), vectorised over many
chains at once.  Chains may target different posteriors, which is how the
calibration check runs hundreds of small posteriors in one sweep.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import binom

from . import gradcore as gc
from .config import McmcConfig
from .sim import stream

log = logging.getLogger(__name__)

LC2ST_NA = "n/a (out of scope)"


@dataclass
class PosteriorSampleSet:
    samples: np.ndarray
    chain: np.ndarray
    acceptance: float
    chain_acceptance: np.ndarray
    rhat: np.ndarray
    ess: np.ndarray
    history: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    def to_csv(self, path):
        write_posterior_csv(path, self)


# ---------------------------------------------------------------------------
# targets


def log_target(model, history, prior, theta, params=None) -> np.ndarray:
    """Unnormalised log posterior at each row of ``theta``."""
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    out = np.asarray(prior.log_prob(theta), dtype=np.float64)
    c = theta.shape[0]
    for xi, y in history:
        ys = np.broadcast_to(np.asarray(y, dtype=np.float64), (c, np.size(y)))
        xs = None if xi is None or np.size(xi) == 0 else np.broadcast_to(np.asarray(xi, dtype=np.float64), (c, np.size(xi)))
        out = out + np.asarray(gc.value(model.log_prob(ys, theta, xs, params=params)))
    return out


def _batched_target(model, prior, ys, xis):
    """Log target for chain-specific data: ``ys`` is ``(C, H, dy)``, ``xis`` is ``(C, H, dxi)`` or None."""

    def fn(theta):
        lp = np.asarray(prior.log_prob(theta), dtype=np.float64)
        ok = np.isfinite(lp)
        if ys is None or ys.shape[1] == 0:
            return lp
        th = np.where(ok[:, None], theta, prior.mean)
        for h in range(ys.shape[1]):
            x = None if xis is None else xis[:, h]
            lp = lp + np.asarray(gc.value(model.log_prob(ys[:, h], th, x)))
        return np.where(ok, lp, -np.inf)

    return fn


# ---------------------------------------------------------------------------
# sampler


def adaptive_rwm(log_density: Callable, z0: np.ndarray, cfg: McmcConfig, rng: np.random.Generator,
                 init_scale: np.ndarray | None = None):
    """Vectorised adaptive random-walk Metropolis on unconstrained states.

    ``log_density`` maps ``(C, d)`` to ``(C,)``.  During warm-up each chain
    tunes per-dimension scales from its own running variance and a global
    factor toward ``cfg.target_accept``.  Returns ``(draws (C, S, d),
    acceptance (C,))`` with warm-up discarded.
    """
    z = np.array(z0, dtype=np.float64)
    c, d = z.shape
    lp = log_density(z)
    if not np.all(np.isfinite(lp)):
        raise FloatingPointError("non-finite log density at chain start")
    scale = np.ones((c, d)) * (1.0 if init_scale is None else np.asarray(init_scale))
    log_g = np.full(c, math.log(2.38 / math.sqrt(d)))
    mean = z.copy()
    m2 = np.zeros((c, d))
    count = 0
    n_keep = cfg.draws
    draws = np.empty((c, n_keep // cfg.thin, d))
    accepted = np.zeros(c)
    for k in range(cfg.warmup + n_keep):
        prop = z + np.exp(log_g)[:, None] * scale * rng.standard_normal((c, d))
        lp_prop = log_density(prop)
        log_u = np.log(rng.random(c))
        with np.errstate(invalid="ignore"):
            acc = np.where(np.isfinite(lp_prop), log_u < lp_prop - lp, False)
        z = np.where(acc[:, None], prop, z)
        lp = np.where(acc, lp_prop, lp)
        if k < cfg.warmup:
            log_g += (acc.astype(float) - cfg.target_accept) * (k + 1) ** -0.6
            count += 1
            delta = z - mean
            mean += delta / count
            m2 += delta * (z - mean)
            if count >= 50 and count % 25 == 0:
                sd = np.sqrt(m2 / (count - 1))
                scale = np.maximum(sd, 1e-6 * (1.0 + np.abs(mean)))
        else:
            j = k - cfg.warmup
            accepted += acc
            if j % cfg.thin == 0 and j // cfg.thin < draws.shape[1]:
                draws[:, j // cfg.thin] = z
    return draws, accepted / max(n_keep, 1)


def split_rhat(chains: np.ndarray) -> np.ndarray:
    """Split-R-hat per dimension for ``(C, S, d)`` draws."""
    c, s, d = chains.shape
    half = s // 2
    if half < 2:
        return np.full(d, np.nan)
    parts = np.concatenate([chains[:, :half], chains[:, half : 2 * half]], axis=0)
    n = half
    means = parts.mean(axis=1)
    w = parts.var(axis=1, ddof=1).mean(axis=0)
    b = n * means.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * w + b / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_plus / w)
    return np.where(w > 0, r, np.nan)


def effective_sample_size(chains: np.ndarray) -> np.ndarray:
    """Multi-chain ESS with Geyer's initial positive-sequence truncation."""
    c, s, d = chains.shape
    out = np.empty(d)
    for j in range(d):
        x = chains[:, :, j] - chains[:, :, j].mean(axis=1, keepdims=True)
        var = x.var(axis=1).mean()
        if var == 0 or s < 4:
            out[j] = float(c * s)
            continue
        nfft = 1 << (2 * s - 1).bit_length()
        f = np.fft.rfft(x, nfft, axis=1)
        acov = np.fft.irfft(f * np.conj(f), nfft, axis=1)[:, :s].mean(axis=0) / s
        rho = acov / var
        tau = 1.0
        t = 1
        while t + 1 < s:
            pair = rho[t] + rho[t + 1]
            if pair < 0:
                break
            tau += 2 * pair
            t += 2
        out[j] = c * s / max(tau, 1e-12)
    return out


def _starts(prior, n, rng):
    return prior.to_unconstrained(prior.sample(rng, n))


def _wrap(prior, target):
    def fn(z):
        theta, ljac = prior.from_unconstrained(z)
        return target(theta) + ljac

    return fn


def _unconstrained_scale(prior, rng):
    z = prior.to_unconstrained(prior.sample(rng, 2000))
    return 0.2 * z.std(axis=0)


def mcmc_posterior(model, history, prior, cfg: McmcConfig | None = None, seed: int = 0) -> PosteriorSampleSet:
    """Posterior draws from ``prior * prod_i model(y_i | theta, xi_i)``.

    An empty history samples the prior (used as a recovery check).
    """
    cfg = McmcConfig() if cfg is None else cfg
    rng = stream(seed, "inference", 0)
    target = _wrap(prior, lambda th: log_target(model, history, prior, th))
    draws, acc = adaptive_rwm(target, _starts(prior, cfg.chains, rng), cfg, rng, _unconstrained_scale(prior, rng))
    c, s, d = draws.shape
    theta, _ = prior.from_unconstrained(draws.reshape(c * s, d))
    chains = theta.reshape(c, s, d)
    rhat = split_rhat(chains)
    flags = []
    for k in np.flatnonzero(acc == 0):
        flags.append(f"chain {k}: all proposals rejected")
    if np.any(rhat > 1.1):
        flags.append(f"rhat above 1.1: {np.round(rhat, 3).tolist()}")
    for f in flags:
        log.warning(f)
    return PosteriorSampleSet(theta, np.repeat(np.arange(c), s), float(acc.mean()), acc, rhat,
                              effective_sample_size(chains), list(history), flags)


def mcmc_many(model, prior, ys, xis, cfg: McmcConfig, seed: int = 0) -> np.ndarray:
    """Independent posteriors for ``T`` single-observation datasets at once.

    ``ys`` is ``(T, dy)``, ``xis`` ``(T, dxi)`` or None.  Returns ``(T, chains *
    draws, d)`` samples.
    """
    ys = np.asarray(ys, dtype=np.float64)
    t = ys.shape[0]
    c = cfg.chains
    rep_y = np.repeat(ys, c, axis=0)[:, None, :]
    rep_x = None if xis is None else np.repeat(np.asarray(xis, dtype=np.float64), c, axis=0)[:, None, :]
    rng = stream(seed, "inference", 1)
    target = _wrap(prior, _batched_target(model, prior, rep_y, rep_x))
    draws, _ = adaptive_rwm(target, _starts(prior, t * c, rng), cfg, rng, _unconstrained_scale(prior, rng))
    s, d = draws.shape[1], draws.shape[2]
    theta, _ = prior.from_unconstrained(draws.reshape(-1, d))
    return theta.reshape(t, c * s, d)


# ---------------------------------------------------------------------------
# calibration


@dataclass
class CoverageCurve:
    levels: np.ndarray
    coverage: np.ndarray
    coverage_per_dim: np.ndarray
    trials: int
    failures: int
    ranks: np.ndarray
    n_draws: int

    def band(self, confidence: float = 0.95):
        return binomial_band(self.trials, self.levels, confidence)

    def inside_band(self, confidence: float = 0.95) -> np.ndarray:
        lo, hi = self.band(confidence)
        return (self.coverage_per_dim >= lo[:, None]) & (self.coverage_per_dim <= hi[:, None])


def binomial_band(trials: int, levels, confidence: float = 0.95):
    """Pointwise band of coverage fractions under exact calibration."""
    levels = np.asarray(levels, dtype=np.float64)
    a = (1.0 - confidence) / 2
    return binom.ppf(a, trials, levels) / trials, binom.ppf(1 - a, trials, levels) / trials


def coverage_from_ranks(ranks: np.ndarray, n_draws: int, levels) -> np.ndarray:
    """Fraction of trials whose true value lies in each central credible interval, per dim."""
    levels = np.asarray(levels, dtype=np.float64)
    u = (ranks + 0.5) / (n_draws + 1)
    dev = np.abs(u - 0.5)
    return np.stack([(dev <= a / 2).mean(axis=0) for a in levels])


def sbc_coverage(posterior_fn: Callable, simulator, trials: int, seed: int = 0, levels=None, design=None,
                 allow_small: bool = False) -> CoverageCurve:
    """Simulation-based calibration over ``trials`` prior-predictive datasets.

    ``posterior_fn(ys, xis, seed)`` returns ``(T, S, d)`` posterior draws.
    ``design`` is the fixed measurement design (or None for design-free
    tasks).  Trials with non-finite draws are dropped and counted.
    """
    if trials < 100 and not allow_small:
        raise ValueError("SBC needs at least 100 trials")
    levels = np.round(np.arange(1, 10) / 10, 1) if levels is None else np.asarray(levels, dtype=np.float64)
    rng = stream(seed, "inference", 2)
    theta = simulator.prior.sample(rng, trials)
    xis = None
    if simulator.xi_dim:
        xis = np.broadcast_to(np.asarray(design, dtype=np.float64), (trials, simulator.xi_dim)).copy()
    ys = simulator.simulate(theta, xis, rng)
    draws = np.asarray(posterior_fn(ys, xis, seed))
    ok = np.all(np.isfinite(draws), axis=(1, 2))
    draws, theta = draws[ok], theta[ok]
    s = draws.shape[1]
    ranks = np.sum(draws < theta[:, None, :], axis=1)
    per_dim = coverage_from_ranks(ranks, s, levels)
    return CoverageCurve(levels, per_dim.mean(axis=1), per_dim, int(ok.sum()), int((~ok).sum()), ranks, s)


def surrogate_posterior(model, prior, cfg: McmcConfig, draws: int | None = None):
    """Posterior hook: MCMC through ``model``, thinned to ``draws`` per trial."""

    def fn(ys, xis, seed):
        out = mcmc_many(model, prior, ys, xis, cfg, seed)
        if draws is not None and out.shape[1] > draws:
            idx = np.linspace(0, out.shape[1] - 1, draws).astype(int)
            out = out[:, idx]
        return out

    return fn


def prior_posterior(prior, draws: int = 200):
    """Miscalibration hook: ignore the data and return prior draws."""

    def fn(ys, xis, seed):
        rng = stream(seed, "inference", 3)
        return prior.sample(rng, len(ys) * draws).reshape(len(ys), draws, -1)

    return fn


def exact_gauss_posterior(oracle, draws: int = 200):
    """Conjugate posterior of the linear-Gaussian oracle."""

    def fn(ys, xis, seed):
        rng = stream(seed, "inference", 4)
        out = np.empty((len(ys), draws, 1))
        for i in range(len(ys)):
            m, v = oracle.posterior(xis[i], ys[i])
            out[i, :, 0] = m + math.sqrt(v) * rng.standard_normal(draws)
        return out

    return fn


def inflate_variance(posterior_fn, factor: float = 4.0):
    """Wrap a posterior hook so every per-trial posterior has ``factor`` x variance."""

    def fn(ys, xis, seed):
        d = np.asarray(posterior_fn(ys, xis, seed))
        m = d.mean(axis=1, keepdims=True)
        return m + math.sqrt(factor) * (d - m)

    return fn


# ---------------------------------------------------------------------------
# accuracy and reporting


def median_distance(y_pred, y_obs) -> float:
    """Median Euclidean distance between predictive draws and the observation."""
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_pred.size == 0:
        raise ValueError("empty predictive sample set")
    y_pred = y_pred.reshape(y_pred.shape[0], -1)
    return float(np.median(np.linalg.norm(y_pred - np.asarray(y_obs, dtype=np.float64).reshape(1, -1), axis=1)))


def mean_se(values):
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return None, None
    if v.size == 1:
        return float(v[0]), None
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def eig_report(runs: list[list[dict]]) -> list[dict]:
    """Per-round summary across seeds.

    ``runs[s]`` is the list of round dicts of seed ``s`` with keys
    ``eig_star`` and optionally ``eig_eval`` and ``median_distance``.  SE
    fields are ``None`` for a single seed.
    """
    n_rounds = max(len(r) for r in runs)
    rows = []
    for t in range(n_rounds):
        per = [r[t] for r in runs if len(r) > t]
        eig = [p.get("eig_eval") if p.get("eig_eval") is not None else p["eig_star"] for p in per]
        em, es = mean_se(eig)
        cm, cs = mean_se([p["eig_star"] for p in per])
        mm, ms = mean_se([p.get("median_distance") for p in per])
        rows.append({"round": t, "seeds": len(per), "eig_mean": em, "eig_se": es, "checkpoint_eig_mean": cm,
                     "checkpoint_eig_se": cs, "median_distance_mean": mm, "median_distance_se": ms,
                     "lc2st": LC2ST_NA})
    return rows


def write_posterior_csv(path, post: PosteriorSampleSet):
    d = post.samples.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"theta_{j}" for j in range(d)] + ["chain"])
        for row, c in zip(post.samples, post.chain):
            w.writerow([repr(float(x)) for x in row] + [int(c)])


def read_posterior_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        k = sum(1 for h in header if h.startswith("theta_"))
        return np.array([[float(x) for x in row[:k]] for row in r])


def write_coverage_csv(path, curve: CoverageCurve):
    lo, hi = curve.band()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "coverage", "trials", "band_low", "band_high"])
        for a, cov, l, h in zip(curve.levels, curve.coverage, lo, hi):
            w.writerow([repr(float(a)), repr(float(cov)), curve.trials, repr(float(l)), repr(float(h))])
