"""Joint optimisation of designs and the likelihood surrogate.

The design is not optimised directly: a truncated normal over the design
box with trainable mean ``mu`` and a decaying width is sampled each step,
one design per batch row.  Gradients reach ``mu`` through an inverse-CDF
reparameterisation and reach the design through the flow's own inverse
(the pathwise outcome), so the simulator never needs to be differentiable.

The best step (by batch-mean information gain) is checkpointed together
with a snapshot of the flow parameters.
"""

from __future__ import annotations

import csv
import math
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import truncnorm

from . import gradcore as gc
from .config import RunConfig, TrainConfig
from .flow import ConditionalFlow, FlowConfig, init_flow
from .objective import ContrastiveBatch, MIEstimate, info_nce_lambda, loglik_matrix, nce_rows
from .sim import Simulator, pilot_moments, stream


class TrainingError(RuntimeError):
    """Training aborted; ``dump`` carries the state at the failing step."""

    def __init__(self, message: str, round_idx: int, step: int, dump: dict | None = None):
        super().__init__(f"round {round_idx}, step {step}: {message}")
        self.round_idx = round_idx
        self.step = step
        self.dump = dump or {}


# ---------------------------------------------------------------------------
# design distribution


@dataclass
class DesignDistribution:
    mu: np.ndarray
    low: np.ndarray
    high: np.ndarray
    sigma_start: float = 0.0
    sigma_end: float = 0.0
    rho: float = 5.0
    total_steps: int = 1
    step: int = 0

    def __post_init__(self):
        self.low = np.atleast_1d(np.asarray(self.low, dtype=np.float64))
        self.high = np.atleast_1d(np.asarray(self.high, dtype=np.float64))
        self.mu = np.broadcast_to(np.asarray(self.mu, dtype=np.float64), self.low.shape).copy()
        if np.any(~(self.low < self.high)):
            raise ValueError("degenerate design bounds: need low < high")
        if self.sigma_start < 0 or self.sigma_end < 0:
            raise ValueError("sigma must be non-negative")
        if self.total_steps < 1 or self.rho <= 0:
            raise ValueError("total_steps >= 1 and rho > 0 required")
        self.mu = np.clip(self.mu, self.low, self.high)

    @property
    def dim(self) -> int:
        return self.low.size

    def sigma(self, n: int | None = None) -> float:
        return sigma_schedule(self, self.step if n is None else n)


def sigma_schedule(dist: DesignDistribution, n: int) -> float:
    """``sigma_end + (sigma_start - sigma_end) * exp(-n * rho / N)``."""
    if n < 0:
        raise ValueError("step must be non-negative")
    return dist.sigma_end + (dist.sigma_start - dist.sigma_end) * math.exp(-n * dist.rho / dist.total_steps)


def _ppf(v, a, b):
    return truncnorm.ppf(v, a, b)


def truncated_normal(mu, sigma: float, v: np.ndarray, low, high):
    """Inverse-CDF draw ``mu + sigma * F^{-1}_{[a, b]}(v)``, differentiable in ``mu``.

    ``v`` is an ``(n, d)`` array of uniforms.  With ``sigma == 0`` the draw is
    ``mu`` itself (unit derivative).  Otherwise, differentiating the CDF
    identity gives ``dxi/dmu = 1 - ((1 - v) phi(a) + v phi(b)) / phi(z)``.
    """
    v = np.asarray(v, dtype=np.float64)
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)

    def fwd(m):
        m = np.broadcast_to(m, v.shape)
        if sigma == 0.0:
            return np.clip(m, low, high)
        a = (low - m) / sigma
        b = (high - m) / sigma
        return np.clip(m + sigma * _ppf(v, a, b), low, high)

    def vjp(g, out, m):
        mb = np.broadcast_to(m, v.shape)
        if sigma == 0.0:
            d = np.ones(v.shape)
        else:
            z = (out - mb) / sigma
            a = (low - mb) / sigma
            b = (high - mb) / sigma
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                ta = np.exp(np.log1p(-v) + 0.5 * (z * z - a * a))
                tb = np.exp(np.log(v) + 0.5 * (z * z - b * b))
            ta = np.where(np.isfinite(a), np.nan_to_num(ta, posinf=0.0), 0.0)
            tb = np.where(np.isfinite(b), np.nan_to_num(tb, posinf=0.0), 0.0)
            d = 1.0 - ta - tb
        return (gc._unbroadcast(g * d, np.shape(m)),)

    return gc.primitive("truncnorm", [mu], fwd, vjp)


def sample_designs(dist: DesignDistribution, count: int, seed: int, mu=None, n: int | None = None, keys=(0,)):
    """``count`` designs from the truncated normal at schedule step ``n``.

    Pass a tape tensor as ``mu`` to get a differentiable result.
    """
    v = stream(seed, "designopt", *keys).random((count, dist.dim))
    return truncated_normal(dist.mu if mu is None else mu, dist.sigma(n), v, dist.low, dist.high)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class GroupSettings:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimizerState:
    groups: dict[str, GroupSettings]
    clip: float | None = None
    lr_scale: float = 1.0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def clip_by_global_norm(grads: dict, threshold: float | None):
    norm = math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))
    if threshold is None or norm <= threshold or norm == 0.0:
        return grads, norm
    s = threshold / norm
    return {k: g * s for k, g in grads.items()}, norm


def optimizer_step(state: OptimizerState, params: dict, grads: dict, group: str) -> dict:
    """Clip ``grads`` by their joint norm, then take one Adam descent step.

    Returns new arrays; ``params`` is not modified.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k!r}")
    hp = state.groups[group]
    grads, _ = clip_by_global_norm(grads, state.clip)
    t = state.t.get(group, 0) + 1
    state.t[group] = t
    lr = hp.lr * state.lr_scale
    c1 = 1.0 - hp.beta1**t
    c2 = 1.0 - hp.beta2**t
    out = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            out[k] = p
            continue
        key = f"{group}/{k}"
        m = hp.beta1 * state.m.get(key, 0.0) + (1.0 - hp.beta1) * g
        v = hp.beta2 * state.v.get(key, 0.0) + (1.0 - hp.beta2) * g * g
        state.m[key], state.v[key] = m, v
        out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + hp.eps)
    return out


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` when the smoothed loss stalls.

    The smoothed loss is the mean of the last ``window`` losses; a stall is
    ``patience`` consecutive steps without a relative improvement of
    ``threshold``.  The scale never drops below ``min_scale``.
    """

    factor: float = 0.8
    patience: int = 200
    window: int = 50
    min_scale: float = 0.1
    threshold: float = 1e-4
    enabled: bool = True
    scale: float = 1.0
    best: float = math.inf
    wait: int = 0
    recent: deque = field(default_factory=deque)

    def update(self, loss: float) -> float:
        if not self.enabled:
            return self.scale
        self.recent.append(loss)
        if len(self.recent) > self.window:
            self.recent.popleft()
        smoothed = sum(self.recent) / len(self.recent)
        if not math.isfinite(self.best) or smoothed < self.best - self.threshold * abs(self.best):
            self.best = smoothed
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.scale = max(self.scale * self.factor, self.min_scale)
                self.wait = 0
        return self.scale


def make_optimizer(cfg: TrainConfig, has_design: bool) -> tuple[OptimizerState, PlateauScheduler]:
    groups = {"phi": GroupSettings(cfg.lr)}
    if has_design:
        groups["xi"] = GroupSettings(cfg.design_lr, beta2=cfg.xi_beta2)
    sched_on = cfg.lr_anneal is not None
    min_scale = (cfg.final_lr / cfg.lr) if (sched_on and cfg.final_lr is not None and cfg.lr > 0) else 0.0
    sched = PlateauScheduler(factor=cfg.lr_anneal or 1.0, patience=cfg.patience, window=cfg.smoothing,
                             min_scale=min_scale, enabled=sched_on)
    return OptimizerState(groups, clip=cfg.clip), sched


# ---------------------------------------------------------------------------
# records


@dataclass
class DesignCheckpoint:
    xi_star: np.ndarray
    eig_star: float
    step: int
    phi_ref: str
    round_idx: int = 0
    argmax_design: np.ndarray | None = None
    phi: np.ndarray | None = None
    eig_eval: float | None = None
    eig_eval_se: float | None = None


class RunRecord:
    """Append-only per-step metrics plus per-round summaries.

    Step rows carry a global ``step`` that increases strictly across
    rounds.  Wall-clock times are kept apart so the metrics file is
    reproducible bit for bit.
    """

    BASE = ["round", "step", "round_step", "loss", "eig", "eig_se", "mi", "sigma", "lr_scale", "checkpoint", "eig_star"]

    def __init__(self, xi_dim: int):
        self.xi_dim = xi_dim
        self.steps: list[dict] = []
        self.rounds: list[dict] = []
        self.timings: list[tuple[int, float]] = []

    @property
    def columns(self) -> list[str]:
        return self.BASE + [f"mu_{j}" for j in range(self.xi_dim)]

    def append(self, row: dict, seconds: float = 0.0):
        if self.steps and row["step"] <= self.steps[-1]["step"]:
            raise ValueError("step must increase strictly")
        self.steps.append(row)
        self.timings.append((row["step"], seconds))

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.steps], dtype=np.float64)

    @property
    def next_step(self) -> int:
        return self.steps[-1]["step"] + 1 if self.steps else 0

    def write_csv(self, path):
        cols = self.columns
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.steps:
                w.writerow([_fmt(r[c]) for c in cols])

    def write_timing(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "seconds"])
            for s, t in self.timings:
                w.writerow([s, f"{t:.6f}"])

    @classmethod
    def read_csv(cls, path) -> "RunRecord":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        xi_dim = sum(1 for c in (rows[0].keys() if rows else []) if c.startswith("mu_"))
        rec = cls(xi_dim)
        for r in rows:
            rec.steps.append({k: (int(v) if k in ("round", "step", "round_step", "checkpoint") else float(v))
                              for k, v in r.items()})
        return rec


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


# ---------------------------------------------------------------------------
# training


def _pool_draws(rng, n_pool, count, L, per_row):
    idx0 = rng.integers(n_pool, size=count)
    idxc = rng.integers(n_pool, size=(count, L) if per_row else L)
    return idx0, idxc


def train_round(sampler, flow: ConditionalFlow, dist: DesignDistribution | None, cfg: TrainConfig, seed: int,
                round_idx: int = 0, record: RunRecord | None = None, callback=None):
    """One round of joint training; returns ``(checkpoint, flow, record)``.

    ``sampler`` is the round's :class:`~infodesign.sim.RoundSampler` over the
    current parameter pool.  ``dist`` is ``None`` for design-free tasks.
    The flow is updated in place and also returned.  ``callback(n, row,
    flow)`` runs after every update.
    """
    sim: Simulator = sampler.sim
    pool = sampler.pool
    has_design = dist is not None and dist.dim > 0
    record = RunRecord(dist.dim if has_design else 0) if record is None else record
    opt, sched = make_optimizer(cfg, has_design)
    train_design = has_design and cfg.train_design
    if has_design:
        dist.total_steps = max(cfg.steps, 1)
    L = cfg.n_contrastive
    best = DesignCheckpoint(dist.mu.copy() if has_design else np.zeros(0), -math.inf, -1, "", round_idx)
    base_step = record.next_step
    recent_losses: deque = deque(maxlen=20)

    for n in range(cfg.steps):
        t0 = time.perf_counter()
        step = base_step + n
        rng = stream(seed, "designopt", round_idx, n, 1)
        tape = gc.Tape(check_finite=False)
        params = {k: tape.param(v, name=k) for k, v in flow.params.items()} if cfg.train_flow else flow.params
        sigma = 0.0
        xi = None
        if has_design:
            dist.step = n
            sigma = dist.sigma(n)
            mu = tape.param(dist.mu, name="__mu__") if train_design else dist.mu
            xi = sample_designs(dist, cfg.batch_size, seed, mu=mu, n=n, keys=(round_idx, n, 0))
        idx0, idxc = _pool_draws(rng, len(pool), cfg.batch_size, L, cfg.per_row_contrastive)
        theta0 = pool[idx0]
        try:
            xv = None if xi is None else gc.value(xi)
            if xv is not None:
                sim.check_designs(xv)
            y = sampler.simulate(idx0, xv, rng)
        except Exception as exc:  # propagate with step context
            raise TrainingError(f"simulator failure: {exc}", round_idx, step) from exc
        try:
            y_in = flow.pathwise(y, theta0, xi) if train_design else y
            batch = ContrastiveBatch(theta0, pool[idxc], y_in, xi, cfg.lam)
            m = loglik_matrix(flow, batch, params)
            est = info_nce_lambda(flow, batch, m=m)
            mi = float(np.mean(gc.value(nce_rows(gc.value(m), L))))
            loss = -est.tensor if isinstance(est.tensor, gc.Tensor) else None
            grads = tape.backward(loss) if loss is not None else {}
            loss_value = -est.value
            if not math.isfinite(loss_value) or not all(np.isfinite(g).all() for g in grads.values()):
                bad = tape.first_nonfinite()
                raise FloatingPointError("non-finite loss or gradient" + ("" if bad is None else
                                         f" (first non-finite node {bad}: {tape.nodes[bad].op})"))
        except FloatingPointError as exc:
            dump = {"mu": None if not has_design else dist.mu.tolist(), "sigma": sigma,
                    "recent_losses": list(recent_losses)}
            raise TrainingError(str(exc), round_idx, step, dump) from exc
        recent_losses.append(loss_value)

        improved = est.value > best.eig_star
        if improved:
            best = DesignCheckpoint(
                dist.mu.copy() if has_design else np.zeros(0), est.value, step, f"checkpoint_{step}.bin",
                round_idx, gc.value(xi)[int(np.argmax(est.per_row))].copy() if has_design else None, flow.flat(),
            )
        row = {"round": round_idx, "step": step, "round_step": n, "loss": loss_value, "eig": est.value,
               "eig_se": est.se if cfg.batch_size > 1 else 0.0, "mi": mi, "sigma": sigma,
               "lr_scale": opt.lr_scale, "checkpoint": int(improved), "eig_star": best.eig_star}
        if has_design:
            row.update({f"mu_{j}": float(dist.mu[j]) for j in range(dist.dim)})

        if cfg.train_flow:
            flow.params = optimizer_step(opt, flow.params, {k: grads[k] for k in flow.params}, "phi")
        if train_design:
            new = optimizer_step(opt, {"mu": dist.mu}, {"mu": grads["__mu__"]}, "xi")["mu"]
            dist.mu = np.clip(new, dist.low, dist.high)
        opt.lr_scale = sched.update(loss_value)
        record.append(row, time.perf_counter() - t0)
        if callback is not None:
            callback(n, row, flow)

    if cfg.eval_batch > 0 and best.step >= 0:
        ck_flow = flow.copy()
        if best.phi is not None:
            ck_flow.set_flat(best.phi)
        ev = evaluate_eig(ck_flow, sampler, best.xi_star if has_design else None, cfg.eval_batch,
                          cfg.eval_contrastive or L, seed=seed, keys=(round_idx, 777), lam=0.0)
        best.eig_eval, best.eig_eval_se = ev.value, ev.se
    return best, flow, record


def evaluate_eig(model, sampler, xi_design, n: int, L: int, seed: int, keys=(0,), lam: float = 0.0, chunk: int = 64):
    """Batch-mean information gain at a fixed design, without gradients."""
    sim = sampler.sim
    pool = sampler.pool
    rng = stream(seed, "designopt", 9000, *keys)
    idx0, idxc = _pool_draws(rng, len(pool), n, L, False)
    xi = None if xi_design is None else np.broadcast_to(np.asarray(xi_design, dtype=np.float64), (n, sim.xi_dim)).copy()
    y = sampler.simulate(idx0, xi, rng)
    rows = []
    for s in range(0, n, chunk):
        sl = slice(s, min(s + chunk, n))
        b = ContrastiveBatch(pool[idx0[sl]], pool[idxc], y[sl], None if xi is None else xi[sl], lam)
        rows.append(info_nce_lambda(model, b).per_row)
    per_row = np.concatenate(rows)
    return MIEstimate(float(per_row.mean()), per_row, math.log(L + 1), lam)


# ---------------------------------------------------------------------------
# sequential driver


def build_flow(sim: Simulator, cfg: RunConfig, seed: int) -> ConditionalFlow:
    loc, scale = pilot_moments(sim, seed)
    f = cfg.flow
    return init_flow(FlowConfig(
        y_dim=sim.y_dim, theta_dim=sim.theta_dim, xi_dim=sim.xi_dim, n_bijectors=f.n_bijectors, hidden=f.hidden,
        depth=f.depth, bins=f.bins, tail_bound=f.tail_bound, affine=f.affine, seed=seed,
        theta_loc=sim.prior.mean.tolist(), theta_scale=sim.prior.std.tolist(),
        xi_low=sim.low.tolist(), xi_high=sim.high.tolist(), y_loc=loc.tolist(), y_scale=scale.tolist(),
    ))


def initial_mu(sim: Simulator, cfg: TrainConfig, seed: int) -> np.ndarray:
    if cfg.mu_init is not None:
        return np.broadcast_to(np.asarray(cfg.mu_init, dtype=np.float64), (sim.xi_dim,)).copy()
    return sim.low + (sim.high - sim.low) * stream(seed, "designopt", 5).random(sim.xi_dim)


@dataclass
class BoedReport:
    checkpoints: list
    flow: ConditionalFlow
    posterior: object
    history: list
    record: RunRecord
    rounds: list
    median_distance: float
    truth: np.ndarray


def run_sbi_boed(sim: Simulator, cfg: RunConfig, seed: int, flow: ConditionalFlow | None = None,
                 on_round=None) -> BoedReport:
    """Sequential design: train, observe at the checkpoint design, refit the posterior."""
    from .inference import mcmc_posterior, median_distance

    if cfg.rounds < 1:
        raise ValueError("rounds must be >= 1")
    if cfg.truth is None:
        raise ValueError("a ground-truth theta is required to observe outcomes")
    truth = np.asarray(cfg.truth, dtype=np.float64)
    flow = build_flow(sim, cfg, seed) if flow is None else flow
    pool = sim.prior.sample(stream(seed, "designopt", 1), cfg.pool_size)
    record = RunRecord(sim.xi_dim)
    history, checkpoints, rounds = [], [], []
    mu = initial_mu(sim, cfg.train, seed)
    post = None
    t_cfg = cfg.train
    for t in range(cfg.rounds):
        sampler = sim.prepare_round(pool, seed * 1000 + t)
        dist = DesignDistribution(mu, sim.low, sim.high, t_cfg.sigma_start, t_cfg.sigma_end, t_cfg.rho,
                                  max(t_cfg.steps, 1))
        ck, flow, record = train_round(sampler, flow, dist, t_cfg, seed, round_idx=t, record=record)
        ck_flow = flow.copy()
        if ck.phi is not None:
            ck_flow.set_flat(ck.phi)
        checkpoints.append((ck, ck_flow))
        y_obs = sim.simulate(truth[None, :], ck.xi_star[None, :], stream(seed, "designopt", 2, t))[0]
        history.append((ck.xi_star.copy(), y_obs.copy()))
        try:
            post = mcmc_posterior(ck_flow, history, sim.prior, cfg.mcmc, seed=seed * 1000 + t)
        except Exception as exc:
            raise RuntimeError(f"inference failed in round {t}: {exc}") from exc
        pick = stream(seed, "designopt", 3, t).integers(len(post.samples), size=cfg.pool_size)
        pool = post.samples[pick]
        mu = ck.xi_star.copy()
        rounds.append({
            "round": t, "xi_star": ck.xi_star.tolist(), "eig_star": ck.eig_star, "checkpoint_step": ck.step,
            "eig_eval": ck.eig_eval, "y_obs": y_obs.tolist(), "posterior_mean": post.samples.mean(0).tolist(),
            "posterior_sd": post.samples.std(0).tolist(), "rhat": post.rhat.tolist(),
            "acceptance": post.acceptance,
        })
        if on_round is not None:
            on_round(t, ck, ck_flow, post)
    xi_last, y_last = history[-1]
    npred = min(1000, len(post.samples))
    sel = stream(seed, "designopt", 4).choice(len(post.samples), size=npred, replace=False)
    y_pred = sim.simulate(post.samples[sel], np.broadcast_to(xi_last, (npred, sim.xi_dim)), stream(seed, "designopt", 6))
    med = median_distance(y_pred, y_last)
    return BoedReport(checkpoints, flow, post, history, record, rounds, med, truth)
