"""Simulators, priors and the random-stream contract.

All randomness is drawn from counter-based Philox streams keyed by
``(run seed, module id, *keys)``, so any batch row can be regenerated in
isolation and parallel evaluation does not change results.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gradcore as gc

log = logging.getLogger(__name__)

MODULE_IDS = {"sim": 1, "designopt": 2, "objective": 3, "inference": 4, "flow": 5, "cli": 6, "experiments": 7}


def stream(seed: int, module: str, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, module, *keys)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(MODULE_IDS[module], *[int(k) for k in keys]))
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# priors


class GaussianPrior:
    def __init__(self, loc, scale):
        self.loc = np.atleast_1d(np.asarray(loc, dtype=np.float64))
        self.scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), self.loc.shape).copy()
        self.dim = self.loc.size

    @property
    def mean(self):
        return self.loc

    @property
    def std(self):
        return self.scale

    def sample(self, rng, n):
        return self.loc + self.scale * rng.standard_normal((n, self.dim))

    def log_prob(self, theta):
        z = (np.asarray(theta) - self.loc) / self.scale
        return np.sum(-0.5 * z * z - np.log(self.scale) - 0.5 * math.log(2 * math.pi), axis=-1)

    def to_unconstrained(self, theta):
        return np.asarray(theta, dtype=np.float64)

    def from_unconstrained(self, z):
        z = np.asarray(z, dtype=np.float64)
        return z, np.zeros(z.shape[:-1])


class LogNormalPrior:
    """Independent log-normals with the given medians and log-scale sds."""

    def __init__(self, median, log_sd):
        self.mu = np.log(np.atleast_1d(np.asarray(median, dtype=np.float64)))
        self.sigma = np.broadcast_to(np.asarray(log_sd, dtype=np.float64), self.mu.shape).copy()
        self.dim = self.mu.size

    @property
    def mean(self):
        return np.exp(self.mu + 0.5 * self.sigma**2)

    @property
    def std(self):
        s2 = self.sigma**2
        return np.sqrt((np.exp(s2) - 1.0) * np.exp(2 * self.mu + s2))

    def sample(self, rng, n):
        return np.exp(self.mu + self.sigma * rng.standard_normal((n, self.dim)))

    def log_prob(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            lt = np.log(theta)
            z = (lt - self.mu) / self.sigma
            lp = -0.5 * z * z - np.log(self.sigma) - 0.5 * math.log(2 * math.pi) - lt
        lp = np.where(theta > 0, lp, -np.inf)
        return np.sum(lp, axis=-1)

    def to_unconstrained(self, theta):
        return np.log(np.asarray(theta, dtype=np.float64))

    def from_unconstrained(self, z):
        z = np.asarray(z, dtype=np.float64)
        return np.exp(z), np.sum(z, axis=-1)


class UniformPrior:
    def __init__(self, low, high):
        self.low = np.atleast_1d(np.asarray(low, dtype=np.float64))
        self.high = np.broadcast_to(np.asarray(high, dtype=np.float64), self.low.shape).copy()
        self.dim = self.low.size

    @property
    def mean(self):
        return 0.5 * (self.low + self.high)

    @property
    def std(self):
        return (self.high - self.low) / math.sqrt(12.0)

    def sample(self, rng, n):
        return self.low + (self.high - self.low) * rng.random((n, self.dim))

    def log_prob(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        inside = np.all((theta >= self.low) & (theta <= self.high), axis=-1)
        return np.where(inside, -np.sum(np.log(self.high - self.low)), -np.inf)

    def to_unconstrained(self, theta):
        p = (np.asarray(theta, dtype=np.float64) - self.low) / (self.high - self.low)
        p = np.clip(p, 1e-12, 1 - 1e-12)
        return np.log(p) - np.log1p(-p)

    def from_unconstrained(self, z):
        z = np.asarray(z, dtype=np.float64)
        p = 1.0 / (1.0 + np.exp(-z))
        width = self.high - self.low
        # log |d theta / d z| = log(width) + log p + log(1 - p)
        ljac = np.sum(np.log(width) - np.logaddexp(0.0, -z) - np.logaddexp(0.0, z), axis=-1)
        return self.low + width * p, ljac


# ---------------------------------------------------------------------------
# simulators


class Simulator:
    """Base for pure stochastic maps ``(theta, xi, noise) -> y``.

    Subclasses implement the vectorised :meth:`simulate`.
    """

    name = "base"
    theta_dim = 0
    xi_dim = 0
    y_dim = 0
    prior = None

    def __init__(self):
        self.low = np.zeros(self.xi_dim)
        self.high = np.zeros(self.xi_dim)

    @property
    def bounds(self):
        return self.low, self.high

    def simulate(self, theta, xi, rng) -> np.ndarray:
        raise NotImplementedError

    def simulate_one(self, theta, xi, seed: int) -> np.ndarray:
        """Single keyed draw; identical for identical ``(theta, xi, seed)``."""
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        xi = np.asarray(xi, dtype=np.float64).reshape(1, self.xi_dim)
        return self.simulate(theta, xi, stream(seed, "sim"))[0]

    def prepare_round(self, pool: np.ndarray, seed: int) -> "RoundSampler":
        """Per-round view over a fixed parameter pool (SIR pre-simulates here)."""
        return RoundSampler(self, pool)

    def check_designs(self, xi):
        xi = np.asarray(xi)
        if xi.size and (np.any(xi < self.low) or np.any(xi > self.high)):
            raise ValueError(f"{self.name}: design outside bounds")


class RoundSampler:
    def __init__(self, sim: Simulator, pool: np.ndarray):
        self.sim = sim
        self.pool = np.asarray(pool, dtype=np.float64)

    def simulate(self, idx, xi, rng):
        return self.sim.simulate(self.pool[idx], xi, rng)


class LinearSimulator(Simulator):
    """``y = theta0 + theta1 * xi + eps + nu`` with Gaussian and Gamma noise.

    The Gamma source uses a shape/rate reading (shape 2, rate 2, so mean 1
    and variance 0.5); pass ``gamma_rate=False`` to read the second number
    as a scale instead.
    """

    name = "linear"
    theta_dim = 2

    def __init__(self, design_dim: int = 1, low=-10.0, high=10.0, prior_scale=3.0, gamma_shape=2.0,
                 gamma_param=2.0, gamma_rate=True, noise=True):
        if design_dim < 1:
            raise ValueError("design_dim must be >= 1")
        self.xi_dim = self.y_dim = design_dim
        self.low = np.full(design_dim, float(low))
        self.high = np.full(design_dim, float(high))
        self.prior = GaussianPrior(np.zeros(2), prior_scale)
        self.gamma_shape = gamma_shape
        self.gamma_scale = 1.0 / gamma_param if gamma_rate else gamma_param
        self.noise = noise

    def simulate(self, theta, xi, rng):
        theta = np.asarray(theta, dtype=np.float64)
        xi = np.asarray(xi, dtype=np.float64)
        n = theta.shape[0]
        eps = rng.standard_normal((n, self.y_dim))
        nu = rng.gamma(self.gamma_shape, self.gamma_scale, size=(n, self.y_dim))
        if not self.noise:
            eps = eps * 0.0
            nu = nu * 0.0
        return theta[:, :1] + theta[:, 1:2] * xi + eps + nu


class TwoMoonsSimulator(Simulator):
    """Design-free two-moons benchmark."""

    name = "two-moons"
    theta_dim = 2
    xi_dim = 0
    y_dim = 2

    def __init__(self, forced_a=None, forced_r=None):
        super().__init__()
        self.prior = UniformPrior([-1.0, -1.0], [1.0, 1.0])
        self.forced_a = forced_a
        self.forced_r = forced_r

    def simulate(self, theta, xi=None, rng=None):
        theta = np.asarray(theta, dtype=np.float64)
        n = theta.shape[0]
        a = rng.uniform(-math.pi / 2, math.pi / 2, size=n)
        r = 0.1 + 0.01 * rng.standard_normal(n)
        if self.forced_a is not None:
            a = np.full(n, float(self.forced_a))
        if self.forced_r is not None:
            r = np.full(n, float(self.forced_r))
        p = np.stack([r * np.cos(a) + 0.25, r * np.sin(a)], axis=1)
        shift = np.stack([-np.abs(theta[:, 0] + theta[:, 1]), -theta[:, 0] + theta[:, 1]], axis=1) / math.sqrt(2.0)
        return p + shift


class GaussOracle(Simulator):
    """``y = theta * xi + eps`` with Gaussian prior and noise: closed-form MI."""

    name = "gauss-oracle"
    theta_dim = 1
    xi_dim = 1
    y_dim = 1

    def __init__(self, sigma_theta=1.0, sigma_eps=1.0, low=-10.0, high=10.0):
        self.sigma_theta = float(sigma_theta)
        self.sigma_eps = float(sigma_eps)
        self.low = np.array([float(low)])
        self.high = np.array([float(high)])
        self.prior = GaussianPrior([0.0], sigma_theta)

    def simulate(self, theta, xi, rng):
        theta = np.asarray(theta, dtype=np.float64)
        xi = np.asarray(xi, dtype=np.float64)
        return theta * xi + self.sigma_eps * rng.standard_normal((theta.shape[0], 1))

    def analytic_mi(self, xi) -> float:
        xi = np.asarray(xi, dtype=np.float64)
        return 0.5 * np.log1p(xi**2 * self.sigma_theta**2 / self.sigma_eps**2)

    def conditional_entropy(self) -> float:
        """Entropy of y given (theta, xi), independent of both."""
        return 0.5 * math.log(2 * math.pi * math.e * self.sigma_eps**2)

    def posterior(self, xis, ys):
        """Conjugate posterior mean and variance of theta given observations."""
        xis = np.asarray(xis, dtype=np.float64).reshape(-1)
        ys = np.asarray(ys, dtype=np.float64).reshape(-1)
        prec = 1.0 / self.sigma_theta**2 + np.sum(xis**2) / self.sigma_eps**2
        var = 1.0 / prec
        return var * np.sum(xis * ys) / self.sigma_eps**2, var

    def likelihood(self) -> "GaussLikelihood":
        return GaussLikelihood(self.sigma_eps)


class GaussLikelihood:
    """Exact likelihood of :class:`GaussOracle` behind the flow interface."""

    y_dim = theta_dim = xi_dim = 1

    def __init__(self, sigma_eps=1.0):
        self.sigma_eps = float(sigma_eps)
        self.params = {}

    def log_prob(self, y, theta, xi, params=None):
        z = (y - theta * xi) * (1.0 / self.sigma_eps)
        lp = -0.5 * gc.square(z) - (math.log(self.sigma_eps) + 0.5 * math.log(2 * math.pi))
        return gc.sum(lp, axis=-1)

    def to_base(self, y, theta, xi, params=None):
        n = gc.value(y).shape[0]
        return (y - theta * xi) * (1.0 / self.sigma_eps), np.full(n, -math.log(self.sigma_eps))

    def from_base(self, u, theta, xi, params=None):
        n = gc.value(u).shape[0]
        return theta * xi + u * self.sigma_eps, np.full(n, math.log(self.sigma_eps))

    def pathwise(self, y, theta, xi):
        u, _ = self.to_base(gc.value(y), gc.value(theta), gc.value(xi))
        yt, _ = self.from_base(u, theta, xi)
        return y + (yt - gc.stop_gradient(yt))


# ---------------------------------------------------------------------------
# SIR


@dataclass
class SIRGrid:
    """Pre-simulated SIR trajectories on a regular time grid."""

    thetas: np.ndarray
    times: np.ndarray
    S: np.ndarray
    I: np.ndarray
    n_pop: float
    clamp_events: int = 0
    key: str = ""

    @property
    def R(self):
        return self.n_pop - self.S - self.I

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])

    def infected_at(self, idx, t):
        """Linear interpolation of I at (possibly off-grid) times."""
        idx = np.asarray(idx)
        t = np.asarray(t, dtype=np.float64)
        pos = t / self.dt
        lo = np.clip(np.floor(pos).astype(np.intp), 0, len(self.times) - 2)
        frac = pos - lo
        return self.I[idx, lo] * (1.0 - frac) + self.I[idx, lo + 1] * frac

    def save(self, path):
        np.savez(path, thetas=self.thetas, times=self.times, S=self.S, I=self.I,
                 n_pop=self.n_pop, clamp_events=self.clamp_events)

    @classmethod
    def load(cls, path, key=""):
        with np.load(path) as z:
            return cls(z["thetas"], z["times"], z["S"], z["I"], float(z["n_pop"]), int(z["clamp_events"]), key)


class SIRSimulator(Simulator):
    """Stochastic SIR epidemic measured at a design time.

    Dynamics follow the chemical-Langevin SDE integrated by Euler-Maruyama.
    ``obs_noise`` selects the measurement law: ``"gaussian"`` (I plus
    Gaussian noise of variance ``max(I, var_floor)``), ``"poisson"``
    (Poisson counts capped at the population) or ``"none"``.
    """

    name = "sir"
    theta_dim = 2
    xi_dim = 1
    y_dim = 1

    def __init__(self, n_pop=500.0, i0=2.0, dt=1e-2, t_max=100.0, obs_noise="gaussian", var_floor=1.0,
                 sde_noise=1.0, cache_dir=None):
        if obs_noise not in ("gaussian", "poisson", "none"):
            raise ValueError(f"unknown obs_noise {obs_noise!r}")
        self.n_pop = float(n_pop)
        self.i0 = float(i0)
        self.dt = float(dt)
        self.t_max = float(t_max)
        self.obs_noise = obs_noise
        self.var_floor = float(var_floor)
        self.sde_noise = float(sde_noise)
        self.low = np.array([0.0])
        self.high = np.array([self.t_max])
        self.prior = LogNormalPrior([0.5, 0.1], [0.5, 0.5])
        self.cache_dir = Path(cache_dir) if cache_dir else None

    def grid_key(self, thetas, seed):
        h = hashlib.sha256(np.ascontiguousarray(thetas, dtype=np.float64).tobytes()).hexdigest()[:16]
        return f"sir_{seed}_{h}_{self.dt:g}_{self.t_max:g}_{self.sde_noise:g}"

    def pregrid(self, thetas, seed) -> SIRGrid:
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        key = self.grid_key(thetas, seed)
        if self.cache_dir is not None:
            path = self.cache_dir / f"{key}.npz"
            if path.exists():
                return SIRGrid.load(path, key)
        grid = self._integrate(thetas, stream(seed, "sim", 101))
        grid.key = key
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            grid.save(self.cache_dir / f"{key}.npz")
        return grid

    def _integrate(self, thetas, rng) -> SIRGrid:
        n = thetas.shape[0]
        steps = int(round(self.t_max / self.dt))
        times = np.arange(steps + 1) * self.dt
        S = np.empty((n, steps + 1))
        I = np.empty((n, steps + 1))
        s = np.full(n, self.n_pop - self.i0)
        i = np.full(n, self.i0)
        S[:, 0], I[:, 0] = s, i
        beta, gamma = thetas[:, 0], thetas[:, 1]
        sq = math.sqrt(self.dt) * self.sde_noise
        clamps = 0
        for k in range(1, steps + 1):
            infect = beta * s * i / self.n_pop
            recov = gamma * i
            w1 = rng.standard_normal(n) * sq
            w2 = rng.standard_normal(n) * sq
            a = np.sqrt(infect) * w1
            s_new = s - infect * self.dt - a
            i_new = i + (infect - recov) * self.dt + a - np.sqrt(recov) * w2
            bad = (s_new < 0) | (s_new > self.n_pop)
            s_new = np.clip(s_new, 0.0, self.n_pop)
            room = self.n_pop - s_new
            bad |= (i_new < 0) | (i_new > room)
            i_new = np.clip(i_new, 0.0, room)
            clamps += int(np.count_nonzero(bad))
            if not (np.all(np.isfinite(s_new)) and np.all(np.isfinite(i_new))):
                j = int(np.flatnonzero(~np.isfinite(s_new + i_new))[0])
                raise FloatingPointError(f"SIR state non-finite at step {k} for theta={thetas[j]}")
            s, i = s_new, i_new
            S[:, k], I[:, k] = s, i
        return SIRGrid(thetas, times, S, I, self.n_pop, clamps)

    def observe(self, grid: SIRGrid, idx, xi, rng):
        """Measured infections for pool rows ``idx`` at design times ``xi``."""
        t = np.asarray(xi, dtype=np.float64).reshape(-1)
        if np.any(t < 0) or np.any(t > self.t_max):
            log.warning("SIR design time outside [0, %g]; clamping", self.t_max)
            t = np.clip(t, 0.0, self.t_max)
        inf = grid.infected_at(idx, t)
        if self.obs_noise == "gaussian":
            y = inf + np.sqrt(np.maximum(inf, self.var_floor)) * rng.standard_normal(inf.shape)
        elif self.obs_noise == "poisson":
            y = np.minimum(rng.poisson(inf).astype(np.float64), self.n_pop)
        else:
            y = inf
        return y.reshape(-1, 1)

    def simulate(self, theta, xi, rng):
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        seed = int(rng.integers(2**63))
        grid = self._integrate(theta, stream(seed, "sim", 102))
        return self.observe(grid, np.arange(theta.shape[0]), xi, rng)

    def prepare_round(self, pool, seed):
        return SIRRoundSampler(self, self.pregrid(pool, seed))


class SIRRoundSampler(RoundSampler):
    def __init__(self, sim: SIRSimulator, grid: SIRGrid):
        super().__init__(sim, grid.thetas)
        self.grid = grid

    def simulate(self, idx, xi, rng):
        return self.sim.observe(self.grid, idx, xi, rng)


def sir_ode_peak_time(beta, gamma, n_pop=500.0, i0=2.0, dt=1e-4, t_max=100.0) -> float:
    """Peak-infection time of the deterministic SIR ODE by classical RK4."""

    def f(s, i):
        inf = beta * s * i / n_pop
        return -inf, inf - gamma * i

    s, i = n_pop - i0, i0
    best_t, best_i = 0.0, i
    for k in range(1, int(round(t_max / dt)) + 1):
        k1 = f(s, i)
        k2 = f(s + 0.5 * dt * k1[0], i + 0.5 * dt * k1[1])
        k3 = f(s + 0.5 * dt * k2[0], i + 0.5 * dt * k2[1])
        k4 = f(s + dt * k3[0], i + dt * k3[1])
        s += dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        i += dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        if i > best_i:
            best_t, best_i = k * dt, i
        elif i < best_i * 0.5:
            break
    return best_t


def pilot_moments(sim: Simulator, seed: int, n: int = 1024):
    """Mean and sd of y under the prior with designs uniform over the bounds."""
    rng = stream(seed, "sim", 900)
    theta = sim.prior.sample(rng, n)
    xi = sim.low + (sim.high - sim.low) * rng.random((n, sim.xi_dim))
    y = sim.simulate(theta, xi, rng)
    sd = y.std(axis=0)
    return y.mean(axis=0), np.where(sd > 0, sd, 1.0)


def make_simulator(task: str, **kw) -> Simulator:
    if task == "linear":
        return LinearSimulator(**kw)
    if task == "sir":
        return SIRSimulator(**kw)
    if task == "two-moons":
        return TwoMoonsSimulator(**kw)
    if task == "gauss-oracle":
        return GaussOracle(**kw)
    raise ValueError(f"unknown task {task!r}")
