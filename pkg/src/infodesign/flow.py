"""Conditional neural spline flow ``p_phi(y | theta, xi)``.

Each bijector is a monotone rational-quadratic spline on ``[-B, B]`` with
linear (identity) tails whose bin widths, heights and interior knot
derivatives come from an MLP conditioner.  One-dimensional outcomes use
elementwise splines driven by the context alone; higher dimensions use
coupling layers with alternating parity masks.  A conditional
location/scale layer sits next to the data so the splines only have to
model shape.

Direction convention: ``to_base`` maps data to base noise (used by
``log_prob``), ``from_base`` maps noise to data (used by ``sample`` and the
pathwise outcome construction).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .sim import stream

LOG_2PI = math.log(2 * math.pi)
_MAGIC = b"IDFLOW\x00"
_VERSION = 1


# ---------------------------------------------------------------------------
# rational-quadratic splines


@dataclass
class SplineSegmentParams:
    """Normalised spline parameters for ``R`` independent rows of ``K`` bins.

    ``derivatives`` has ``K + 1`` entries per row; the two boundary values
    are pinned to 1 so the spline joins the identity tails smoothly.
    """

    knots_x: object
    knots_y: object
    widths: object
    heights: object
    derivatives: object
    tail_bound: float

    @property
    def bins(self) -> int:
        return gc.value(self.widths).shape[-1]


def _knots(raw, bound, min_bin):
    k = gc.value(raw).shape[-1]
    rows = gc.value(raw).shape[0]
    w = gc.exp(raw - gc.logsumexp(raw, axis=-1, keepdims=True))
    w = min_bin + (1.0 - min_bin * k) * w
    c = gc.cumsum(w, axis=-1)
    inner = c[:, : k - 1] * (2.0 * bound) - bound
    knots = gc.concat([np.full((rows, 1), -bound), inner, np.full((rows, 1), bound)], axis=-1)
    return knots, knots[:, 1:] - knots[:, :-1]


def spline_params(raw_w, raw_h, raw_d, tail_bound=5.0, min_bin_width=1e-3, min_bin_height=1e-3,
                  min_derivative=1e-3) -> SplineSegmentParams:
    """Map unconstrained conditioner outputs to valid spline parameters.

    ``raw_w``/``raw_h`` are ``(R, K)``, ``raw_d`` is ``(R, K - 1)``.  Zero raw
    inputs give the identity spline: uniform bins and unit derivatives.
    """
    k = gc.value(raw_w).shape[-1]
    if min_bin_width * k >= 1 or min_bin_height * k >= 1:
        raise ValueError("minimum bin size too large for the number of bins")
    kx, widths = _knots(raw_w, tail_bound, min_bin_width)
    ky, heights = _knots(raw_h, tail_bound, min_bin_height)
    shift = math.log(math.expm1(1.0 - min_derivative))
    inner = min_derivative + gc.softplus(raw_d + shift)
    rows = gc.value(raw_w).shape[0]
    ones = np.ones((rows, 1))
    derivs = gc.concat([ones, inner, ones], axis=-1)
    return SplineSegmentParams(kx, ky, widths, heights, derivs, float(tail_bound))


def _pick(arr, idx):
    return gc.reshape(gc.take_along(arr, idx[:, None], axis=-1), (idx.shape[0],))


def _bin_index(knots, x):
    kv = gc.value(knots)
    return np.sum(gc.value(x)[:, None] >= kv[:, 1:-1], axis=-1).astype(np.intp)


def rq_spline_forward(x, p: SplineSegmentParams):
    """Apply the spline to ``x`` of shape ``(R,)``; return ``(y, log|dy/dx|)``."""
    b = p.tail_bound
    xv = gc.value(x)
    if not np.all(np.isfinite(xv)):
        raise FloatingPointError("non-finite spline input")
    inside = (xv >= -b) & (xv <= b)
    xin = gc.where(inside, x, 0.0)
    idx = _bin_index(p.knots_x, np.where(inside, xv, 0.0))
    xk, wk = _pick(p.knots_x, idx), _pick(p.widths, idx)
    yk, hk = _pick(p.knots_y, idx), _pick(p.heights, idx)
    dk, dk1 = _pick(p.derivatives, idx), _pick(p.derivatives, idx + 1)
    delta = hk / wk
    t = (xin - xk) / wk
    t1mt = t * (1.0 - t)
    num = hk * (delta * gc.square(t) + dk * t1mt)
    den = delta + (dk + dk1 - 2.0 * delta) * t1mt
    out = yk + num / den
    dnum = gc.square(delta) * (dk1 * gc.square(t) + 2.0 * delta * t1mt + dk * gc.square(1.0 - t))
    lad = gc.log(dnum) - 2.0 * gc.log(den)
    return gc.where(inside, out, x), gc.where(inside, lad, 0.0)


def rq_spline_inverse(y, p: SplineSegmentParams):
    """Inverse of :func:`rq_spline_forward`; returns ``(x, log|dx/dy|)``."""
    b = p.tail_bound
    yv = gc.value(y)
    if not np.all(np.isfinite(yv)):
        raise FloatingPointError("non-finite spline input")
    inside = (yv >= -b) & (yv <= b)
    yin = gc.where(inside, y, 0.0)
    idx = _bin_index(p.knots_y, np.where(inside, yv, 0.0))
    xk, wk = _pick(p.knots_x, idx), _pick(p.widths, idx)
    yk, hk = _pick(p.knots_y, idx), _pick(p.heights, idx)
    dk, dk1 = _pick(p.derivatives, idx), _pick(p.derivatives, idx + 1)
    delta = hk / wk
    dy = yin - yk
    s = dk + dk1 - 2.0 * delta
    a = dy * s + hk * (delta - dk)
    bq = hk * dk - dy * s
    c = -delta * dy
    disc = gc.square(bq) - 4.0 * a * c
    root = (2.0 * c) / (-bq - gc.sqrt(disc))
    out = root * wk + xk
    t1mt = root * (1.0 - root)
    den = delta + s * t1mt
    dnum = gc.square(delta) * (dk1 * gc.square(root) + 2.0 * delta * t1mt + dk * gc.square(1.0 - root))
    lad = 2.0 * gc.log(den) - gc.log(dnum)
    return gc.where(inside, out, y), gc.where(inside, lad, 0.0)


# ---------------------------------------------------------------------------
# conditioners


def mlp(params, prefix, h, depth):
    for j in range(depth):
        h = gc.tanh(h @ params[f"{prefix}.w{j}"] + params[f"{prefix}.b{j}"])
    return h @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"]


def mlp_param_count(n_in, hidden, depth, n_out):
    if depth == 0:
        return n_in * n_out + n_out
    return n_in * hidden + hidden + (depth - 1) * (hidden * hidden + hidden) + hidden * n_out + n_out


def _init_mlp(params, prefix, rng, n_in, hidden, depth, n_out):
    width = n_in
    for j in range(depth):
        lim = math.sqrt(6.0 / (width + hidden))
        params[f"{prefix}.w{j}"] = rng.uniform(-lim, lim, size=(width, hidden))
        params[f"{prefix}.b{j}"] = np.zeros(hidden)
        width = hidden
    params[f"{prefix}.wo"] = np.zeros((width, n_out))
    params[f"{prefix}.bo"] = np.zeros(n_out)


# ---------------------------------------------------------------------------
# flow


@dataclass
class FlowConfig:
    y_dim: int
    theta_dim: int
    xi_dim: int = 0
    n_bijectors: int = 5
    hidden: int = 64
    depth: int = 2
    bins: int = 4
    tail_bound: float = 5.0
    min_bin_width: float = 1e-3
    min_bin_height: float = 1e-3
    min_derivative: float = 1e-3
    affine: bool = True
    seed: int = 0
    theta_loc: list | None = None
    theta_scale: list | None = None
    xi_low: list | None = None
    xi_high: list | None = None
    y_loc: list | None = None
    y_scale: list | None = None

    def __post_init__(self):
        if self.y_dim < 1 or self.theta_dim < 0 or self.xi_dim < 0:
            raise ValueError("invalid flow dimensions")
        if self.bins < 2 or self.n_bijectors < 0 or self.hidden < 1 or self.depth < 0:
            raise ValueError("invalid flow architecture")

        def fill(v, n, default):
            return [float(default)] * n if v is None else [float(a) for a in np.broadcast_to(v, (n,))]

        self.theta_loc = fill(self.theta_loc, self.theta_dim, 0.0)
        self.theta_scale = fill(self.theta_scale, self.theta_dim, 1.0)
        self.xi_low = fill(self.xi_low, self.xi_dim, -1.0)
        self.xi_high = fill(self.xi_high, self.xi_dim, 1.0)
        self.y_loc = fill(self.y_loc, self.y_dim, 0.0)
        self.y_scale = fill(self.y_scale, self.y_dim, 1.0)
        if np.any(np.asarray(self.xi_high) <= np.asarray(self.xi_low)):
            raise ValueError("design bounds must satisfy low < high")

    @property
    def ctx_dim(self):
        return self.theta_dim + self.xi_dim

    def split(self, k):
        """(identity coords, transformed coords) of bijector ``k``."""
        if self.y_dim == 1:
            return [], [0]
        trans = [j for j in range(self.y_dim) if j % 2 != k % 2]
        ident = [j for j in range(self.y_dim) if j % 2 == k % 2]
        return ident, trans

    def expected_param_count(self) -> int:
        n = 0
        per = 3 * self.bins - 1
        for k in range(self.n_bijectors):
            ident, trans = self.split(k)
            n += mlp_param_count(len(ident) + self.ctx_dim, self.hidden, self.depth, len(trans) * per)
        if self.affine:
            n += mlp_param_count(self.ctx_dim, self.hidden, self.depth, 2 * self.y_dim)
        return n


class ConditionalFlow:
    def __init__(self, config: FlowConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        c = config
        self._theta_loc = np.asarray(c.theta_loc)
        self._theta_scale = np.asarray(c.theta_scale)
        self._xi_low = np.asarray(c.xi_low)
        self._xi_span = np.asarray(c.xi_high) - self._xi_low
        self._y_loc = np.asarray(c.y_loc)
        self._y_scale = np.asarray(c.y_scale)
        self._splits = [c.split(k) for k in range(c.n_bijectors)]

    # -- parameters --------------------------------------------------------

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.params.values()]) if self.params else np.zeros(0)

    def set_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise ValueError("flat parameter vector has wrong size")
        pos = 0
        for k, v in self.params.items():
            self.params[k] = vec[pos : pos + v.size].reshape(v.shape).copy()
            pos += v.size

    def copy(self) -> "ConditionalFlow":
        return ConditionalFlow(self.config, {k: v.copy() for k, v in self.params.items()})

    # -- core maps ---------------------------------------------------------

    def context(self, theta, xi):
        parts = []
        if self.config.theta_dim:
            parts.append((theta - self._theta_loc) * (1.0 / self._theta_scale))
        if self.config.xi_dim:
            parts.append((xi - self._xi_low) * (2.0 / self._xi_span) - 1.0)
        return gc.concat(parts, axis=-1)

    def _spline(self, params, k, z_ident, ctx, rows, n_trans):
        c = self.config
        inp = ctx if z_ident is None else gc.concat([z_ident, ctx], axis=-1)
        raw = gc.reshape(mlp(params, f"b{k}", inp, c.depth), (rows * n_trans, 3 * c.bins - 1))
        K = c.bins
        return spline_params(raw[:, :K], raw[:, K : 2 * K], raw[:, 2 * K :], c.tail_bound,
                             c.min_bin_width, c.min_bin_height, c.min_derivative)

    def _affine(self, params, ctx):
        d = self.config.y_dim
        out = mlp(params, "a", ctx, self.config.depth)
        shift = out[:, :d]
        log_scale = 5.0 * gc.tanh(out[:, d:] * 0.2)
        return shift, log_scale

    def _check(self, y, theta, xi):
        c = self.config
        rows = gc.value(y).shape[0]
        if gc.value(y).shape != (rows, c.y_dim):
            raise ValueError(f"y must have shape (rows, {c.y_dim})")
        if c.theta_dim and gc.value(theta).shape != (rows, c.theta_dim):
            raise ValueError(f"theta must have shape ({rows}, {c.theta_dim})")
        if c.xi_dim and gc.value(xi).shape != (rows, c.xi_dim):
            raise ValueError(f"xi must have shape ({rows}, {c.xi_dim})")
        return rows

    def to_base(self, y, theta, xi=None, params=None):
        """Map outcomes to base noise; return ``(u, log|du/dy|)``."""
        params = self.params if params is None else params
        rows = self._check(y, theta, xi)
        ctx = self.context(theta, xi)
        z = (y - self._y_loc) * (1.0 / self._y_scale)
        logdet = np.full(rows, -float(np.sum(np.log(self._y_scale))))
        if self.config.affine:
            shift, log_scale = self._affine(params, ctx)
            z = (z - shift) * gc.exp(-log_scale)
            logdet = logdet - gc.sum(log_scale, axis=-1)
        for k, (ident, trans) in enumerate(self._splits):
            z, ld = self._step(params, k, z, ctx, rows, ident, trans, inverse=False)
            logdet = logdet + ld
            if not np.all(np.isfinite(gc.value(logdet))):
                raise FloatingPointError(f"non-finite log-density after bijector {k}")
        return z, logdet

    def from_base(self, u, theta, xi=None, params=None):
        """Map base noise to outcomes; return ``(y, log|dy/du|)``."""
        params = self.params if params is None else params
        rows = self._check(u, theta, xi)
        ctx = self.context(theta, xi)
        z = u
        logdet = np.zeros(rows)
        for k in reversed(range(len(self._splits))):
            ident, trans = self._splits[k]
            z, ld = self._step(params, k, z, ctx, rows, ident, trans, inverse=True)
            logdet = logdet + ld
        if self.config.affine:
            shift, log_scale = self._affine(params, ctx)
            z = z * gc.exp(log_scale) + shift
            logdet = logdet + gc.sum(log_scale, axis=-1)
        y = z * self._y_scale + self._y_loc
        return y, logdet + float(np.sum(np.log(self._y_scale)))

    def _step(self, params, k, z, ctx, rows, ident, trans, inverse):
        d = self.config.y_dim
        if ident:
            z_id = gc.gather(z, ident, axis=1)
            z_tr = gc.gather(z, trans, axis=1)
        else:
            z_id, z_tr = None, z
        sp = self._spline(params, k, z_id, ctx, rows, len(trans))
        flat = gc.reshape(z_tr, (rows * len(trans),))
        out, lad = (rq_spline_inverse if inverse else rq_spline_forward)(flat, sp)
        out = gc.reshape(out, (rows, len(trans)))
        ld = gc.sum(gc.reshape(lad, (rows, len(trans))), axis=-1)
        if ident:
            perm = np.argsort(np.asarray(ident + trans))
            out = gc.gather(gc.concat([z_id, out], axis=1), perm, axis=1)
        elif d != len(trans):
            raise AssertionError("elementwise step must transform every coordinate")
        return out, ld

    # -- public API ----------------------------------------------------------

    def log_prob(self, y, theta, xi=None, params=None):
        """``log p_phi(y | theta, xi)`` per row."""
        u, logdet = self.to_base(y, theta, xi, params)
        base = gc.sum(gc.square(u), axis=-1) * -0.5 - 0.5 * LOG_2PI * self.config.y_dim
        return base + logdet

    def sample(self, theta, xi=None, seed: int = 0, params=None):
        """``y = f^{-1}(u)`` with ``u`` standard normal from the keyed stream."""
        rows = gc.value(theta).shape[0] if self.config.theta_dim else gc.value(xi).shape[0]
        u = stream(seed, "flow", 1).standard_normal((rows, self.config.y_dim))
        return self.from_base(u, theta, xi, params)[0]

    def pathwise(self, y, theta, xi):
        """Outcomes carrying a reparameterised dependence on ``xi``.

        The value is exactly ``y``; the gradient w.r.t. ``xi`` (and
        ``theta``) is that of ``f^{-1}(u; theta, xi)`` at the fixed noise
        ``u = f(y)``.  Flow parameters are held constant along this path.
        """
        u, _ = self.to_base(gc.value(y), gc.value(theta), None if xi is None else gc.value(xi))
        yt, _ = self.from_base(u, theta, xi)
        return y + (yt - gc.stop_gradient(yt))


def init_flow(config: FlowConfig) -> ConditionalFlow:
    """Seeded initialisation; zero output layers make every bijector the identity."""
    rng = stream(config.seed, "flow", 0)
    params: dict[str, np.ndarray] = {}
    per = 3 * config.bins - 1
    for k in range(config.n_bijectors):
        ident, trans = config.split(k)
        _init_mlp(params, f"b{k}", rng, len(ident) + config.ctx_dim, config.hidden, config.depth, len(trans) * per)
    if config.affine:
        _init_mlp(params, "a", rng, config.ctx_dim, config.hidden, config.depth, 2 * config.y_dim)
    return ConditionalFlow(config, params)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, flow: ConditionalFlow, step: int = 0, seed: int | None = None) -> Path:
    """Binary record: magic, version, JSON header, little-endian float64 phi."""
    path = Path(path)
    header = {
        "config": asdict(flow.config),
        "seed": flow.config.seed if seed is None else seed,
        "step": int(step),
        "names": list(flow.params),
        "shapes": [list(v.shape) for v in flow.params.values()],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(hb)))
        fh.write(hb)
        fh.write(flow.flat().astype("<f8").tobytes())
    return path


def load_checkpoint(path) -> tuple[ConditionalFlow, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a flow checkpoint")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen))
        flat = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    params = {}
    pos = 0
    for name, shape in zip(header["names"], header["shapes"]):
        n = int(np.prod(shape)) if shape else 1
        params[name] = flat[pos : pos + n].reshape(shape).copy()
        pos += n
    if pos != flat.size:
        raise ValueError(f"{path}: parameter payload size mismatch")
    return ConditionalFlow(FlowConfig(**header["config"]), params), header
