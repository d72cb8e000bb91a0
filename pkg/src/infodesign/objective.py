"""Contrastive mutual-information bounds built on a conditional likelihood.

Every estimator works from the ``N x (L + 1)`` matrix of log-likelihoods
``M[i, l] = log p(y_i | theta_l, xi_i)`` where column 0 holds the root
parameter that generated ``y_i`` and columns ``1..L`` hold contrastive
draws.  The likelihood model is anything exposing
``log_prob(y, theta, xi, params=None)``: a :class:`~infodesign.flow.ConditionalFlow`
or an analytic likelihood used as an oracle.

All estimates are in nats, with ``log(L + 1)`` folded into each row so
values sit on the same scale as the ``log(L + 1)`` cap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc


@dataclass
class ContrastiveBatch:
    """One training batch.

    ``theta_contrast`` is ``(L, d)`` when shared across rows or
    ``(N, L, d)`` for per-row contrastive draws.  ``y`` and ``xi`` may be
    tape tensors so gradients reach the design.
    """

    theta0: np.ndarray
    theta_contrast: np.ndarray
    y: object
    xi: object = None
    lam: float = 0.0

    def __post_init__(self):
        self.theta0 = np.asarray(self.theta0, dtype=np.float64)
        self.theta_contrast = np.asarray(self.theta_contrast, dtype=np.float64)
        if self.theta0.ndim != 2:
            raise ValueError("theta0 must be (N, d)")
        if self.theta_contrast.ndim not in (2, 3):
            raise ValueError("theta_contrast must be (L, d) or (N, L, d)")
        if gc.value(self.y).shape[0] != self.n:
            raise ValueError("y and theta0 disagree on batch size")
        if not math.isfinite(self.lam):
            raise ValueError("lambda must be finite")

    @property
    def n(self) -> int:
        return self.theta0.shape[0]

    @property
    def L(self) -> int:
        return self.theta_contrast.shape[-2]

    @property
    def per_row(self) -> bool:
        return self.theta_contrast.ndim == 3

    def all_thetas(self) -> np.ndarray:
        """``(N, L + 1, d)`` with the root parameter in column 0."""
        c = self.theta_contrast
        if not self.per_row:
            c = np.broadcast_to(c, (self.n,) + c.shape)
        return np.concatenate([self.theta0[:, None, :], c], axis=1)


@dataclass
class MIEstimate:
    value: float
    per_row: np.ndarray
    bound_cap: float
    lam: float
    tensor: object = None

    @property
    def se(self) -> float:
        n = self.per_row.size
        return float(np.std(self.per_row, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")


def loglik_matrix(model, batch: ContrastiveBatch, params=None):
    """``M[i, l] = log p(y_i | theta_l, xi_i)``, shape ``(N, L + 1)``."""
    n, k = batch.n, batch.L + 1
    thetas = batch.all_thetas().reshape(n * k, -1)
    rows = np.repeat(np.arange(n), k)
    y = gc.gather(batch.y, rows, axis=0)
    xi = None if batch.xi is None else gc.gather(batch.xi, rows, axis=0)
    lp = model.log_prob(y, thetas, xi, params=params)
    m = gc.reshape(lp, (n, k))
    bad = ~np.isfinite(gc.value(m))
    if bad.any():
        raise FloatingPointError(f"non-finite log-likelihood in batch row {int(np.argwhere(bad)[0, 0])}")
    return m


def _estimate(rows, batch, lam):
    vals = np.array(gc.value(rows), dtype=np.float64)
    tensor = gc.mean(rows) if isinstance(rows, gc.Tensor) else None
    return MIEstimate(float(np.mean(vals)), vals, math.log(batch.L + 1), lam, tensor)


def nce_rows(m, n_contrast: int):
    """``M0 - logsumexp_l M_l + log(L + 1)`` per row."""
    return m[:, 0] - gc.logsumexp(m, axis=1) + math.log(n_contrast + 1)


def nce_loss(model, batch: ContrastiveBatch, params=None, m=None) -> MIEstimate:
    """Likelihood-based InfoNCE bound; ``batch.lam`` is ignored."""
    m = loglik_matrix(model, batch, params) if m is None else m
    return _estimate(nce_rows(m, batch.L), batch, 0.0)


def nce_lambda_loss(model, batch: ContrastiveBatch, params=None, m=None) -> MIEstimate:
    """NCE rows plus ``lam * log p(y | theta0, xi)``."""
    m = loglik_matrix(model, batch, params) if m is None else m
    rows = nce_rows(m, batch.L)
    if batch.lam != 0.0:
        rows = rows + batch.lam * m[:, 0]
    return _estimate(rows, batch, batch.lam)


def info_nce_lambda(model, batch: ContrastiveBatch, params=None, m=None) -> MIEstimate:
    """``(1 + lam) M0 - logsumexp_l M_l + log(L + 1)`` per row.

    Same quantity as :func:`nce_lambda_loss`, grouped as a likelihood raised
    to the power ``1 + lam`` over the contrastive mean.
    """
    m = loglik_matrix(model, batch, params) if m is None else m
    anchor = m[:, 0] if batch.lam == 0.0 else (1.0 + batch.lam) * m[:, 0]
    rows = anchor - gc.logsumexp(m, axis=1) + math.log(batch.L + 1)
    return _estimate(rows, batch, batch.lam)


def eig_per_design(model, batch: ContrastiveBatch, params=None, m=None):
    """Per-row information gain for the design attached to each row.

    Returns ``(per_design, estimate)``; ``estimate.value`` is the batch
    mean used as the step's scalar EIG.
    """
    est = info_nce_lambda(model, batch, params, m)
    return est.per_row, est


def eig_lambda_derivative(model, batch: ContrastiveBatch, params=None, m=None) -> float:
    """Exact ``d EIG / d lam`` of the batch estimate: the mean anchor log-likelihood."""
    m = loglik_matrix(model, batch, params) if m is None else m
    return float(np.mean(gc.value(m)[:, 0]))


def cre_rows(m, n_contrast: int):
    """Classifier-style ratio whose denominator averages only contrastive terms.

    Exceeds the NCE row exactly when the anchor likelihood beats the
    contrastive mean; see :func:`cre_gap`.
    """
    if n_contrast < 1:
        raise ValueError("need at least one contrastive draw")
    return m[:, 0] - gc.logsumexp(m[:, 1:], axis=1) + math.log(n_contrast)


def cre_gap(m, n_contrast: int) -> np.ndarray:
    """``nce_rows - cre_rows`` in closed form: ``log mean_{1..L} p - log mean_{0..L} p``."""
    mv = gc.value(m)
    return (gc.logsumexp(mv[:, 1:], axis=1) - math.log(n_contrast)) - (
        gc.logsumexp(mv, axis=1) - math.log(n_contrast + 1)
    )


def nwj_bound(critic, joint, marginal=None, rng: np.random.Generator | None = None):
    """``E_joint[T] - exp(-1) E_marginal[exp T]`` for critic ``T(y, theta, xi)``.

    ``joint`` and ``marginal`` are ``(y, theta, xi)`` tuples.  Without an
    explicit marginal set, one is formed by pairing each ``y`` with the
    ``theta`` of another row (a random derangement).  Returns
    ``(value, standard_error)``.
    """
    y, theta, xi = joint
    n = np.asarray(y).shape[0]
    if marginal is None:
        if n < 2:
            raise ValueError("need at least two joint samples to shuffle")
        rng = np.random.default_rng(0) if rng is None else rng
        perm = rng.permutation(n)
        shift = np.roll(perm, 1)
        partner = np.empty(n, dtype=np.intp)
        partner[perm] = shift
        marginal = (y, np.asarray(theta)[partner], xi)
    tj = np.asarray(critic(*joint), dtype=np.float64)
    tm = np.asarray(critic(*marginal), dtype=np.float64)
    with np.errstate(over="raise"):
        try:
            em = np.exp(tm - 1.0)
        except FloatingPointError as exc:
            raise FloatingPointError("critic overflow in exp on marginal samples") from exc
    if not np.all(np.isfinite(em)):
        raise FloatingPointError("critic overflow in exp on marginal samples")
    value = float(np.mean(tj) - np.mean(em))
    se = math.sqrt(np.var(tj, ddof=1) / tj.size + np.var(em, ddof=1) / em.size) if min(tj.size, em.size) > 1 else float("nan")
    return value, se


def validation_loglik(model, y, theta, xi=None, params=None):
    """Mean ``log p(y | theta, xi)`` on held-out data; returns ``(mean, se)``."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] == 0:
        raise ValueError("empty held-out set")
    lp = np.asarray(gc.value(model.log_prob(y, theta, xi, params=params)))
    se = float(np.std(lp, ddof=1) / math.sqrt(lp.size)) if lp.size > 1 else float("nan")
    return float(np.mean(lp)), se
