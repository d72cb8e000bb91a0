"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every op in this module is polymorphic: called on plain numpy arrays it
just computes the value, called with at least one :class:`Tensor` it also
records a node on that tensor's :class:`Tape`.  Model code is written once
and runs either way, which keeps the no-gradient paths (MCMC, evaluation)
free of tape overhead.

Example
-------
>>> tape = Tape()
>>> x = tape.param(np.array(3.0), name="x")
>>> y = x * x
>>> tape.backward(y)["x"]
array(6.)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tape",
    "Tensor",
    "NonFiniteError",
    "GradientReport",
    "forward",
    "backward",
    "grad_check",
    "value_and_grad",
    "value",
    "stop_gradient",
    "primitive",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "tanh",
    "softplus",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "square",
    "sum",
    "mean",
    "logsumexp",
    "cumsum",
    "gather",
    "take_along",
    "concat",
    "reshape",
    "transpose",
    "where",
    "getitem",
]


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or a gradient stops being finite."""

    def __init__(self, node: int, op: str, phase: str = "forward"):
        self.node = node
        self.op = op
        self.phase = phase
        super().__init__(f"non-finite {phase} value at node {node} ({op})")


def _all_finite(a) -> bool:
    # a finite sum implies finite entries; only fall back on overflow/NaN
    t = float(np.sum(a))
    return t - t == 0.0 or bool(np.isfinite(a).all())


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    fwd: Callable | None
    vjp: Callable | None
    value: np.ndarray | None
    trainable: bool = False
    name: str | None = None


class Tape:
    """Append-only record of operations.

    Parents of node ``i`` always have indices ``< i``.  Leaves created with
    :meth:`param` are trainable and appear in the gradient map returned by
    :meth:`backward`.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.params: list[int] = []
        self.check_finite = check_finite
        self._names: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data, name: str | None = None, trainable: bool = False) -> "Tensor":
        arr = np.array(data, dtype=np.float64)
        idx = len(self.nodes)
        if name is None:
            name = f"p{idx}" if trainable else f"c{idx}"
        if name in self._names:
            raise ValueError(f"duplicate leaf name {name!r}")
        self._names[name] = idx
        self.nodes.append(Node("leaf", (), None, None, arr, trainable, name))
        if trainable:
            self.params.append(idx)
        return Tensor(arr, self, idx)

    def param(self, data, name: str | None = None) -> "Tensor":
        return self.leaf(data, name=name, trainable=True)

    def const(self, data, name: str | None = None) -> "Tensor":
        return self.leaf(data, name=name, trainable=False)

    def _append(self, op, parents, fwd, vjp, out) -> "Tensor":
        idx = len(self.nodes)
        if self.check_finite and not _all_finite(out):
            raise NonFiniteError(idx, op)
        self.nodes.append(Node(op, tuple(p.index for p in parents), fwd, vjp, out))
        return Tensor(out, self, idx)

    def first_nonfinite(self) -> int | None:
        """Index of the first node holding a non-finite value, if any."""
        for i, node in enumerate(self.nodes):
            if node.value is not None and not np.isfinite(node.value).all():
                return i
        return None

    def clear_values(self) -> None:
        """Drop saved forward values; a later :meth:`backward` raises."""
        for node in self.nodes:
            node.value = None

    def replay(self, inputs: dict[str, np.ndarray] | None = None) -> None:
        """Recompute every node from the leaves, optionally with new leaf values.

        Index computations captured at record time (spline bin lookups,
        masks) are replayed as recorded.
        """
        inputs = inputs or {}
        unknown = set(inputs) - set(self._names)
        if unknown:
            raise KeyError(f"unknown inputs: {sorted(unknown)}")
        for name, val in inputs.items():
            node = self.nodes[self._names[name]]
            arr = np.array(val, dtype=np.float64)
            if node.value is not None and arr.shape != node.value.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: {arr.shape} vs {node.value.shape}"
                )
            node.value = arr
        for i, node in enumerate(self.nodes):
            if node.fwd is None:
                if node.value is None:
                    raise ValueError(f"leaf {node.name!r} has no value")
                continue
            out = np.asarray(node.fwd(*[self.nodes[p].value for p in node.parents]), dtype=np.float64)
            if self.check_finite and not _all_finite(out):
                raise NonFiniteError(i, node.op)
            node.value = out

    def backward(self, output: "Tensor", seed=None) -> dict[str, np.ndarray]:
        """Gradients of ``output`` w.r.t. every trainable leaf, keyed by name."""
        if output.tape is not self:
            raise ValueError("output belongs to a different tape")
        if any(n.value is None for n in self.nodes[: output.index + 1]):
            raise RuntimeError("backward called before forward")
        grads: list[np.ndarray | None] = [None] * (output.index + 1)
        if seed is None:
            seed = np.ones_like(output.data)
        seed = np.broadcast_to(np.asarray(seed, dtype=np.float64), output.data.shape)
        grads[output.index] = np.array(seed)
        nodes = self.nodes
        for i in range(output.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = nodes[i]
            if not node.parents:
                continue
            pgrads = node.vjp(g, node.value, *[nodes[p].value for p in node.parents])
            for p, gp in zip(node.parents, pgrads):
                if gp is None:
                    continue
                if self.check_finite and not _all_finite(gp):
                    raise NonFiniteError(i, node.op, phase="backward")
                grads[p] = gp if grads[p] is None else grads[p] + gp
            grads[i] = None
        out = {}
        for idx in self.params:
            node = nodes[idx]
            g = grads[idx] if idx <= output.index else None
            out[node.name] = np.zeros_like(node.value) if g is None else np.reshape(g, node.value.shape)
        return out


class Tensor:
    """Handle on a tape node; ``data`` is the forward value."""

    __slots__ = ("data", "tape", "index")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data: np.ndarray, tape: Tape, index: int):
        self.data = data
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self) -> str:
        return f"Tensor(node={self.index}, shape={self.shape})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# ---------------------------------------------------------------------------
# helpers


def value(x) -> np.ndarray:
    """Forward value of a tensor, or the array itself."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Tensor):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands live on different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def primitive(op: str, inputs: Sequence, fwd: Callable, vjp: Callable):
    """Apply ``fwd`` to ``inputs``; record a node if any input is a Tensor.

    Non-tensor inputs are baked into the node as constants.  ``vjp(g, out,
    *tensor_input_values)`` returns one gradient (or None) per Tensor input.
    """
    tape = _tape_of(*inputs)
    vals = [value(x) if isinstance(x, Tensor) else x for x in inputs]
    if tape is None:
        return np.asarray(fwd(*vals), dtype=np.float64)
    pos = [i for i, x in enumerate(inputs) if isinstance(x, Tensor)]
    parents = [inputs[i] for i in pos]
    frozen = list(vals)

    def node_fwd(*pv):
        args = list(frozen)
        for i, v in zip(pos, pv):
            args[i] = v
        return fwd(*args)

    out = np.asarray(fwd(*vals), dtype=np.float64)
    return tape._append(op, parents, node_fwd, vjp, out)


def _binary(op, a, b, fwd, ga, gb):
    """Elementwise binary op with broadcasting; ga/gb map (g, out, av, bv) to grads."""
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    if not (ta or tb):
        return np.asarray(fwd(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)))
    av = value(a)
    bv = value(b)
    tape = _tape_of(a, b)
    out = np.asarray(fwd(av, bv), dtype=np.float64)
    if ta and tb:
        def vjp(g, o, x, y):
            return _unbroadcast(ga(g, o, x, y), x.shape), _unbroadcast(gb(g, o, x, y), y.shape)

        return tape._append(op, [a, b], fwd, vjp, out)
    if ta:
        const = bv

        def vjp(g, o, x):
            return (_unbroadcast(ga(g, o, x, const), x.shape),)

        return tape._append(op, [a], lambda x: fwd(x, const), vjp, out)
    const = av

    def vjp(g, o, y):
        return (_unbroadcast(gb(g, o, const, y), y.shape),)

    return tape._append(op, [b], lambda y: fwd(const, y), vjp, out)


def _unary(op, x, fwd, dfn):
    """Elementwise unary op; dfn maps (g, out, x) to the input gradient."""
    if not isinstance(x, Tensor):
        return np.asarray(fwd(np.asarray(x, dtype=np.float64)))
    out = np.asarray(fwd(x.data), dtype=np.float64)
    return x.tape._append(op, [x], fwd, lambda g, o, v: (dfn(g, o, v),), out)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    return _binary("add", a, b, np.add, lambda g, o, x, y: g, lambda g, o, x, y: g)


def sub(a, b):
    return _binary("sub", a, b, np.subtract, lambda g, o, x, y: g, lambda g, o, x, y: -g)


def mul(a, b):
    return _binary("mul", a, b, np.multiply, lambda g, o, x, y: g * y, lambda g, o, x, y: g * x)


def div(a, b):
    return _binary(
        "div", a, b, np.divide, lambda g, o, x, y: g / y, lambda g, o, x, y: -g * o / y
    )


def neg(x):
    return _unary("neg", x, np.negative, lambda g, o, v: -g)


def tanh(x):
    return _unary("tanh", x, np.tanh, lambda g, o, v: g * (1.0 - o * o))


def _softplus(v):
    return np.logaddexp(0.0, v)


def softplus(x):
    return _unary("softplus", x, _softplus, lambda g, o, v: g * expit(v))


def sigmoid(x):
    return _unary("sigmoid", x, expit, lambda g, o, v: g * o * (1.0 - o))


def exp(x):
    return _unary("exp", x, np.exp, lambda g, o, v: g * o)


def log(x):
    return _unary("log", x, np.log, lambda g, o, v: g / v)


def sqrt(x):
    return _unary("sqrt", x, np.sqrt, lambda g, o, v: g * 0.5 / o)


def square(x):
    return _unary("square", x, np.square, lambda g, o, v: 2.0 * g * v)


def where(mask, a, b):
    """Select ``a`` where ``mask`` else ``b``; the mask is a constant."""
    mask = np.asarray(mask, dtype=bool)
    return _binary(
        "where",
        a,
        b,
        lambda x, y: np.where(mask, x, y),
        lambda g, o, x, y: np.where(mask, g, 0.0),
        lambda g, o, x, y: np.where(mask, 0.0, g),
    )


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b):
    def ga(g, o, x, y):
        return g @ y.T if y.ndim == 2 else np.outer(g, y)

    def gb(g, o, x, y):
        return x.T @ g if x.ndim == 2 else np.outer(x, g)

    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    if not (ta or tb):
        return np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)
    av, bv = value(a), value(b)
    if av.ndim > 2 or bv.ndim > 2:
        raise ValueError("matmul supports rank <= 2 operands")
    if av.shape[-1] != bv.shape[0]:
        raise ValueError(f"matmul shape mismatch {av.shape} @ {bv.shape}")
    tape = _tape_of(a, b)
    out = av @ bv
    if ta and tb:
        return tape._append("matmul", [a, b], np.matmul, lambda g, o, x, y: (ga(g, o, x, y), gb(g, o, x, y)), out)
    if ta:
        return tape._append("matmul", [a], lambda x: x @ bv, lambda g, o, x: (ga(g, o, x, bv),), out)
    return tape._append("matmul", [b], lambda y: av @ y, lambda g, o, y: (gb(g, o, av, y),), out)


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    if not isinstance(x, Tensor):
        return np.sum(x, axis=axis, keepdims=keepdims)
    out = np.asarray(np.sum(x.data, axis=axis, keepdims=keepdims), dtype=np.float64)
    shape = x.shape
    return x.tape._append(
        "sum",
        [x],
        lambda v: np.sum(v, axis=axis, keepdims=keepdims),
        lambda g, o, v: (np.array(_expand(g, shape, axis, keepdims)),),
        out,
    )


def mean(x, axis=None, keepdims=False):
    n = value(x).size if axis is None else value(x).shape[axis]
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def _lse(v, axis, keepdims):
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def logsumexp(x, axis=-1, keepdims=False):
    """Max-shifted log-sum-exp along ``axis``."""
    if not isinstance(x, Tensor):
        return _lse(np.asarray(x, dtype=np.float64), axis, keepdims)
    out = np.asarray(_lse(x.data, axis, keepdims), dtype=np.float64)

    def vjp(g, o, v):
        ok = o if keepdims else np.expand_dims(o, axis)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * np.exp(v - ok),)

    return x.tape._append("logsumexp", [x], lambda v: _lse(v, axis, keepdims), vjp, out)


def cumsum(x, axis=-1):
    def rev_cumsum(g):
        return np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)

    return _unary("cumsum", x, lambda v: np.cumsum(v, axis=axis), lambda g, o, v: rev_cumsum(g))


# ---------------------------------------------------------------------------
# indexing and shape


def gather(x, index, axis=0):
    """``np.take(x, index, axis)`` with an integer index array (repeats allowed)."""
    index = np.asarray(index, dtype=np.intp)
    if not isinstance(x, Tensor):
        return np.take(np.asarray(x, dtype=np.float64), index, axis=axis)
    shape = x.shape

    def vjp(g, o, v):
        gx = np.zeros(shape)
        np.add.at(np.moveaxis(gx, axis, 0), index, np.moveaxis(g, axis, 0))
        return (gx,)

    out = np.take(x.data, index, axis=axis)
    return x.tape._append("gather", [x], lambda v: np.take(v, index, axis=axis), vjp, out)


def take_along(x, index, axis=-1):
    """``np.take_along_axis`` with one index per lane (no duplicates along ``axis``)."""
    index = np.asarray(index, dtype=np.intp)
    if not isinstance(x, Tensor):
        return np.take_along_axis(np.asarray(x, dtype=np.float64), index, axis=axis)
    shape = x.shape

    def vjp(g, o, v):
        gx = np.zeros(shape)
        np.put_along_axis(gx, index, g, axis=axis)
        return (gx,)

    out = np.take_along_axis(x.data, index, axis=axis)
    return x.tape._append("take_along", [x], lambda v: np.take_along_axis(v, index, axis=axis), vjp, out)


def concat(xs: Sequence, axis=-1):
    if not any(isinstance(x, Tensor) for x in xs):
        return np.concatenate([np.asarray(x, dtype=np.float64) for x in xs], axis=axis)
    tape = _tape_of(*xs)
    vals = [value(x) for x in xs]
    sizes = [v.shape[axis] for v in vals]
    bounds = np.cumsum([0] + sizes)
    pos = [i for i, x in enumerate(xs) if isinstance(x, Tensor)]
    consts = list(vals)

    def fwd(*pv):
        parts = list(consts)
        for i, v in zip(pos, pv):
            parts[i] = v
        return np.concatenate(parts, axis=axis)

    def vjp(g, o, *pv):
        ax = axis % g.ndim
        out = []
        for i in pos:
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return tape._append("concat", [xs[i] for i in pos], fwd, vjp, np.concatenate(vals, axis=axis))


def reshape(x, shape):
    if not isinstance(x, Tensor):
        return np.reshape(x, shape)
    old = x.shape
    return x.tape._append(
        "reshape", [x], lambda v: np.reshape(v, shape), lambda g, o, v: (np.reshape(g, old),), np.reshape(x.data, shape)
    )


def transpose(x):
    return _unary("transpose", x, np.transpose, lambda g, o, v: np.transpose(g))


def getitem(x, key):
    """Basic indexing (ints, slices) on a tensor."""
    if not isinstance(x, Tensor):
        return np.asarray(x, dtype=np.float64)[key]
    shape = x.shape

    def vjp(g, o, v):
        gx = np.zeros(shape)
        gx[key] = g
        return (gx,)

    out = np.array(x.data[key], dtype=np.float64)
    return x.tape._append("getitem", [x], lambda v: v[key], vjp, out)


def stop_gradient(x):
    """Value of ``x`` as a new constant leaf (or the array itself)."""
    if not isinstance(x, Tensor):
        return np.asarray(x, dtype=np.float64)
    return x.tape.const(x.data.copy())


# ---------------------------------------------------------------------------
# drivers


def forward(tape: Tape, inputs: dict[str, np.ndarray] | None = None, output: Tensor | None = None) -> np.ndarray:
    """Replay ``tape`` with ``inputs`` bound to named leaves; return the output value.

    The output defaults to the last recorded node.
    """
    if not tape.nodes:
        raise ValueError("empty tape")
    tape.replay(inputs)
    idx = len(tape.nodes) - 1 if output is None else output.index
    return tape.nodes[idx].value


def backward(tape: Tape, output: Tensor, seed_gradient=None) -> dict[str, np.ndarray]:
    return tape.backward(output, seed_gradient)


def value_and_grad(f: Callable, point: np.ndarray) -> tuple[float, np.ndarray]:
    """Value and gradient of a scalar function written with gradcore ops."""
    tape = Tape()
    x = tape.param(point, name="x")
    out = f(x)
    if not isinstance(out, Tensor):
        return float(out), np.zeros_like(np.asarray(point, dtype=np.float64))
    if out.size != 1:
        raise ValueError("f must be scalar-valued")
    return float(out.data), tape.backward(out)["x"]


@dataclass
class GradientReport:
    max_rel_error: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def _rel_err(a, n):
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def grad_check(f: Callable, point, epsilon: float = 1e-5) -> GradientReport:
    """Compare the tape gradient of scalar ``f`` with central differences.

    Never raises on a bad gradient; a discontinuity shows up as a large
    relative error in the report.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    point = np.array(point, dtype=np.float64)
    _, analytic = value_and_grad(f, point)
    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    for k in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[k] += epsilon
        xm[k] -= epsilon
        fp = float(np.asarray(f(xp.reshape(point.shape))))
        fm = float(np.asarray(f(xm.reshape(point.shape))))
        numeric.reshape(-1)[k] = (fp - fm) / (2.0 * epsilon)
    err = _rel_err(analytic, numeric)
    if err.size == 0:
        return GradientReport(0.0, (), 0.0, 0.0)
    worst = np.unravel_index(int(np.argmax(err)), err.shape)
    return GradientReport(float(err[worst]), tuple(int(i) for i in worst), float(analytic[worst]), float(numeric[worst]))
