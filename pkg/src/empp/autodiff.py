"""Eager reverse-mode differentiation on an append-only tape.

Every primitive computes its forward value immediately and registers a
vector-Jacobian product. ``Tape.backward`` walks the records in reverse
insertion order, so each node is visited exactly once.

Shapes must match exactly. The only implicit broadcast is a 0-d scalar
against a tensor; anything else goes through the explicit ``broadcast_to``
primitive.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .so3 import cg_contract

__all__ = [
    "Parameter",
    "Node",
    "Tape",
    "RecordingError",
    "PRIMITIVES",
    "check_gradient",
    "GradCheck",
]


class RecordingError(ValueError):
    """A primitive was recorded with inputs of incompatible shape."""


class Parameter:
    """A named trainable array with a gradient accumulator of the same shape."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Node:
    __slots__ = ("tape", "id", "value")

    def __init__(self, tape: "Tape", id: int, value: np.ndarray):
        self.tape = tape
        self.id = id
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return self.tape.add(self, self.tape.lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, self.tape.lift(other))

    def __rsub__(self, other):
        return self.tape.sub(self.tape.lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.scale(self, float(other))
        return self.tape.mul(self, self.tape.lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return self.tape.scale(self, 1.0 / float(other))
        return self.tape.div(self, self.tape.lift(other))

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __getitem__(self, index):
        return self.tape.slice(self, index)

    def __repr__(self) -> str:
        return f"Node(#{self.id}, shape={self.shape})"


# --------------------------------------------------------------------------
# primitives: forward(*values, **attrs) -> value
#             vjp(g, out, *values, **attrs) -> tuple of input cotangents
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    vjp: Callable
    check: Callable | None = None


def _same_or_scalar(op, a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise RecordingError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g, shape):
    return g.sum() if shape == () and g.shape != () else g


def _vjp_mul(g, out, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _vjp_div(g, out, a, b):
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)


def _check_matmul(x, w):
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise RecordingError(f"matmul: cannot apply {w.shape} matrix to {x.shape}")


def _check_lmatmul(x, a):
    if a.ndim != 2 or x.ndim < 2 or x.shape[-2] != a.shape[1]:
        raise RecordingError(f"lmatmul: cannot apply {a.shape} matrix to axis -2 of {x.shape}")


def _vjp_matmul(g, out, x, w):
    gx = g @ w.T
    gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return gx, gw


def _cg_forward(u, v, *rest, cg):
    # u (B, d1, c); v (B, d2) shared over channels or (B, d2, c); optional w (B, c)
    out = cg_contract(u, v, cg)
    if rest:
        out = out * rest[0][:, None, :]
    return out


def _cg_check(u, v, *rest, cg):
    d1, d2, d3 = cg.shape
    if u.ndim != 3 or u.shape[1] != d1:
        raise RecordingError(f"cg: u has shape {u.shape}, table expects (B, {d1}, c)")
    if v.ndim == 2:
        if v.shape != (u.shape[0], d2):
            raise RecordingError(f"cg: v has shape {v.shape}, expected {(u.shape[0], d2)}")
    elif v.shape != (u.shape[0], d2, u.shape[2]):
        raise RecordingError(f"cg: v has shape {v.shape}, expected {(u.shape[0], d2, u.shape[2])}")
    if rest and rest[0].shape != (u.shape[0], u.shape[2]):
        raise RecordingError(f"cg: path weights have shape {rest[0].shape}, expected {(u.shape[0], u.shape[2])}")


def _cg_vjp(g, out, u, v, *rest, cg):
    if rest:
        w = rest[0]
        # recompute the unweighted product rather than dividing by w
        gw = np.einsum("bkc,bkc->bc", g, cg_contract(u, v, cg))
        g = g * w[:, None, :]
    if v.ndim == 2:
        t = np.einsum("bj,ijk->bik", v, cg)  # (B, d1, d3)
        gu = np.matmul(t, g)
        gv = np.einsum("bkc,bic,ijk->bj", g, u, cg, optimize=True)
    else:
        gu = np.einsum("bkc,bjc,ijk->bic", g, v, cg, optimize=True)
        gv = np.einsum("bkc,bic,ijk->bjc", g, u, cg, optimize=True)
    return (gu, gv, gw) if rest else (gu, gv)


def _concat_vjp(g, out, *xs, axis):
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _slice_vjp(g, out, x, index):
    gx = np.zeros_like(x)
    gx[index] = g
    return (gx,)


def _softmax(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_vjp(g, out, x, axis):
    return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


def _log_softmax(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _log_softmax_vjp(g, out, x, axis):
    return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)


def _sum_vjp(g, out, x, axis, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _mean_vjp(g, out, x, axis, keepdims=False):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    (gx,) = _sum_vjp(g, out, x, axis, keepdims)
    return (gx / n,)


def _gather_vjp(g, out, x, index):
    return (_scatter(g, index, x.shape[0]),)


def _scatter(x, index, n):
    index = np.asarray(index)
    mat = sp.csr_matrix(
        (np.ones(index.size), (index, np.arange(index.size))), shape=(n, index.size)
    )
    return np.asarray(mat @ x.reshape(index.size, -1)).reshape((n,) + x.shape[1:])


def _scatter_check(x, index, n):
    if np.asarray(index).shape != (x.shape[0],):
        raise RecordingError(f"scatter_add: index of shape {np.shape(index)} for {x.shape[0]} rows")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu_vjp(g, out, x):
    s = _sigmoid(x)
    return (g * (s + x * s * (1 - s)),)


def _sqrt_vjp(g, out, x):
    safe = np.where(out > 0, out, 1.0)
    return (np.where(out > 0, g / (2 * safe), 0.0),)


def _broadcast_check(x, shape):
    try:
        np.broadcast_to(x, shape)
    except ValueError as exc:
        raise RecordingError(f"broadcast_to: {x.shape} -> {shape}: {exc}") from None


def _broadcast_vjp(g, out, x, shape):
    lead = g.ndim - x.ndim
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(x.shape) if n == 1 and g.shape[lead + i] != 1
    )
    return (g.sum(axis=axes).reshape(x.shape),)


PRIMITIVES: dict[str, Primitive] = {
    p.name: p
    for p in [
        Primitive("add", lambda a, b: a + b,
                  lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
                  lambda a, b: _same_or_scalar("add", a, b)),
        Primitive("sub", lambda a, b: a - b,
                  lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
                  lambda a, b: _same_or_scalar("sub", a, b)),
        Primitive("scale", lambda x, c: c * x, lambda g, o, x, c: (c * g,)),
        Primitive("mul", lambda a, b: a * b, _vjp_mul,
                  lambda a, b: _same_or_scalar("mul", a, b)),
        Primitive("div", lambda a, b: a / b, _vjp_div,
                  lambda a, b: _same_or_scalar("div", a, b)),
        Primitive("matmul", lambda x, w: x @ w, _vjp_matmul, _check_matmul),
        Primitive("lmatmul", lambda x, a: np.matmul(a, x),
                  lambda g, o, x, a: (np.matmul(a.T, g),), _check_lmatmul),
        Primitive("cg", _cg_forward, _cg_vjp, _cg_check),
        Primitive("transpose", lambda x, axes: np.transpose(x, axes).copy(),
                  lambda g, o, x, axes: (np.transpose(g, np.argsort(axes)),)),
        Primitive("abs", np.abs, lambda g, o, x: (g * np.sign(x),)),
        Primitive("concat", lambda *xs, axis: np.concatenate(xs, axis=axis), _concat_vjp),
        Primitive("slice", lambda x, index: x[index].copy(), _slice_vjp),
        Primitive("reshape", lambda x, shape: x.reshape(shape),
                  lambda g, o, x, shape: (g.reshape(x.shape),)),
        Primitive("broadcast_to", lambda x, shape: np.broadcast_to(x, shape).copy(),
                  _broadcast_vjp, _broadcast_check),
        Primitive("exp", np.exp, lambda g, o, x: (g * o,)),
        Primitive("log", np.log, lambda g, o, x: (g / x,)),
        Primitive("sqrt", np.sqrt, _sqrt_vjp),
        Primitive("softmax", _softmax, _softmax_vjp),
        Primitive("log_softmax", _log_softmax, _log_softmax_vjp),
        Primitive("sum", lambda x, axis, keepdims=False: np.asarray(x.sum(axis=axis, keepdims=keepdims)), _sum_vjp),
        Primitive("mean", lambda x, axis, keepdims=False: np.asarray(x.mean(axis=axis, keepdims=keepdims)), _mean_vjp),
        Primitive("gather", lambda x, index: x[index], _gather_vjp),
        Primitive("scatter_add", lambda x, index, n: _scatter(x, index, n),
                  lambda g, o, x, index, n: (g[index],), _scatter_check),
        Primitive("silu", lambda x: x * _sigmoid(x), _silu_vjp),
        Primitive("sigmoid", _sigmoid, lambda g, o, x: (g * o * (1 - o),)),
        Primitive("clip_min", lambda x, c: np.maximum(x, c),
                  lambda g, o, x, c: (np.where(x >= c, g, 0.0),)),
    ]
}

@dataclass
class _Record:
    op: str
    inputs: tuple[int, ...]
    attrs: dict


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.records: list[_Record | None] = []
        self.values: list[np.ndarray] = []
        self._params: dict[int, Parameter] = {}
        # leaf ids, not Nodes: a Node refers back to its tape and would form a cycle
        self._param_leaf: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.values)

    # -- leaves -----------------------------------------------------------

    def constant(self, value) -> Node:
        return self._leaf(np.asarray(value, dtype=np.float64))

    def param(self, p: Parameter) -> Node:
        leaf = self._param_leaf.get(id(p))
        if leaf is not None:
            return Node(self, leaf, self.values[leaf])
        node = self._leaf(p.value)
        self._params[node.id] = p
        self._param_leaf[id(p)] = node.id
        return node

    def lift(self, x) -> Node:
        return x if isinstance(x, Node) else self.constant(x)

    def _leaf(self, value: np.ndarray) -> Node:
        self.records.append(None)
        self.values.append(value)
        return Node(self, len(self.values) - 1, value)

    # -- recording ----------------------------------------------------------

    def record(self, op: str, inputs: Sequence[Node | int], **attrs) -> Node:
        prim = PRIMITIVES.get(op)
        if prim is None:
            raise RecordingError(f"unknown primitive {op!r}")
        # bare arrays become constants; plain ints stay node ids
        inputs = [self.constant(i) if isinstance(i, (np.ndarray, float)) else i for i in inputs]
        ids = tuple(i.id if isinstance(i, Node) else int(i) for i in inputs)
        for i, node in zip(ids, inputs):
            if isinstance(node, Node) and node.tape is not self:
                raise RecordingError(f"{op}: input #{i} belongs to another tape")
        vals = [self.values[i] for i in ids]
        if prim.check is not None:
            try:
                prim.check(*vals, **attrs)
            except RecordingError as exc:
                raise RecordingError(f"node #{len(self.values)} ({op} of {list(ids)}): {exc}") from None
        out = np.asarray(prim.forward(*vals, **attrs), dtype=np.float64)
        self.records.append(_Record(op, ids, attrs))
        self.values.append(out)
        return Node(self, len(self.values) - 1, out)

    # -- backward -----------------------------------------------------------

    def backward(self, loss: Node | int) -> dict[str, np.ndarray]:
        """Accumulate d(loss)/d(parameter) into every ``Parameter.grad``.

        Returns the gradients contributed by this call, keyed by name.
        """
        lid = loss.id if isinstance(loss, Node) else int(loss)
        if self.values[lid].size != 1:
            raise ValueError(f"loss must be a scalar, node #{lid} has shape {self.values[lid].shape}")
        grads: list[np.ndarray | None] = [None] * (lid + 1)
        grads[lid] = np.ones_like(self.values[lid])
        for nid in range(lid, -1, -1):
            g = grads[nid]
            rec = self.records[nid]
            if g is None or rec is None:
                continue
            prim = PRIMITIVES[rec.op]
            in_vals = [self.values[i] for i in rec.inputs]
            cots = prim.vjp(g, self.values[nid], *in_vals, **rec.attrs)
            for i, c in zip(rec.inputs, cots):
                if c is None:
                    continue
                grads[i] = c if grads[i] is None else grads[i] + c
            grads[nid] = None if nid != lid else grads[nid]
        out: dict[str, np.ndarray] = {}
        for nid, p in self._params.items():
            g = grads[nid] if nid <= lid else None
            if g is None:
                g = np.zeros_like(p.value)
            p.grad += g
            out[p.name] = g
        return out

    # -- sugar ----------------------------------------------------------------

    def add(self, a, b):
        return self.record("add", [a, b])

    def sub(self, a, b):
        return self.record("sub", [a, b])

    def scale(self, x, c: float):
        return self.record("scale", [x], c=float(c))

    def mul(self, a, b):
        return self.record("mul", [a, b])

    def div(self, a, b):
        return self.record("div", [a, b])

    def matmul(self, x, w):
        return self.record("matmul", [x, w])

    def lmatmul(self, a: np.ndarray, x):
        """Constant matrix applied along axis -2: ``a @ x``."""
        return self.record("lmatmul", [x], a=np.asarray(a, dtype=np.float64))

    def transpose(self, x, axes):
        return self.record("transpose", [x], axes=tuple(axes))

    def abs(self, x):
        return self.record("abs", [x])

    def cg(self, u, v, table: np.ndarray, weights=None):
        inputs = [u, v] if weights is None else [u, v, weights]
        return self.record("cg", inputs, cg=table)

    def concat(self, xs: Iterable[Node], axis: int = 0):
        return self.record("concat", list(xs), axis=axis)

    def slice(self, x, index):
        return self.record("slice", [x], index=index)

    def reshape(self, x, shape):
        return self.record("reshape", [x], shape=tuple(shape))

    def broadcast_to(self, x, shape):
        return self.record("broadcast_to", [x], shape=tuple(shape))

    def exp(self, x):
        return self.record("exp", [x])

    def log(self, x):
        return self.record("log", [x])

    def sqrt(self, x):
        return self.record("sqrt", [x])

    def softmax(self, x, axis: int = -1):
        return self.record("softmax", [x], axis=axis)

    def log_softmax(self, x, axis: int = -1):
        return self.record("log_softmax", [x], axis=axis)

    def sum(self, x, axis=None, keepdims: bool = False):
        return self.record("sum", [x], axis=axis, keepdims=keepdims)

    def mean(self, x, axis=None, keepdims: bool = False):
        return self.record("mean", [x], axis=axis, keepdims=keepdims)

    def gather(self, x, index):
        return self.record("gather", [x], index=np.asarray(index))

    def scatter_add(self, x, index, n: int):
        return self.record("scatter_add", [x], index=np.asarray(index), n=int(n))

    def silu(self, x):
        return self.record("silu", [x])

    def sigmoid(self, x):
        return self.record("sigmoid", [x])

    def clip_min(self, x, c: float):
        return self.record("clip_min", [x], c=float(c))

    def linear(self, x, w: Parameter, b: Parameter | None = None):
        """``x @ W (+ b)`` with the bias broadcast explicitly."""
        out = self.matmul(x, self.param(w))
        if b is not None:
            out = self.add(out, self.broadcast_to(self.param(b), out.shape))
        return out


# --------------------------------------------------------------------------
# finite-difference checking
# --------------------------------------------------------------------------


@dataclass
class GradCheck:
    max_rel_error: float
    parameter: str | None
    index: tuple[int, ...] | None
    analytic: float
    numeric: float
    n_checked: int

    def __str__(self) -> str:
        return (
            f"max relative error {self.max_rel_error:.3e} at {self.parameter}{list(self.index or ())} "
            f"(analytic {self.analytic:.6e}, numeric {self.numeric:.6e}; {self.n_checked} components)"
        )


def _ridders(central: Callable[[float], float], h: float, levels: int, shrink: float = 1.4) -> float:
    c2 = shrink * shrink
    table = [[central(h)]]
    best, err = table[0][0], np.inf
    for i in range(1, levels):
        h /= shrink
        row = [central(h)]
        fac = c2
        for j in range(1, i + 1):
            row.append((row[j - 1] * fac - table[i - 1][j - 1]) / (fac - 1))
            fac *= c2
            e = max(abs(row[j] - row[j - 1]), abs(row[j] - table[i - 1][j - 1]))
            if e <= err:
                err, best = e, row[j]
        table.append(row)
        if abs(row[i] - table[i - 1][i - 1]) >= 2 * err:
            break
    return best


def check_gradient(
    f: Callable[[Tape], Node],
    params: Sequence[Parameter],
    h: float = 1e-5,
    floor: float = 1e-6,
    max_per_param: int | None = None,
    seed: int = 0,
    ridders: int = 0,
) -> GradCheck:
    """Compare taped gradients of ``f`` against central differences.

    ``f`` builds the scalar loss on the tape it is given. The step for
    component ``x`` is ``h * (1 + |x|)``. The error of one component is
    ``|a - n| / max(|a|, |n|, floor)``; the floor keeps components whose true
    gradient is ~0 from turning round-off into huge ratios. With
    ``max_per_param`` a seeded random subset of each parameter is probed.
    ``ridders=n`` replaces the single difference with Ridders' extrapolation
    over up to ``n`` steps shrinking from ``h`` by 1.4x, keeping the estimate
    with the smallest error bound (useful when the loss is strongly curved).
    """
    saved = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    tape = Tape()
    grads = tape.backward(f(tape))
    for p, s in zip(params, saved):
        p.grad[...] = s

    rng = np.random.default_rng(seed)
    worst = GradCheck(0.0, None, None, 0.0, 0.0, 0)
    n_checked = 0
    for p in params:
        flat = p.value.reshape(-1)
        analytic = grads.get(p.name, np.zeros_like(p.value)).reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = np.sort(rng.choice(flat.size, max_per_param, replace=False))
        for i in idx:
            x0 = flat[i]
            step = h * (1.0 + abs(x0))

            def central(s):
                flat[i] = x0 + s
                fp = float(f(Tape()).value)
                flat[i] = x0 - s
                fm = float(f(Tape()).value)
                flat[i] = x0
                return (fp - fm) / (2 * s)

            numeric = central(step) if ridders < 2 else _ridders(central, step, ridders)
            a = float(analytic[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            n_checked += 1
            if err > worst.max_rel_error or worst.parameter is None:
                worst = GradCheck(err, p.name, np.unravel_index(i, p.shape), a, numeric, 0)
    worst.n_checked = n_checked
    return worst
