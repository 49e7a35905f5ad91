"""Reverse-mode automatic differentiation over small dense float64 arrays.

A :class:`Tape` records every elementary operation eagerly: the forward value
is computed when the node is appended, and the node keeps just enough to
produce vector-Jacobian products later.  Nodes are appended in creation order,
so node ids are a valid topological order and :meth:`Tape.backward` is a single
reverse sweep.

Time derivatives of a network output are obtained with :func:`forward_tangent`,
which replays a recorded sub-graph and emits, for each node, a tangent node
built from ordinary tape operations.  The tangent is therefore itself
differentiable with respect to every leaf on the tape.

Example
-------
>>> tape = Tape()
>>> x = tape.leaf(3.0)
>>> y = x * x
>>> tape.backward(y)[x.id]
array(6.)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for tape errors."""


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class TangentRuleError(AutodiffError, NotImplementedError):
    pass


@dataclass(frozen=True)
class OpDef:
    forward: Callable
    vjp: Optional[Callable] = None
    jvp: Optional[Callable] = None


OPS: dict[str, OpDef] = {}


def register(name, forward, vjp=None, jvp=None):
    OPS[name] = OpDef(forward, vjp, jvp)


class Node:
    __slots__ = ("op", "inputs", "value", "attrs", "needs_grad")

    def __init__(self, op, inputs, value, attrs, needs_grad):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.attrs = attrs
        self.needs_grad = needs_grad


class Tape:
    """Append-only computation record.

    Parameters
    ----------
    checked : bool
        When true, every recorded value is checked for NaN/Inf and a
        :class:`NonFiniteError` names the offending op.
    """

    def __init__(self, checked: bool = False):
        self.nodes: list[Node] = []
        self.checked = checked

    def __len__(self):
        return len(self.nodes)

    def _append(self, op, inputs, value, attrs, needs_grad) -> "Var":
        if self.checked and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite value produced by op '{op}'")
        self.nodes.append(Node(op, inputs, value, attrs, needs_grad))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, name: str | None = None) -> "Var":
        """A differentiable input."""
        value = np.array(value, dtype=np.float64)
        return self._append("leaf", (), value, {"name": name}, True)

    def constant(self, value) -> "Var":
        value = np.asarray(value, dtype=np.float64)
        return self._append("const", (), value, {}, False)

    def record(self, op: str, inputs: Sequence["Var | int"], **attrs) -> "Var":
        """Append ``op`` applied to ``inputs`` and return the new node."""
        try:
            opdef = OPS[op]
        except KeyError:
            raise AutodiffError(f"unknown op '{op}'") from None
        ids = tuple(self._as_id(v) for v in inputs)
        values = [self.nodes[i].value for i in ids]
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                value = opdef.forward(*values, **attrs)
        except ValueError as exc:
            shapes = ", ".join(str(v.shape) for v in values)
            raise ShapeError(f"op '{op}' cannot combine shapes {shapes}: {exc}") from None
        needs = any(self.nodes[i].needs_grad for i in ids)
        return self._append(op, ids, np.asarray(value, dtype=np.float64), attrs, needs)

    def _as_id(self, v) -> int:
        if isinstance(v, Var):
            if v.tape is not self:
                raise AutodiffError("variable belongs to a different tape")
            return v.id
        if isinstance(v, (int, np.integer)) and 0 <= v < len(self.nodes):
            return int(v)
        raise AutodiffError(f"not a node on this tape: {v!r}")

    def value(self, v) -> np.ndarray:
        return self.nodes[self._as_id(v)].value

    def backward(self, seed: "Var | int") -> dict[int, np.ndarray]:
        """Gradients of the scalar ``seed`` with respect to every leaf.

        Leaves the seed does not depend on get a zero array.
        """
        sid = self._as_id(seed)
        sval = self.nodes[sid].value
        if sval.size != 1:
            raise ShapeError(f"backward needs a scalar seed, got shape {sval.shape}")
        grads: dict[int, np.ndarray] = {sid: np.ones_like(sval)}
        nodes = self.nodes
        for nid in range(sid, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = nodes[nid]
            if not node.inputs:
                continue
            opdef = OPS[node.op]
            if opdef.vjp is None:
                raise AutodiffError(f"op '{node.op}' is not differentiable")
            wanted = [nodes[i].needs_grad for i in node.inputs]
            if not any(wanted):
                continue
            in_vals = [nodes[i].value for i in node.inputs]
            parts = opdef.vjp(g, node.value, wanted, *in_vals, **node.attrs)
            for i, want, part in zip(node.inputs, wanted, parts):
                if not want or part is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + part
                else:
                    grads[i] = part
        out = {}
        for nid, node in enumerate(nodes):
            if node.op == "leaf":
                g = grads.get(nid)
                out[nid] = np.zeros_like(node.value) if g is None else np.asarray(g).reshape(node.value.shape)
        return out


class Var:
    """Handle to a node on a tape, with arithmetic operator overloads."""

    __slots__ = ("tape", "id")
    __array_priority__ = 100

    def __init__(self, tape: Tape, nid: int):
        self.tape = tape
        self.id = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        node = self.tape.nodes[self.id]
        return f"Var(id={self.id}, op={node.op}, shape={node.value.shape})"

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return self.tape.record("add", [self, self._lift(other)])

    def __radd__(self, other):
        return self.tape.record("add", [self._lift(other), self])

    def __sub__(self, other):
        return self.tape.record("sub", [self, self._lift(other)])

    def __rsub__(self, other):
        return self.tape.record("sub", [self._lift(other), self])

    def __mul__(self, other):
        return self.tape.record("mul", [self, self._lift(other)])

    def __rmul__(self, other):
        return self.tape.record("mul", [self._lift(other), self])

    def __truediv__(self, other):
        return self.tape.record("div", [self, self._lift(other)])

    def __rtruediv__(self, other):
        return self.tape.record("div", [self._lift(other), self])

    def __neg__(self):
        return self.tape.record("neg", [self])

    def __matmul__(self, other):
        return self.tape.record("matmul", [self, self._lift(other)])

    def __rmatmul__(self, other):
        return self.tape.record("matmul", [self._lift(other), self])

    def __getitem__(self, index):
        return self.tape.record("getitem", [self], index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.tape.record("reshape", [self], shape=shape)

    def sum(self, axis=None):
        return self.tape.record("sum", [self], axis=axis)

    def mean(self):
        return self.tape.record("mean", [self])


@dataclass
class DualTrajectory:
    """Network output ``value`` and its derivative ``tangent`` w.r.t. time."""

    value: Var
    tangent: Var

    def __post_init__(self):
        if self.value.shape != self.tangent.shape:
            raise ShapeError(f"value shape {self.value.shape} != tangent shape {self.tangent.shape}")


# ---------------------------------------------------------------------------
# functional helpers

def sin(x: Var) -> Var:
    return x.tape.record("sin", [x])


def cos(x: Var) -> Var:
    return x.tape.record("cos", [x])


def exp(x: Var) -> Var:
    return x.tape.record("exp", [x])


def elu(x: Var) -> Var:
    return x.tape.record("elu", [x])


def square(x: Var) -> Var:
    return x.tape.record("square", [x])


def concat(xs: Sequence[Var], axis: int = -1) -> Var:
    return xs[0].tape.record("concat", list(xs), axis=axis)


def take_rows(x: Var, rows) -> Var:
    return x.tape.record("take_rows", [x], rows=np.asarray(rows, dtype=np.intp))


def put_rows(base: Var, rows, update: Var) -> Var:
    """Copy of ``base`` with ``base[rows] = update``."""
    return base.tape.record("put_rows", [base, update], rows=np.asarray(rows, dtype=np.intp))


def mean_square(x: Var) -> Var:
    return x.tape.record("mean_square", [x])


# ---------------------------------------------------------------------------
# op registry

def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _add_vjp(g, out, wanted, a, b):
    return (_unbroadcast(g, a.shape) if wanted[0] else None,
            _unbroadcast(g, b.shape) if wanted[1] else None)


def _add_jvp(tape, xs, ts, out):
    a, b = ts
    if a is None:
        return b if xs[1].shape == out.shape else b + tape.constant(np.zeros(out.shape))
    if b is None:
        return a if xs[0].shape == out.shape else a + tape.constant(np.zeros(out.shape))
    return a + b


def _sub_vjp(g, out, wanted, a, b):
    return (_unbroadcast(g, a.shape) if wanted[0] else None,
            _unbroadcast(-g, b.shape) if wanted[1] else None)


def _sub_jvp(tape, xs, ts, out):
    a, b = ts
    if a is None:
        return -b if xs[1].shape == out.shape else tape.constant(np.zeros(out.shape)) - b
    if b is None:
        return a if xs[0].shape == out.shape else a + tape.constant(np.zeros(out.shape))
    return a - b


def _mul_vjp(g, out, wanted, a, b):
    return (_unbroadcast(g * b, a.shape) if wanted[0] else None,
            _unbroadcast(g * a, b.shape) if wanted[1] else None)


def _mul_jvp(tape, xs, ts, out):
    a, b = xs
    ta, tb = ts
    parts = []
    if ta is not None:
        parts.append(ta * b)
    if tb is not None:
        parts.append(a * tb)
    return parts[0] if len(parts) == 1 else parts[0] + parts[1]


def _div_vjp(g, out, wanted, a, b):
    return (_unbroadcast(g / b, a.shape) if wanted[0] else None,
            _unbroadcast(-g * out / b, b.shape) if wanted[1] else None)


def _div_jvp(tape, xs, ts, out):
    a, b = xs
    ta, tb = ts
    if tb is None:
        return ta / b
    num = tb * out
    if ta is not None:
        num = ta - num
        return num / b
    return -num / b


def _matmul_forward(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError("matmul needs (m,k) @ (k,n)")
    return a @ b


def _matmul_vjp(g, out, wanted, a, b):
    return (g @ b.T if wanted[0] else None, a.T @ g if wanted[1] else None)


def _matmul_jvp(tape, xs, ts, out):
    a, b = xs
    ta, tb = ts
    parts = []
    if ta is not None:
        parts.append(ta @ b)
    if tb is not None:
        parts.append(a @ tb)
    return parts[0] if len(parts) == 1 else parts[0] + parts[1]


register("add", np.add, _add_vjp, _add_jvp)
register("sub", np.subtract, _sub_vjp, _sub_jvp)
register("mul", np.multiply, _mul_vjp, _mul_jvp)
register("div", np.divide, _div_vjp, _div_jvp)
register("matmul", _matmul_forward, _matmul_vjp, _matmul_jvp)
register("neg", np.negative, lambda g, out, w, a: (-g,), lambda tape, xs, ts, out: -ts[0])

register("sin", np.sin,
         lambda g, out, w, a: (g * np.cos(a),),
         lambda tape, xs, ts, out: cos(xs[0]) * ts[0])
register("cos", np.cos,
         lambda g, out, w, a: (-g * np.sin(a),),
         lambda tape, xs, ts, out: -(sin(xs[0]) * ts[0]))
register("exp", np.exp,
         lambda g, out, w, a: (g * out,),
         lambda tape, xs, ts, out: out * ts[0])
register("square", np.square,
         lambda g, out, w, a: (2.0 * g * a,),
         lambda tape, xs, ts, out: (2.0 * xs[0]) * ts[0])


def _elu(a):
    return np.maximum(a, 0.0) + np.expm1(np.minimum(a, 0.0))


def _elu_grad(a):
    return np.exp(np.minimum(a, 0.0))


def _elu_grad2(a):
    return np.where(a > 0, 0.0, np.exp(np.minimum(a, 0.0)))


# for a <= 0 the derivative exp(a) equals elu(a) + 1, so reuse the output
register("elu", _elu,
         lambda g, out, w, a: (g * (np.minimum(out, 0.0) + 1.0),),
         lambda tape, xs, ts, out: tape.record("elu_grad", [xs[0]]) * ts[0])
# derivative of elu; present so that tangents through elu stay differentiable
register("elu_grad", _elu_grad,
         lambda g, out, w, a: (g * _elu_grad2(a),),
         lambda tape, xs, ts, out: tape.record("elu_grad2", [xs[0]]) * ts[0])
register("elu_grad2", _elu_grad2, lambda g, out, w, a: (g * _elu_grad2(a),))


def _sum_forward(a, axis=None):
    return np.sum(a, axis=axis)


def _sum_vjp(g, out, wanted, a, axis=None):
    if axis is None:
        return (np.broadcast_to(g, a.shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)


register("sum", _sum_forward, _sum_vjp, lambda tape, xs, ts, out, axis=None: ts[0].sum(axis=axis))
register("mean", np.mean,
         lambda g, out, w, a: (np.full(a.shape, g / a.size),),
         lambda tape, xs, ts, out: ts[0].mean())
register("mean_square", lambda a: np.mean(np.square(a)),
         lambda g, out, w, a: (g * (2.0 / a.size) * a,),
         lambda tape, xs, ts, out: (xs[0] * ts[0]).mean() * 2.0)


def _reshape_forward(a, shape):
    return a.reshape(shape)


register("reshape", _reshape_forward,
         lambda g, out, w, a, shape: (g.reshape(a.shape),),
         lambda tape, xs, ts, out, shape: ts[0].reshape(shape))


def _getitem_vjp(g, out, wanted, a, index):
    full = np.zeros_like(a)
    if _fancy(index):
        np.add.at(full, index, g)
    else:
        full[index] = g
    return (full,)


def _fancy(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


register("getitem", lambda a, index: np.array(a[index]), _getitem_vjp,
         lambda tape, xs, ts, out, index: ts[0][index])


def _concat_forward(*arrays, axis=-1):
    return np.concatenate(arrays, axis=axis)


def _concat_vjp(g, out, wanted, *arrays, axis=-1):
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _concat_jvp(tape, xs, ts, out, axis=-1):
    filled = [t if t is not None else tape.constant(np.zeros(x.shape)) for x, t in zip(xs, ts)]
    return concat(filled, axis=axis)


register("concat", _concat_forward, _concat_vjp, _concat_jvp)


def _take_vjp(g, out, wanted, a, rows):
    full = np.zeros_like(a)
    np.add.at(full, rows, g)
    return (full,)


register("take_rows", lambda a, rows: a[rows], _take_vjp,
         lambda tape, xs, ts, out, rows: take_rows(ts[0], rows))


def _put_forward(base, update, rows):
    out = base.copy()
    out[rows] = update
    return out


def _put_vjp(g, out, wanted, base, update, rows):
    gb = None
    if wanted[0]:
        gb = g.copy()
        gb[rows] = 0.0
    return (gb, g[rows] if wanted[1] else None)


def _put_jvp(tape, xs, ts, out, rows):
    tb = ts[0] if ts[0] is not None else tape.constant(np.zeros(xs[0].shape))
    tu = ts[1] if ts[1] is not None else tape.constant(np.zeros(xs[1].shape))
    return put_rows(tb, rows, tu)


register("put_rows", _put_forward, _put_vjp, _put_jvp)


# ---------------------------------------------------------------------------

def forward_tangent(f: Callable[[Var], Var], t: Var, seed: float = 1.0) -> DualTrajectory:
    """Evaluate ``f(t)`` and its derivative with respect to ``t``.

    ``f`` is run once to record its sub-graph; the recorded nodes are then
    walked in order and each op's tangent rule appends the tangent
    computation to the same tape.  ``seed`` scales the input tangent, which
    lets callers fold a chain-rule factor (e.g. a time normalisation) in
    directly.
    """
    tape = t.tape
    start = len(tape)
    out = f(t)
    stop = len(tape)
    tangents: dict[int, Var] = {t.id: tape.constant(np.full(t.shape, float(seed)))}
    for nid in range(start, stop):
        node = tape.nodes[nid]
        in_t = [tangents.get(i) for i in node.inputs]
        if all(v is None for v in in_t):
            continue
        rule = OPS[node.op].jvp
        if rule is None:
            raise TangentRuleError(f"op '{node.op}' has no tangent rule")
        xs = [Var(tape, i) for i in node.inputs]
        tangents[nid] = rule(tape, xs, in_t, Var(tape, nid), **node.attrs)
    tan = tangents.get(out.id)
    if tan is None:
        tan = tape.constant(np.zeros(out.shape))
    return DualTrajectory(out, tan)


def _lincomb_forward(*xs, coeffs):
    out = None
    for x, c in zip(xs, coeffs):
        term = c * x
        out = term if out is None else out + term
    return out


def _lincomb_vjp(g, out, wanted, *xs, coeffs):
    return tuple(_unbroadcast(g * c, x.shape) if w else None for x, c, w in zip(xs, coeffs, wanted))


def _lincomb_jvp(tape, xs, ts, out, coeffs):
    pairs = [(t, c) for t, c in zip(ts, coeffs) if t is not None]
    if len(pairs) == 1 and np.ndim(pairs[0][1]) == 0 and pairs[0][0].shape == out.shape:
        return pairs[0][0] * float(pairs[0][1])
    res = lincomb([t for t, _ in pairs], [c for _, c in pairs])
    if res.shape != out.shape:
        res = res + tape.constant(np.zeros(out.shape))
    return res


register("lincomb", _lincomb_forward, _lincomb_vjp, _lincomb_jvp)


def lincomb(xs: Sequence[Var], coeffs) -> Var:
    """``sum(c * x)`` with constant coefficients (scalars or broadcastable arrays).

    Terms with a scalar zero coefficient are dropped.
    """
    keep = [(x, c) for x, c in zip(xs, coeffs) if not (np.ndim(c) == 0 and c == 0)]
    if not keep:
        raise ValueError("lincomb needs at least one non-zero term")
    return keep[0][0].tape.record("lincomb", [x for x, _ in keep], coeffs=tuple(c for _, c in keep))
