"""Reverse-mode automatic differentiation over numpy arrays.

Every primitive call appends a :class:`Node` to a :class:`Tape`.  Nodes are
stored in insertion order, which is also a valid topological order, so the
backward pass is a single reverse sweep.  Adjoint rules live in the
:data:`ADJOINTS` registry keyed by op name; tests may swap an entry to
check that a broken rule is caught.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from ..errors import ArgumentError, NumericError


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    ctx: dict = field(default_factory=dict)
    name: str | None = None
    requires_grad: bool = False


class Tape:
    """Ordered record of primitive operations."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.grads: list[np.ndarray | None] = []
        self.check_finite = check_finite

    def __len__(self):
        return len(self.nodes)

    def variable(self, value, name: str | None = None) -> "Var":
        """Register a differentiable leaf."""
        return self._push("leaf", (), np.array(value, dtype=np.float64), name=name, requires_grad=True)

    def constant(self, value) -> "Var":
        return self._push("const", (), np.asarray(value, dtype=np.float64))

    def _push(self, op, inputs, value, ctx=None, name=None, requires_grad=None) -> "Var":
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite value produced by op '{op}'")
        if requires_grad is None:
            requires_grad = any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(Node(op, tuple(inputs), value, ctx or {}, name, requires_grad))
        self.grads.append(None)
        return Var(self, len(self.nodes) - 1)

    def backward(self, loss: "Var") -> dict[str, np.ndarray]:
        """Populate adjoints by a reverse sweep from a scalar ``loss``.

        Returns gradients of all named leaves.  Unreached leaves get zeros.
        """
        if loss.tape is not self:
            raise ArgumentError("loss belongs to a different tape")
        if loss.value.size != 1:
            raise ArgumentError(f"loss must be scalar, got shape {loss.value.shape}")
        self.grads = [None] * len(self.nodes)
        self.grads[loss.index] = np.ones_like(loss.value)
        for idx in range(loss.index, -1, -1):
            g = self.grads[idx]
            node = self.nodes[idx]
            if g is None or not node.inputs or not node.requires_grad:
                continue
            parents = [self.nodes[i] for i in node.inputs]
            in_grads = ADJOINTS[node.op](g, node, parents)
            for i, pg in zip(node.inputs, in_grads):
                if pg is None or not self.nodes[i].requires_grad:
                    continue
                if self.check_finite and not np.all(np.isfinite(pg)):
                    raise NumericError(f"non-finite adjoint from op '{node.op}'")
                self.grads[i] = pg if self.grads[i] is None else self.grads[i] + pg
        out = {}
        for i, node in enumerate(self.nodes):
            if node.op == "leaf" and node.name is not None:
                g = self.grads[i]
                out[node.name] = np.zeros_like(node.value) if g is None else g
        return out

    def grad(self, var: "Var") -> np.ndarray:
        g = self.grads[var.index]
        return np.zeros_like(var.value) if g is None else g


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "index")
    __array_priority__ = 100

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        node = self.tape.nodes[self.index]
        return f"Var(op={node.op!r}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# ---------------------------------------------------------------- helpers


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ArgumentError("operands live on different tapes")
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise ArgumentError("at least one operand must be a Var")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(op: str, fn: Callable, a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    return tape._push(op, (a.index, b.index), fn(a.value, b.value))


# ------------------------------------------------------------- primitives


def add(a, b) -> Var:
    return _binary("add", np.add, a, b)


def sub(a, b) -> Var:
    return _binary("sub", np.subtract, a, b)


def mul(a, b) -> Var:
    return _binary("mul", np.multiply, a, b)


def div(a, b) -> Var:
    return _binary("div", np.divide, a, b)


def neg(a: Var) -> Var:
    return a.tape._push("neg", (a.index,), -a.value)


def square(a: Var) -> Var:
    return a.tape._push("square", (a.index,), a.value * a.value)


def sqrt(a: Var) -> Var:
    return a.tape._push("sqrt", (a.index,), np.sqrt(a.value))


def silu(a: Var) -> Var:
    sig = 1.0 / (1.0 + np.exp(-a.value))
    return a.tape._push("silu", (a.index,), a.value * sig, ctx={"sig": sig})


def sum_(a: Var, axis=None, keepdims=False) -> Var:
    return a.tape._push("sum", (a.index,), np.sum(a.value, axis=axis, keepdims=keepdims),
                        ctx={"axis": axis, "keepdims": keepdims})


def mean(a: Var, axis=None, keepdims=False) -> Var:
    return a.tape._push("mean", (a.index,), np.mean(a.value, axis=axis, keepdims=keepdims),
                        ctx={"axis": axis, "keepdims": keepdims})


def reshape(a: Var, shape) -> Var:
    return a.tape._push("reshape", (a.index,), a.value.reshape(shape))


def getitem(a: Var, idx) -> Var:
    return a.tape._push("getitem", (a.index,), a.value[idx], ctx={"idx": idx})


def matmul(a, b) -> Var:
    return _binary("matmul", np.matmul, a, b)


def conv1d(x, w) -> Var:
    """Same-padded 1-D convolution (cross-correlation) over the time axis.

    ``x`` has shape (B, T, C_in), ``w`` has shape (K, C_in, C_out) with K odd.
    """
    tape = _tape_of(x, w)
    x, w = _lift(tape, x), _lift(tape, w)
    k = w.value.shape[0]
    if k % 2 == 0:
        raise ArgumentError("conv1d kernel width must be odd")
    if x.value.ndim != 3 or x.value.shape[2] != w.value.shape[1]:
        raise ArgumentError(f"conv1d shape mismatch: x {x.value.shape}, w {w.value.shape}")
    pad = k // 2
    xp = np.pad(x.value, ((0, 0), (pad, pad), (0, 0)))
    T = x.value.shape[1]
    out = xp[:, 0:T] @ w.value[0]
    for j in range(1, k):
        out += xp[:, j:j + T] @ w.value[j]
    return tape._push("conv1d", (x.index, w.index), out, ctx={"xp": xp})


# ---------------------------------------------------------- adjoint rules


def _adj_add(g, node, parents):
    a, b = parents
    return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)


def _adj_sub(g, node, parents):
    a, b = parents
    return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)


def _adj_mul(g, node, parents):
    a, b = parents
    return _unbroadcast(g * b.value, a.value.shape), _unbroadcast(g * a.value, b.value.shape)


def _adj_div(g, node, parents):
    a, b = parents
    ga = g / b.value
    gb = -g * a.value / (b.value * b.value)
    return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)


def _adj_neg(g, node, parents):
    return (-g,)


def _adj_square(g, node, parents):
    return (2.0 * parents[0].value * g,)


def _adj_sqrt(g, node, parents):
    return (0.5 * g / node.value,)


def _adj_silu(g, node, parents):
    sig = node.ctx["sig"]
    x = parents[0].value
    return (g * sig * (1.0 + x * (1.0 - sig)),)


def _expand_reduced(g, node, parents):
    axis, keepdims = node.ctx["axis"], node.ctx["keepdims"]
    shape = parents[0].value.shape
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _adj_sum(g, node, parents):
    return (np.array(_expand_reduced(g, node, parents)),)


def _adj_mean(g, node, parents):
    shape = parents[0].value.shape
    axis = node.ctx["axis"]
    if axis is None:
        count = int(np.prod(shape))
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        count = int(np.prod([shape[a] for a in axes]))
    return (_expand_reduced(g, node, parents) / count,)


def _adj_reshape(g, node, parents):
    return (g.reshape(parents[0].value.shape),)


def _adj_getitem(g, node, parents):
    full = np.zeros_like(parents[0].value)
    np.add.at(full, node.ctx["idx"], g)
    return (full,)


def _adj_matmul(g, node, parents):
    a, b = parents
    av, bv = a.value, b.value
    if av.ndim == 1 or bv.ndim == 1:
        raise ArgumentError("matmul adjoint supports ndim >= 2 only")
    ga = g @ np.swapaxes(bv, -1, -2)
    gb = np.swapaxes(av, -1, -2) @ g
    return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)


def _adj_conv1d(g, node, parents):
    x, w = parents
    xp = node.ctx["xp"]
    k, cin, cout = w.value.shape
    B, T, _ = x.value.shape
    pad = k // 2
    g2 = g.reshape(-1, cout)
    gw = np.empty_like(w.value)
    gxp = np.zeros_like(xp)
    for j in range(k):
        gw[j] = xp[:, j:j + T].reshape(-1, cin).T @ g2
        gxp[:, j:j + T] += g @ w.value[j].T
    return gxp[:, pad:pad + T], gw


ADJOINTS: dict[str, Callable[[np.ndarray, Node, list[Node]], Any]] = {
    "add": _adj_add,
    "sub": _adj_sub,
    "mul": _adj_mul,
    "div": _adj_div,
    "neg": _adj_neg,
    "square": _adj_square,
    "sqrt": _adj_sqrt,
    "silu": _adj_silu,
    "sum": _adj_sum,
    "mean": _adj_mean,
    "reshape": _adj_reshape,
    "getitem": _adj_getitem,
    "matmul": _adj_matmul,
    "conv1d": _adj_conv1d,
}


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """Functional alias for :meth:`Tape.backward`."""
    return tape.backward(loss)


def grad_check(f: Callable[[Tape, dict[str, Var]], Var], params: dict[str, np.ndarray],
               fd_step: float = 1e-6, n_coords: int = 200, rng=None,
               floor: float = 1e-8) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(tape, vars)`` must build a scalar loss from the leaf ``vars``.
    Coordinates are sampled uniformly across all parameters; when fewer
    than ``n_coords`` exist, every coordinate is checked.  The relative
    error of a coordinate is ``|a - b| / max(|a|, |b|, floor)``.
    """
    if fd_step <= 0:
        raise ArgumentError("fd_step must be positive")
    rng = np.random.default_rng(0) if rng is None else rng

    def evaluate(values):
        tape = Tape()
        leaves = {k: tape.variable(v, name=k) for k, v in values.items()}
        return tape, f(tape, leaves)

    tape, loss = evaluate(params)
    grads = tape.backward(loss)

    coords = [(k, i) for k in sorted(params) for i in range(params[k].size)]
    if len(coords) > n_coords:
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    for name, flat in coords:
        base = params[name]
        shifted = dict(params)
        plus = base.copy().reshape(-1)
        plus[flat] += fd_step
        shifted[name] = plus.reshape(base.shape)
        fp = float(evaluate(shifted)[1].value)
        minus = base.copy().reshape(-1)
        minus[flat] -= fd_step
        shifted[name] = minus.reshape(base.shape)
        fm = float(evaluate(shifted)[1].value)
        fd = (fp - fm) / (2.0 * fd_step)
        an = float(grads[name].reshape(-1)[flat])
        err = abs(an - fd) / max(abs(an), abs(fd), floor)
        worst = max(worst, err)
    return worst
