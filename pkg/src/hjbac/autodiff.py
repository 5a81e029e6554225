"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded eagerly on a :class:`Tape` as they are applied to
:class:`Node` objects. Every op in this module also accepts plain numpy
arrays; if no argument is a ``Node`` the op simply returns the numpy result.
This lets model code (drift, costs, networks) be written once and used both
for cheap sampling and for differentiated loss evaluation.

Example
-------
>>> tape = Tape()
>>> x = tape.leaf(np.array(2.0))
>>> y = skip_relu(x)
>>> tape.backward(y)
>>> float(tape.grad(x))
2.0
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NumericFailure",
    "ContractViolation",
    "Tape",
    "Node",
    "ParamVector",
    "AdamState",
    "adam_step",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "affine",
    "relu",
    "skip_relu",
    "exp",
    "sqrt",
    "square",
    "sum",
    "mean",
    "sqnorm",
    "norm",
    "rowdot",
    "maximum",
    "minimum",
    "where",
    "concat",
    "take_rows",
    "segment_sum",
    "reshape",
    "stop_gradient",
    "value_of",
]


class NumericFailure(FloatingPointError):
    """A non-finite value appeared during evaluation or optimization."""

    def __init__(self, message: str, node_index: int | None = None):
        super().__init__(message)
        self.node_index = node_index


class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


class Node:
    """A value recorded on a tape."""

    __slots__ = ("tape", "index", "value", "parents", "fn", "vjp", "requires_grad", "adjoint", "op")
    __array_priority__ = 1000.0

    def __init__(self, tape, value, parents, fn, vjp, requires_grad, op):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.fn = fn
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.adjoint = None
        self.op = op
        self.index = len(tape.nodes)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Node(#{self.index} {self.op}, shape={self.value.shape})"

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

    def __pow__(self, exponent):
        if exponent != 2:
            raise ContractViolation("only squaring is supported")
        return square(self)

    def __getitem__(self, key):
        return getitem(self, key)


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended in evaluation order, so every node's inputs precede it.
    With ``check_finite`` on, each new node value is checked and a
    :class:`NumericFailure` naming the node index is raised on overflow/NaN.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite

    def leaf(self, value, name: str | None = None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        return self._push(value, (), None, None, True, name or "leaf")

    def constant(self, value) -> Node:
        value = np.asarray(value, dtype=np.float64)
        return self._push(value, (), None, None, False, "const")

    def _push(self, value, parents, fn, vjp, requires_grad, op) -> Node:
        node = Node(self, value, parents, fn, vjp, requires_grad, op)
        # a sum is finite iff every entry is (barring overflow of the sum itself)
        if self.check_finite and not np.isfinite(np.sum(value)):
            raise NumericFailure(f"non-finite value produced by {op} at node {node.index}", node.index)
        self.nodes.append(node)
        return node

    def forward(self):
        """Re-evaluate every recorded node from the current leaf values.

        Returns the value of the last node. The graph structure (including any
        data-dependent index sets baked into ops) is kept as recorded.
        """
        for node in self.nodes:
            if node.fn is None:
                continue
            node.value = node.fn(*[value_of(p) for p in node.parents])
            if self.check_finite and not np.isfinite(node.value).all():
                raise NumericFailure(
                    f"non-finite value produced by {node.op} at node {node.index}", node.index
                )
        return self.nodes[-1].value if self.nodes else None

    def backward(self, root: Node) -> None:
        if not isinstance(root, Node) or root.tape is not self:
            raise ContractViolation("root must be a node of this tape")
        if root.value.size != 1:
            raise ContractViolation(f"backward needs a scalar root, got shape {root.value.shape}")
        for node in self.nodes:
            node.adjoint = None
        root.adjoint = np.ones_like(root.value)
        for node in reversed(self.nodes[: root.index + 1]):
            g = node.adjoint
            if g is None or node.vjp is None or not node.requires_grad:
                continue
            parent_values = [value_of(p) for p in node.parents]
            grads = node.vjp(g, node.value, *parent_values)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not isinstance(parent, Node) or not parent.requires_grad:
                    continue
                if parent.adjoint is None:
                    parent.adjoint = pg
                else:
                    parent.adjoint = parent.adjoint + pg

    def grad(self, node: Node) -> np.ndarray:
        """Adjoint of ``node`` after :meth:`backward`; zeros if it got none."""
        if node.adjoint is None:
            return np.zeros_like(node.value)
        return np.broadcast_to(node.adjoint, node.value.shape).copy()


def value_of(x):
    return x.value if isinstance(x, Node) else x


def _tape_of(args) -> Tape | None:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    return None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _apply(op: str, fn: Callable, vjp: Callable, *args):
    tape = None
    requires = False
    vals = []
    for a in args:
        if isinstance(a, Node):
            tape = a.tape
            requires = requires or a.requires_grad
            vals.append(a.value)
        else:
            vals.append(a)
    if tape is None:
        return fn(*args)
    return tape._push(fn(*vals), args, fn, vjp, requires, op)


def _as_array(x):
    if isinstance(x, Node):
        return x
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _as_array(a), _as_array(b)
    sa, sb = np.shape(value_of(a)), np.shape(value_of(b))
    return _apply(
        "add", np.add, lambda g, y, x1, x2: (_unbroadcast(g, sa), _unbroadcast(g, sb)), a, b
    )


def sub(a, b):
    a, b = _as_array(a), _as_array(b)
    sa, sb = np.shape(value_of(a)), np.shape(value_of(b))
    return _apply(
        "sub", np.subtract, lambda g, y, x1, x2: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), a, b
    )


def mul(a, b):
    a, b = _as_array(a), _as_array(b)
    sa, sb = np.shape(value_of(a)), np.shape(value_of(b))

    def vjp(g, y, x1, x2):
        ga = _unbroadcast(g * x2, sa) if isinstance(a, Node) and a.requires_grad else None
        gb = _unbroadcast(g * x1, sb) if isinstance(b, Node) and b.requires_grad else None
        return ga, gb

    return _apply("mul", np.multiply, vjp, a, b)


def div(a, b):
    a, b = _as_array(a), _as_array(b)
    sa, sb = np.shape(value_of(a)), np.shape(value_of(b))

    def vjp(g, y, x1, x2):
        ga = _unbroadcast(g / x2, sa) if isinstance(a, Node) and a.requires_grad else None
        gb = _unbroadcast(-g * y / x2, sb) if isinstance(b, Node) and b.requires_grad else None
        return ga, gb

    return _apply("div", np.divide, vjp, a, b)


def neg(a):
    return _apply("neg", np.negative, lambda g, y, x: (-g,), a)


def square(a):
    return _apply("square", np.square, lambda g, y, x: (2.0 * g * x,), a)


def relu(a):
    # subgradient at 0 is 0
    return _apply("relu", lambda x: np.maximum(x, 0.0), lambda g, y, x: (g * (x > 0),), a)


def skip_relu(a):
    """Residual activation ``x + relu(x)``."""
    def fn(x):
        y = np.maximum(x, 0.0)
        y += x
        return y

    def vjp(g, y, x):
        gx = g * (x > 0)
        gx += g
        return (gx,)

    return _apply("skip_relu", fn, vjp, a)


def exp(a):
    return _apply("exp", np.exp, lambda g, y, x: (g * y,), a)


def sqrt(a):
    return _apply("sqrt", np.sqrt, lambda g, y, x: (0.5 * g / y,), a)


def maximum(a, c: float):
    """Elementwise ``max(a, c)`` with a constant ``c``; ties route to the constant."""
    return _apply("maximum", lambda x: np.maximum(x, c), lambda g, y, x: (g * (x > c),), a)


def minimum(a, c: float):
    return _apply("minimum", lambda x: np.minimum(x, c), lambda g, y, x: (g * (x < c),), a)


def where(cond, a, b):
    """Select ``a`` where the constant mask ``cond`` holds, else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    a, b = _as_array(a), _as_array(b)
    sa, sb = np.shape(value_of(a)), np.shape(value_of(b))
    return _apply(
        "where",
        lambda x1, x2: np.where(cond, x1, x2),
        lambda g, y, x1, x2: (_unbroadcast(g * cond, sa), _unbroadcast(g * ~cond, sb)),
        a,
        b,
    )


# ------------------------------------------------------------------ linear algebra


def matmul(a, b):
    a, b = _as_array(a), _as_array(b)

    def vjp(g, y, x1, x2):
        ga = g @ x2.T if isinstance(a, Node) and a.requires_grad else None
        gb = x1.T @ g if isinstance(b, Node) and b.requires_grad else None
        return ga, gb

    return _apply("matmul", np.matmul, vjp, a, b)


def affine(x, W, b):
    """``x @ W + b`` for a batch ``x`` (B, n), weight (n, m) and bias (m,)."""
    x, W, b = _as_array(x), _as_array(W), _as_array(b)

    def fn(xv, Wv, bv):
        y = xv @ Wv
        y += bv
        return y

    def vjp(g, y, xv, Wv, bv):
        gx = g @ Wv.T if isinstance(x, Node) and x.requires_grad else None
        gW = xv.T @ g if isinstance(W, Node) and W.requires_grad else None
        gb = g.sum(axis=0) if isinstance(b, Node) and b.requires_grad else None
        return gx, gW, gb

    return _apply("affine", fn, vjp, x, W, b)


def sum(a, axis: int | None = None):
    shape = np.shape(value_of(a))

    def vjp(g, y, x):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _apply("sum", lambda x: np.sum(x, axis=axis), vjp, a)


def mean(a, axis: int | None = None):
    n = np.size(value_of(a)) if axis is None else np.shape(value_of(a))[axis]
    return sum(a, axis) * (1.0 / n)


def sqnorm(a):
    """Row-wise squared Euclidean norm of a 2-D array (1-D: full)."""
    axis = -1
    return _apply(
        "sqnorm",
        lambda x: np.sum(x * x, axis=axis),
        lambda g, y, x: (2.0 * np.expand_dims(g, axis) * x,),
        a,
    )


def norm(a):
    """Row-wise Euclidean norm; the subgradient at the origin is 0."""
    axis = -1

    def vjp(g, y, x):
        safe = np.where(y > 0, y, 1.0)
        return (np.expand_dims(np.where(y > 0, g / safe, 0.0), axis) * x,)

    return _apply("norm", lambda x: np.sqrt(np.sum(x * x, axis=axis)), vjp, a)


def rowdot(a, b):
    """Row-wise inner product of two equally shaped 2-D arrays."""
    a, b = _as_array(a), _as_array(b)

    def vjp(g, y, x1, x2):
        gc = np.expand_dims(g, -1)
        return gc * x2, gc * x1

    return _apply("rowdot", lambda x1, x2: np.sum(x1 * x2, axis=-1), vjp, a, b)


# ------------------------------------------------------------------ structure


def concat(parts: Sequence, axis: int = 0):
    parts = [_as_array(p) for p in parts]
    sizes = [np.shape(value_of(p))[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g, y, *xs):
        return tuple(np.split(g, cuts, axis=axis))

    return _apply("concat", lambda *xs: np.concatenate(xs, axis=axis), vjp, *parts)


def getitem(a, key):
    shape = np.shape(value_of(a))

    def vjp(g, y, x):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return _apply("getitem", lambda x: x[key], vjp, a)


def take_rows(a, idx):
    """Gather rows ``a[idx]``; ``idx`` must not repeat."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = np.shape(value_of(a))

    def vjp(g, y, x):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return _apply("take_rows", lambda x: x[idx], vjp, a)


def segment_sum(a, segments, n: int):
    """Sum the leading-axis entries of ``a`` into ``n`` buckets, in row order."""
    segments = np.asarray(segments, dtype=np.intp)

    def fn(x):
        if x.ndim == 1:
            return np.bincount(segments, weights=x, minlength=n).astype(np.float64)
        out = np.zeros((n,) + x.shape[1:])
        np.add.at(out, segments, x)
        return out

    return _apply("segment_sum", fn, lambda g, y, x: (g[segments],), a)


def reshape(a, shape):
    old = np.shape(value_of(a))
    return _apply(
        "reshape", lambda x: np.reshape(x, shape), lambda g, y, x: (np.reshape(g, old),), a
    )


def stop_gradient(a):
    """Pass the value through unchanged; no adjoint flows back."""
    tape = _tape_of((a,))
    if tape is None:
        return a
    return tape._push(a.value, (a,), lambda x: x, None, False, "stop_gradient")


# ------------------------------------------------------------------ parameters


class ParamVector:
    """Flat float64 parameter storage with named, fixed-shape views."""

    def __init__(self, shapes: Sequence[tuple[str, tuple[int, ...]]], values=None):
        layout = []
        offset = 0
        for name, shape in shapes:
            shape = tuple(int(s) for s in shape)
            layout.append((name, offset, shape))
            offset += int(np.prod(shape))
        self.layout: tuple[tuple[str, int, tuple[int, ...]], ...] = tuple(layout)
        self.size = offset
        if values is None:
            self.values = np.zeros(offset)
        else:
            values = np.asarray(values, dtype=np.float64)
            if values.shape != (offset,):
                raise ContractViolation(f"expected {offset} values, got shape {values.shape}")
            self.values = values.copy()

    @property
    def names(self) -> list[str]:
        return [name for name, _, _ in self.layout]

    def view(self, name: str) -> np.ndarray:
        for n, off, shape in self.layout:
            if n == name:
                return self.values[off : off + int(np.prod(shape))].reshape(shape)
        raise KeyError(name)

    def views(self) -> dict[str, np.ndarray]:
        return {n: self.view(n) for n in self.names}

    def leaves(self, tape: Tape) -> dict[str, Node]:
        return {n: tape.leaf(v, name=n) for n, v in self.views().items()}

    def gather(self, tape: Tape, leaves: dict[str, Node]) -> np.ndarray:
        """Flatten leaf adjoints back into this vector's layout."""
        out = np.zeros(self.size)
        for n, off, shape in self.layout:
            out[off : off + int(np.prod(shape))] = tape.grad(leaves[n]).ravel()
        return out

    def copy(self) -> "ParamVector":
        return ParamVector([(n, s) for n, _, s in self.layout], self.values)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kwargs) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kwargs)

    def copy(self) -> "AdamState":
        return AdamState(
            self.m.copy(), self.v.copy(), self.step_count, self.beta1, self.beta2, self.eps_hat
        )


def adam_step(params: ParamVector, grad: np.ndarray, state: AdamState, lr: float):
    """One bias-corrected Adam update, in place. Returns ``(params, state)``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape:
        raise ContractViolation(f"gradient shape {grad.shape} != params {params.values.shape}")
    if not np.isfinite(grad).all():
        raise NumericFailure("non-finite gradient passed to adam_step")
    state.step_count += 1
    t = state.step_count
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**t)
    v_hat = state.v / (1.0 - state.beta2**t)
    params.values -= lr * m_hat / (np.sqrt(v_hat) + state.eps_hat)
    return params, state
