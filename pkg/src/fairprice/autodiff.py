"""Reverse-mode automatic differentiation on a tape.

Nodes carry float64 numpy values (scalars or arrays) so that a whole
mini-batch flows through one node per primitive. Each node stores its
parents and a vector-Jacobian closure; ``backward`` walks the tape once in
reverse order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit


class EvaluationError(ArithmeticError):
    """Domain violation or non-finite value on the tape."""


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that were added or stretched by numpy broadcasting
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    """Append-only record of a computation."""

    def __init__(self):
        self.kinds: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[Callable | None] = []
        self.values: list[np.ndarray] = []

    def __len__(self):
        return len(self.values)

    def _push(self, kind, value, parents=(), vjp=None) -> "Var":
        self.kinds.append(kind)
        self.parents.append(tuple(parents))
        self.vjps.append(vjp)
        self.values.append(value)
        return Var(self, len(self.values) - 1)

    def leaf(self, value, name: str = "leaf") -> "Var":
        return self._push(name, _as_array(value).copy())

    def constant(self, value) -> "Var":
        return self._push("const", _as_array(value))


class Var:
    """Handle to one node of a tape."""

    __slots__ = ("tape", "index")
    __array_priority__ = 100.0

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Var(node={self.index}, kind={self.tape.kinds[self.index]}, shape={self.shape})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __rmatmul__ = lambda self, other: matmul(other, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, key: take(self, key)


def _tape_of(*operands) -> Tape:
    tapes = {id(op.tape): op.tape for op in operands if isinstance(op, Var)}
    if len(tapes) != 1:
        raise EvaluationError("operands must live on exactly one tape")
    return next(iter(tapes.values()))


def _lift(tape: Tape, operand) -> Var:
    return operand if isinstance(operand, Var) else tape.constant(operand)


def _binary(kind, a, b, forward, vjp_a, vjp_b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    out = forward(av, bv)

    def vjp(g):
        return (_unbroadcast(vjp_a(g, av, bv, out), av.shape),
                _unbroadcast(vjp_b(g, av, bv, out), bv.shape))

    return tape._push(kind, out, (a.index, b.index), vjp)


def _unary(kind, a: Var, forward, local) -> Var:
    av = a.value
    out = forward(av)
    return a.tape._push(kind, out, (a.index,), lambda g: (g * local(av, out),))


def add(a, b) -> Var:
    return _binary("add", a, b, np.add,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Var:
    return _binary("sub", a, b, np.subtract,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Var:
    return _binary("mul", a, b, np.multiply,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Var:
    tape = _tape_of(a, b)
    b = _lift(tape, b)
    if np.any(b.value == 0.0):
        raise EvaluationError(f"div: zero denominator at node {len(tape)}")
    return _binary("div", a, b, np.divide,
                   lambda g, x, y, o: g / y, lambda g, x, y, o: -g * o / y)


def neg(a: Var) -> Var:
    return a.tape._push("neg", -a.value, (a.index,), lambda g: (-g,))


def exp(a: Var) -> Var:
    return _unary("exp", a, np.exp, lambda x, o: o)


def ln(a: Var) -> Var:
    if np.any(a.value <= 0.0):
        raise EvaluationError(f"ln: non-positive argument at node {len(a.tape)} (parent node {a.index})")
    return _unary("ln", a, np.log, lambda x, o: 1.0 / x)


def sqrt(a: Var) -> Var:
    if np.any(a.value <= 0.0):
        raise EvaluationError(f"sqrt: non-positive argument at node {len(a.tape)} (parent node {a.index})")
    return _unary("sqrt", a, np.sqrt, lambda x, o: 0.5 / o)


def sigmoid(a: Var) -> Var:
    return _unary("sigmoid", a, expit, lambda x, o: o * (1.0 - o))


def tanh(a: Var) -> Var:
    return _unary("tanh", a, np.tanh, lambda x, o: 1.0 - o * o)


def relu(a: Var) -> Var:
    return _unary("relu", a, lambda x: np.maximum(x, 0.0), lambda x, o: (x > 0.0).astype(np.float64))


def clip(a: Var, lo: float, hi: float) -> Var:
    return _unary("clip", a, lambda x: np.clip(x, lo, hi),
                  lambda x, o: ((x >= lo) & (x <= hi)).astype(np.float64))


def square(a: Var) -> Var:
    return _unary("square", a, np.square, lambda x, o: 2.0 * x)


def sum(a: Var) -> Var:  # noqa: A001 - mirrors numpy naming
    shape = a.value.shape
    return a.tape._push("sum", np.sum(a.value), (a.index,),
                        lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Var) -> Var:
    shape = a.value.shape
    n = a.value.size
    return a.tape._push("mean", np.mean(a.value), (a.index,),
                        lambda g: (np.broadcast_to(g / n, shape).copy(),))


def reshape(a: Var, shape) -> Var:
    old = a.value.shape
    return a.tape._push("reshape", a.value.reshape(shape), (a.index,),
                        lambda g: (np.reshape(g, old),))


def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim not in (1, 2):
        raise EvaluationError("matmul expects a 2-D left operand and 1-D or 2-D right operand")

    def vjp(g):
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return tape._push("matmul", av @ bv, (a.index, b.index), vjp)


def take(a: Var, key) -> Var:
    """Indexing, e.g. ``take(v, slice(0, 3))``; repeated fancy indices accumulate."""
    shape = a.value.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return a.tape._push("take", np.array(a.value[key]), (a.index,), vjp)


def dot(a, b) -> Var:
    """Inner product of two 1-D operands."""
    return sum(mul(a, b))


class Gradients:
    """Result of ``backward``: gradient of the output w.r.t. every node."""

    def __init__(self, tape: Tape, grads: list):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, var: Var) -> np.ndarray:
        g = self._grads[var.index]
        if g is None:
            return np.zeros_like(var.value)
        return g

    def node(self, index: int) -> np.ndarray:
        g = self._grads[index]
        return np.zeros_like(self._tape.values[index]) if g is None else g


def backward(output: Var) -> Gradients:
    """Gradient of a scalar ``output`` with respect to every node on its tape."""
    tape = output.tape
    if output.value.size != 1:
        raise EvaluationError(f"backward needs a scalar output, got shape {output.shape}")
    grads: list = [None] * len(tape)
    grads[output.index] = np.ones_like(output.value)
    for i in range(output.index, -1, -1):
        g = grads[i]
        if g is None:
            continue
        value = tape.values[i]
        if not np.all(np.isfinite(value)) or not np.all(np.isfinite(g)):
            raise EvaluationError(f"non-finite value or gradient at node {i} ({tape.kinds[i]})")
        vjp = tape.vjps[i]
        if vjp is None:
            continue
        for parent, pg in zip(tape.parents[i], vjp(g)):
            if grads[parent] is None:
                grads[parent] = np.array(pg, dtype=np.float64)
            else:
                grads[parent] = grads[parent] + pg
    return Gradients(tape, grads)


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    rel_errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray


def grad_check(f: Callable[[Var], Var], point, step: float = 1e-5,
               tolerance: float = 1e-5, floor: float = 1e-6) -> GradCheckReport:
    """Compare ``backward`` against central differences at ``point``.

    ``f`` receives a 1-D leaf ``Var`` and must return a scalar ``Var`` built
    on the same tape. The relative error of each coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """
    point = _as_array(point).ravel()
    tape = Tape()
    x = tape.leaf(point)
    analytic = backward(f(x))[x].ravel()

    numeric = np.empty_like(point)
    for i in range(point.size):
        shifted = point.copy()
        shifted[i] = point[i] + step
        up = f(Tape().leaf(shifted)).item()
        shifted[i] = point[i] - step
        down = f(Tape().leaf(shifted)).item()
        numeric[i] = (up - down) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel <= tolerance, max_rel, rel, analytic, numeric)
