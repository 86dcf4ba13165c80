"""A small record-and-replay reverse-mode tape over numpy arrays.

Only the operations the tone mapper needs are provided.  Every op appends one
node to the tape; ``Tape.backward`` walks the nodes in reverse and returns a
``Gradients`` mapping.  Plain numpy arrays mixed into an op are constants.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Var:
    __slots__ = ("value", "tape", "index", "parents", "op")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, tape, parents=(), op=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.op = op
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"


class Gradients:
    def __init__(self, grads):
        self._grads = grads

    def __getitem__(self, var: Var) -> np.ndarray:
        g = self._grads[var.index]
        return np.zeros_like(var.value) if g is None else g

    def get(self, var: Var):
        return self._grads[var.index]


class Tape:
    def __init__(self):
        self.nodes: list[Var] = []

    def kink_pattern(self) -> list[np.ndarray]:
        """Active-side masks of every relu on the tape, in creation order."""
        return [node.value > 0.0 for node in self.nodes if node.op == "relu"]

    def var(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64), self)

    def backward(self, seeds: dict) -> Gradients:
        grads = [None] * len(self.nodes)
        last = -1
        for var, seed in seeds.items():
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != var.value.shape:
                raise ValueError(f"seed shape {seed.shape} does not match {var.value.shape}")
            grads[var.index] = seed if grads[var.index] is None else grads[var.index] + seed
            last = max(last, var.index)
        for idx in range(last, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            for parent, vjp in self.nodes[idx].parents:
                pg = vjp(g)
                if grads[parent.index] is None:
                    grads[parent.index] = pg
                else:
                    grads[parent.index] = grads[parent.index] + pg
        return Gradients(grads)


def _tape_of(*args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise TypeError("at least one operand must be a Var")


def add(a, b):
    tape = _tape_of(a, b)
    av = a.value if isinstance(a, Var) else np.asarray(a, dtype=np.float64)
    bv = b.value if isinstance(b, Var) else np.asarray(b, dtype=np.float64)
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g, s=av.shape: _unbroadcast(g, s)))
    if isinstance(b, Var):
        parents.append((b, lambda g, s=bv.shape: _unbroadcast(g, s)))
    return Var(av + bv, tape, tuple(parents))


def neg(a):
    if not isinstance(a, Var):
        return -np.asarray(a, dtype=np.float64)
    return Var(-a.value, a.tape, ((a, lambda g: -g),))


def mul(a, b):
    tape = _tape_of(a, b)
    av = a.value if isinstance(a, Var) else np.asarray(a, dtype=np.float64)
    bv = b.value if isinstance(b, Var) else np.asarray(b, dtype=np.float64)
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: _unbroadcast(g * bv, av.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: _unbroadcast(g * av, bv.shape)))
    return Var(av * bv, tape, tuple(parents))


def matmul(a, b):
    tape = _tape_of(a, b)
    av = a.value if isinstance(a, Var) else np.asarray(a, dtype=np.float64)
    bv = b.value if isinstance(b, Var) else np.asarray(b, dtype=np.float64)
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)))
    return Var(av @ bv, tape, tuple(parents))


def sigmoid(a: Var) -> Var:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return Var(out, a.tape, ((a, lambda g: g * out * (1.0 - out)),))


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return Var(out, a.tape, ((a, lambda g: g * (1.0 - out * out)),))


def relu(a: Var) -> Var:
    out = np.maximum(a.value, 0.0)
    return Var(out, a.tape, ((a, lambda g: g * (out > 0.0)),), op="relu")


def log_clamped(a: Var, eps: float) -> Var:
    """log(max(a, eps)); zero gradient where the clamp is active."""
    mask = a.value > eps
    safe = np.where(mask, a.value, eps)
    return Var(np.log(safe), a.tape, ((a, lambda g: np.where(mask, g / safe, 0.0)),), op="log_clamped")


def transpose(a: Var, axes) -> Var:
    inv = np.argsort(axes)
    return Var(np.transpose(a.value, axes), a.tape, ((a, lambda g: np.transpose(g, inv)),))


def reshape(a: Var, shape) -> Var:
    old = a.value.shape
    return Var(a.value.reshape(shape), a.tape, ((a, lambda g: g.reshape(old)),))


def broadcast_to(a: Var, shape) -> Var:
    old = a.value.shape
    return Var(np.broadcast_to(a.value, shape).copy(), a.tape, ((a, lambda g: _unbroadcast(g, old)),))


def concat(parts, axis: int = -1) -> Var:
    tape = _tape_of(*parts)
    values = [p.value if isinstance(p, Var) else np.asarray(p, dtype=np.float64) for p in parts]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])
    parents = []
    for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
        if isinstance(p, Var):
            parents.append((p, lambda g, lo=lo, hi=hi: np.take(g, np.arange(lo, hi), axis=axis)))
    return Var(out, tape, tuple(parents))


def row(a: Var, i: int) -> Var:
    """Row ``i`` of a 2-D var, kept 2-D (1, n)."""
    def vjp(g, shape=a.value.shape):
        out = np.zeros(shape)
        out[i] = g[0]
        return out
    return Var(a.value[i:i + 1], a.tape, ((a, vjp),))
