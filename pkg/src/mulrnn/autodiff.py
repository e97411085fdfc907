"""Dense float64 matrices with reverse-mode automatic differentiation.

Everything numeric is a plain 2-D numpy array. A Node wraps one array
together with its gradient and the backward rule of the operation that
produced it; the module-level ops (matmul, hadamard, add, ...) build the
graph and Node.backward() differentiates it. Broadcasting is deliberately
restricted to the one case the recurrence equations need: adding an
(n, 1) bias column to an (n, B) block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


def make_rng(seed):
    """Seeded generator; equal seeds yield bitwise-identical streams."""
    return np.random.default_rng(seed)


def as_matrix(x):
    """Coerce to a 2-D float64 array; scalars become 1x1, vectors a column."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(-1, 1)
    if a.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {a.shape}")
    return a


class Node:
    """A value in the computation graph plus its accumulated gradient."""

    __slots__ = ("value", "grad", "op", "_parents", "_rule", "_adjoint")

    def __init__(self, value, parents=(), op="leaf"):
        self.value = as_matrix(value)
        self.grad = np.zeros_like(self.value)
        self.op = op
        self._parents = tuple(parents)
        self._rule = None
        self._adjoint = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    def backward(self):
        """Add d(self)/d(node) into .grad for every node reachable from here.

        The root must be 1x1. Each call contributes one full pass, so
        repeated calls without zeroing accumulate.
        """
        if self.value.shape != (1, 1):
            raise ShapeError(f"backward root must be 1x1, got {self.value.shape}")
        order = topo_order(self)
        for node in order:
            node._adjoint = np.zeros_like(node.value)
        self._adjoint[0, 0] = 1.0
        for node in reversed(order):
            node.grad += node._adjoint
            if node._rule is not None:
                node._rule(node._adjoint)
        for node in order:
            node._adjoint = None


def topo_order(root):
    """Parents-before-children ordering, iterative so deep unrolls are safe."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _check_same_shape(op, a, b):
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


def matmul(a, b):
    """Matrix product a @ b."""
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: {a.value.shape} @ {b.value.shape}")
    out = Node(a.value @ b.value, (a, b), "matmul")

    def rule(g):
        a._adjoint += g @ b.value.T
        b._adjoint += a.value.T @ g

    out._rule = rule
    return out


def hadamard(a, b):
    """Elementwise product of two same-shape matrices."""
    _check_same_shape("hadamard", a, b)
    out = Node(a.value * b.value, (a, b), "hadamard")

    def rule(g):
        a._adjoint += g * b.value
        b._adjoint += g * a.value

    out._rule = rule
    return out


def add(a, b):
    """a + b; b may also be an (n, 1) bias column added to an (n, B) block."""
    same = a.value.shape == b.value.shape
    if not same and b.value.shape != (a.value.shape[0], 1):
        raise ShapeError(f"add: shapes {a.value.shape} and {b.value.shape} differ")
    out = Node(a.value + b.value, (a, b), "add")

    def rule(g):
        a._adjoint += g
        b._adjoint += g if same else g.sum(axis=1, keepdims=True)

    out._rule = rule
    return out


def scale(a, k):
    """Multiply every entry by the plain scalar k."""
    k = float(k)
    out = Node(a.value * k, (a,), "scale")

    def rule(g):
        a._adjoint += g * k

    out._rule = rule
    return out


def one_minus(a):
    """1 - a, elementwise."""
    out = Node(1.0 - a.value, (a,), "one_minus")

    def rule(g):
        a._adjoint -= g

    out._rule = rule
    return out


def tanh(a):
    out = Node(np.tanh(a.value), (a,), "tanh")

    def rule(g):
        a._adjoint += g * (1.0 - out.value * out.value)

    out._rule = rule
    return out


def _sigmoid_values(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = Node(_sigmoid_values(a.value), (a,), "sigmoid")

    def rule(g):
        a._adjoint += g * out.value * (1.0 - out.value)

    out._rule = rule
    return out


def sum_all(a):
    """Sum of all entries as a 1x1 node."""
    out = Node(np.array([[a.value.sum()]]), (a,), "sum_all")

    def rule(g):
        a._adjoint += g[0, 0]

    out._rule = rule
    return out


def softmax_columns(z):
    """Column-wise softmax of a raw array, stabilized by max subtraction."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def softmax_cross_entropy(logits, targets):
    """Mean negative log-likelihood (nats) of targets under column softmax.

    logits is (V, B), targets holds B class ids. Backward distributes
    (softmax - onehot) / B.
    """
    z = logits.value
    t = np.asarray(targets, dtype=np.int64).ravel()
    n_classes, batch = z.shape
    if t.shape[0] != batch:
        raise ShapeError(f"got {t.shape[0]} targets for {batch} logit columns")
    if t.size and (t.min() < 0 or t.max() >= n_classes):
        bad = int(t[(t < 0) | (t >= n_classes)][0])
        raise IndexError(f"target id {bad} outside [0, {n_classes})")
    shifted = z - z.max(axis=0, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    cols = np.arange(batch)
    out = Node(np.array([[-log_probs[t, cols].mean()]]), (logits,), "softmax_ce")

    def rule(g):
        delta = np.exp(log_probs)
        delta[t, cols] -= 1.0
        logits._adjoint += (g[0, 0] / batch) * delta

    out._rule = rule
    return out


@dataclass(frozen=True)
class GradCheckReport:
    """Per-parameter max relative error between analytic and numeric grads."""

    per_param: dict
    step: float
    tol: float

    @property
    def max_rel_err(self):
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self):
        return self.max_rel_err < self.tol

    def summary(self):
        lines = [
            f"{name}: max_rel_err={err:.3e}"
            for name, err in sorted(self.per_param.items())
        ]
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict} (max={self.max_rel_err:.3e}, tol={self.tol:g}, step={self.step:g})")
        return "\n".join(lines)


def grad_check(f, params, step=1e-5, tol=1e-4):
    """Compare analytic gradients of a scalar function with central differences.

    f maps {name: Node} to a scalar Node and must be deterministic. The
    numeric side re-runs f on perturbed copies entry by entry, so it never
    trusts the backward rules it is checking. Per parameter the error is
    the norm ratio |a - n| / max(|a|, |n|, 1e-8); comparing whole-matrix
    norms keeps the check insensitive to difference-quotient roundoff on
    individual near-zero entries while a wrong rule still shows up orders
    of magnitude above any sane tolerance. Always returns a report, never
    raises on mismatch.
    """
    base = {name: as_matrix(np.array(value, dtype=np.float64)) for name, value in params.items()}
    leaves = {name: Node(value.copy()) for name, value in base.items()}
    f(leaves).backward()
    analytic = {name: leaves[name].grad for name in base}

    def value_at():
        return float(f({name: Node(a) for name, a in base.items()}).value[0, 0])

    per_param = {}
    for name, theta in base.items():
        numeric = np.zeros_like(theta)
        for idx in np.ndindex(*theta.shape):
            saved = theta[idx]
            theta[idx] = saved + step
            up = value_at()
            theta[idx] = saved - step
            down = value_at()
            theta[idx] = saved
            numeric[idx] = (up - down) / (2.0 * step)
        a = analytic[name]
        gap = float(np.linalg.norm(a - numeric))
        per_param[name] = gap / max(float(np.linalg.norm(a)), float(np.linalg.norm(numeric)), 1e-8)
    return GradCheckReport(per_param=per_param, step=step, tol=tol)
