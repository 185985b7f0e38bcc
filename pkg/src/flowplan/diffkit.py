"""Reverse-mode automatic differentiation over numpy array expression graphs.

Each op records its parents and a closure that routes the incoming gradient
to them; ``backward`` walks the graph once in reverse topological order.
Values are float64 arrays so a single graph can carry a whole batch (Monte
Carlo samples down the leading axis), which is what makes planning-by-ascent
affordable without a tensor library.

Also home to the small pieces the model needs around the graphs: glorot MLP
initialization, Adam-style adaptive moments, and a central finite-difference
gradient checker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import RngStream

LOG_2PI = math.log(2.0 * math.pi)


class Node:
    """One value in an expression graph.

    ``grad`` holds d(root)/d(this) after ``backward``; it stays None for
    nodes the root does not depend on differentiably.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward_fn", "_used_backward")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(p for p in parents if p.requires_grad)
        self._backward_fn = backward_fn
        self._used_backward = False

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    # arithmetic sugar; scalars and arrays coerce to constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


def leaf(value) -> Node:
    """A differentiable input: gradients accumulate here."""
    return Node(value, requires_grad=True)


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accumulate(node: Node, g) -> None:
    if not node.requires_grad:
        return
    g = _unbroadcast(np.asarray(g, dtype=np.float64), node.value.shape)
    node.grad = g if node.grad is None else node.grad + g


def _check_finite(value: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(value).all():
        raise ValueError(f"non-finite value produced by {op}")
    return value


# --- primitive ops ---


def add(a: Node, b: Node) -> Node:
    a, b = _wrap(a), _wrap(b)
    out = Node(a.value + b.value, (a, b), requires_grad=a.requires_grad or b.requires_grad)

    def backward_fn(g):
        _accumulate(a, g)
        _accumulate(b, g)

    out._backward_fn = backward_fn
    return out


def sub(a: Node, b: Node) -> Node:
    a, b = _wrap(a), _wrap(b)
    out = Node(a.value - b.value, (a, b), requires_grad=a.requires_grad or b.requires_grad)

    def backward_fn(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    out._backward_fn = backward_fn
    return out


def neg(a: Node) -> Node:
    out = Node(-a.value, (a,), requires_grad=a.requires_grad)
    out._backward_fn = lambda g: _accumulate(a, -g)
    return out


def mul(a: Node, b: Node) -> Node:
    a, b = _wrap(a), _wrap(b)
    out = Node(a.value * b.value, (a, b), requires_grad=a.requires_grad or b.requires_grad)

    def backward_fn(g):
        _accumulate(a, g * b.value)
        _accumulate(b, g * a.value)

    out._backward_fn = backward_fn
    return out


def div(a: Node, b: Node) -> Node:
    a, b = _wrap(a), _wrap(b)
    value = _check_finite(a.value / b.value, "div")
    out = Node(value, (a, b), requires_grad=a.requires_grad or b.requires_grad)

    def backward_fn(g):
        _accumulate(a, g / b.value)
        _accumulate(b, -g * a.value / (b.value * b.value))

    out._backward_fn = backward_fn
    return out


def matmul(a: Node, b: Node) -> Node:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim > 2 or b.value.ndim > 2:
        raise ValueError("matmul supports vectors and matrices only")
    out = Node(a.value @ b.value, (a, b), requires_grad=a.requires_grad or b.requires_grad)

    def backward_fn(g):
        av, bv = a.value, b.value
        if av.ndim == 2 and bv.ndim == 2:
            _accumulate(a, g @ bv.T)
            _accumulate(b, av.T @ g)
        elif av.ndim == 1 and bv.ndim == 2:
            _accumulate(a, bv @ g)
            _accumulate(b, np.outer(av, g))
        elif av.ndim == 2 and bv.ndim == 1:
            _accumulate(a, np.outer(g, bv))
            _accumulate(b, av.T @ g)
        else:  # vector . vector
            _accumulate(a, g * bv)
            _accumulate(b, g * av)

    out._backward_fn = backward_fn
    return out


def tanh(a: Node) -> Node:
    value = np.tanh(a.value)
    out = Node(value, (a,), requires_grad=a.requires_grad)
    out._backward_fn = lambda g: _accumulate(a, g * (1.0 - value * value))
    return out


def exp(a: Node) -> Node:
    value = _check_finite(np.exp(a.value), "exp")
    out = Node(value, (a,), requires_grad=a.requires_grad)
    out._backward_fn = lambda g: _accumulate(a, g * value)
    return out


def log(a: Node) -> Node:
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.value)
    _check_finite(value, "log")
    out = Node(value, (a,), requires_grad=a.requires_grad)
    out._backward_fn = lambda g: _accumulate(a, g / a.value)
    return out


def sqrt(a: Node) -> Node:
    with np.errstate(invalid="ignore"):
        value = np.sqrt(a.value)
    _check_finite(value, "sqrt")
    out = Node(value, (a,), requires_grad=a.requires_grad)
    out._backward_fn = lambda g: _accumulate(a, g * 0.5 / value)
    return out


def square(a: Node) -> Node:
    out = Node(a.value * a.value, (a,), requires_grad=a.requires_grad)
    out._backward_fn = lambda g: _accumulate(a, g * 2.0 * a.value)
    return out


def relu(a: Node) -> Node:
    out = Node(np.maximum(a.value, 0.0), (a,), requires_grad=a.requires_grad)
    out._backward_fn = lambda g: _accumulate(a, g * (a.value > 0.0))
    return out


def maximum(a: Node, b: Node) -> Node:
    a, b = _wrap(a), _wrap(b)
    out = Node(np.maximum(a.value, b.value), (a, b), requires_grad=a.requires_grad or b.requires_grad)

    def backward_fn(g):
        take_a = a.value >= b.value  # ties route to the first argument
        _accumulate(a, g * take_a)
        _accumulate(b, g * ~take_a)

    out._backward_fn = backward_fn
    return out


def minimum(a: Node, b: Node) -> Node:
    a, b = _wrap(a), _wrap(b)
    out = Node(np.minimum(a.value, b.value), (a, b), requires_grad=a.requires_grad or b.requires_grad)

    def backward_fn(g):
        take_a = a.value <= b.value
        _accumulate(a, g * take_a)
        _accumulate(b, g * ~take_a)

    out._backward_fn = backward_fn
    return out


def clip(a: Node, lo: float, hi: float) -> Node:
    """Hard clamp; gradient is zero where the input lies outside [lo, hi]."""
    out = Node(np.clip(a.value, lo, hi), (a,), requires_grad=a.requires_grad)
    out._backward_fn = lambda g: _accumulate(a, g * ((a.value >= lo) & (a.value <= hi)))
    return out


def node_sum(a: Node, axis=None) -> Node:
    out = Node(a.value.sum(axis=axis), (a,), requires_grad=a.requires_grad)

    def backward_fn(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.value.shape))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.value.shape))

    out._backward_fn = backward_fn
    return out


def node_mean(a: Node, axis=None) -> Node:
    count = a.value.size if axis is None else a.value.shape[axis]
    return node_sum(a, axis=axis) * (1.0 / count)


def getitem(a: Node, idx) -> Node:
    out = Node(a.value[idx], (a,), requires_grad=a.requires_grad)

    def backward_fn(g):
        if not a.requires_grad:
            return
        acc = np.zeros_like(a.value)
        np.add.at(acc, idx, g)
        _accumulate(a, acc)

    out._backward_fn = backward_fn
    return out


def reshape(a: Node, shape) -> Node:
    out = Node(a.value.reshape(shape), (a,), requires_grad=a.requires_grad)
    out._backward_fn = lambda g: _accumulate(a, g.reshape(a.value.shape))
    return out


def concat(parts: Sequence[Node], axis: int = -1) -> Node:
    parts = [_wrap(p) for p in parts]
    out = Node(
        np.concatenate([p.value for p in parts], axis=axis),
        tuple(parts),
        requires_grad=any(p.requires_grad for p in parts),
    )

    def backward_fn(g):
        sizes = [p.value.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, stop)
            _accumulate(p, g[tuple(idx)])

    out._backward_fn = backward_fn
    return out


def gaussian_logpdf(x, mu, sigma) -> Node:
    """Elementwise log N(x; mu, sigma^2), built from primitives."""
    x, mu, sigma = _wrap(x), _wrap(mu), _wrap(sigma)
    z = (x - mu) / sigma
    return -0.5 * square(z) - log(sigma) - 0.5 * LOG_2PI


# --- backward pass ---


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order  # parents appear before consumers; root is last


def backward(root: Node) -> None:
    """Populate ``grad`` on every differentiable node under ``root``.

    The root must be scalar.  Gradient accumulators are freshly zeroed here;
    running backward a second time over any node already visited is an error
    (silent re-accumulation is the classic autodiff bug).
    """
    if root.value.size != 1:
        raise ValueError("backward requires a scalar root")
    if not root.requires_grad:
        raise ValueError("root does not depend on any differentiable leaf")
    order = _topo_order(root)
    for node in order:
        if node._used_backward:
            raise RuntimeError("backward already ran through this graph; build a fresh graph or reset_grads first")
    for node in order:
        node._used_backward = True
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None or node._backward_fn is None:
            continue
        node._backward_fn(node.grad)


def reset_grads(root: Node) -> None:
    """Clear gradients and the used-backward mark under ``root``."""
    for node in _topo_order(root):
        node.grad = None
        node._used_backward = False


# --- MLP primitives ---


@dataclass
class MlpParams:
    """Plain parameter arrays for a tanh MLP with a linear output layer."""

    weights: list[np.ndarray]  # each (fan_in, fan_out)
    biases: list[np.ndarray]  # each (fan_out,)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> MlpParams:
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_mlp(layer_sizes: Sequence[int], rng: RngStream) -> MlpParams:
    """Glorot-uniform weights in +/- sqrt(6 / (fan_in + fan_out)), zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def mlp_apply(weights: Sequence[Node], biases: Sequence[Node], x: Node) -> Node:
    """Forward pass; ``x`` may be a single input (D,) or a batch (N, D)."""
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = matmul(h, w) + b
        if i != last:
            h = tanh(h)
    return h


class Adam:
    """Adaptive-moment descent on a dict of named parameter arrays."""

    def __init__(self, step_size: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.step_size = step_size
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place to descend ``grads``."""
        self.t += 1
        for name, g in grads.items():
            if name not in self._m:
                self._m[name] = np.zeros_like(params[name])
                self._v[name] = np.zeros_like(params[name])
            m = self._m[name]
            v = self._v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            m_hat = m / (1.0 - self.beta1**self.t)
            v_hat = v / (1.0 - self.beta2**self.t)
            params[name] -= self.step_size * m_hat / (np.sqrt(v_hat) + self.eps)


def grad_check(f: Callable[[Node], Node], point: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Node wrapping an array shaped like ``point`` to a scalar
    Node.  Error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    point = np.asarray(point, dtype=np.float64)
    x = leaf(point.copy())
    out = f(x)
    if out.value.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(point)

    numeric = np.zeros_like(point)
    flat_numeric = numeric.ravel()
    for i in range(point.size):
        bumped = point.copy()
        bumped.ravel()[i] += step
        f_plus = float(f(constant(bumped)).value)
        bumped.ravel()[i] -= 2.0 * step
        f_minus = float(f(constant(bumped)).value)
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise ValueError("non-finite value at finite-difference probe point")
        flat_numeric[i] = (f_plus - f_minus) / (2.0 * step)

    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max())
