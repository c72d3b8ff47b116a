"""Dense float64 tensors with a small reverse-mode autodiff engine.

Every op builds a node that remembers its parents and a closure that pushes
the output gradient back to them. Graphs are rebuilt on every forward pass.
Custom forward/backward pairs (straight-through estimators, piecewise-linear
equalization) are registered through :func:`custom_op`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class Tensor:
    """A node in the computation graph.

    ``data`` is a float64 array; ``grad`` is filled in by :func:`backward`.
    Leaves created by the user have ``op == "leaf"``.
    """

    __slots__ = ("data", "grad", "op", "parents", "_backward", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values produced by op '{op}'")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return hadamard(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return affine(self, -1.0, 0.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: tuple, backward) -> Tensor:
    out = Tensor(data, op=op, parents=parents)
    out._backward = backward
    return out


def _check_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _node(ad @ bd, "matmul", (a, b), backward)


def add(a, b) -> Tensor:
    """Elementwise sum. ``b`` may be a row vector added to every row of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _node(a.data + b.data, "add", (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return _node(a.data + b.data, "add_row", (a, b), lambda g: (g, g.sum(axis=0)))
    raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_shapes(a, b, "sub")
    return _node(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_shapes(a, b, "hadamard")
    ad, bd = a.data, b.data
    return _node(ad * bd, "hadamard", (a, b), lambda g: (g * bd, g * ad))


def affine(a, scale: float, shift: float = 0.0) -> Tensor:
    """``scale * a + shift`` with scalar constants."""
    a = as_tensor(a)
    return _node(scale * a.data + shift, "affine", (a,), lambda g: (scale * g,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form never overflows
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _node(t, "tanh", (a,), lambda g: (g * (1.0 - t * t),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, backward)


def tensor_sum(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _node(a.data.sum(), "sum", (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    return _node(a.data.mean(), "mean", (a,), lambda g: (np.full(shape, g / n),))


def softmax_cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:1]:
        raise ValueError(f"expected {logits.shape[0]} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]}) for {logits.shape[1]} logits")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = z.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return _node(loss, "softmax_xent", (logits,), backward)


def sigmoid_cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy between sigmoid(logits) and {0,1} ``targets``."""
    logits = as_tensor(logits)
    x = logits.data
    t = np.asarray(targets, dtype=np.float64)
    loss = np.mean(np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x))))
    n = x.size

    def backward(g):
        s = 0.5 * (1.0 + np.tanh(0.5 * x))
        return (g * (s - t) / n,)

    return _node(loss, "sigmoid_xent", (logits,), backward)


def custom_op(a, forward: Callable[[np.ndarray], np.ndarray],
              backward: Callable[[np.ndarray, np.ndarray], np.ndarray], op: str) -> Tensor:
    """Wrap a numpy function with a hand-written vector-Jacobian product.

    ``backward(grad_out, input_data)`` returns the gradient for the input.
    """
    a = as_tensor(a)
    x = a.data
    return _node(forward(x), op, (a,), lambda g: (backward(g, x),))


def ste(a, fn: Callable[[np.ndarray], np.ndarray], op: str = "ste") -> Tensor:
    """Straight-through estimator: forward ``fn``, backward identity."""
    return custom_op(a, fn, lambda g, x: g, op)


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``root``.

    Populates ``.grad`` on every node reachable from ``root`` and returns the
    gradients of the leaves that require them.
    """
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    order = _topological(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node._backward(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float64).reshape(parent.shape)
            parent.grad = g.copy() if parent.grad is None else parent.grad + g
    return {n: n.grad for n in order if n.op == "leaf" and n.requires_grad and n.grad is not None}


def leaves(root: Tensor) -> Iterable[Tensor]:
    return (n for n in _topological(root) if n.op == "leaf")
