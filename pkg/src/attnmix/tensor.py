"""Dense float64 tensors with a small reverse-mode autodiff engine.

Every op builds a fresh node that remembers its inputs and a closure mapping
the upstream gradient to per-input gradients. ``backward`` orders the graph
topologically from the root and walks it in exact reverse, accumulating into
the ``grad`` buffer of every leaf that requires it. Intermediate gradients
live only for the duration of one ``backward`` call.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, InputError, NumericError

__all__ = [
    "Tensor",
    "matmul",
    "ewise",
    "add",
    "sub",
    "mul",
    "add_bias",
    "scale",
    "one_minus",
    "activation",
    "relu",
    "tanh",
    "loss_ce",
    "loss_mse",
    "frob_sq",
    "backward",
    "zero_grad",
]


class Tensor:
    """A dense real array, optionally tracking gradients.

    Args:
        data: array-like, converted to a contiguous float64 array.
        requires_grad: whether ``backward`` should deposit a gradient here.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._grad_fn: Optional[Callable] = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # Operator sugar; all routes go through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")


def _node(data: np.ndarray, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a`` (N x K) and ``b`` (K x M)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    ad, bd = a.data, b.data

    def grad_fn(g):
        return g @ bd.T, ad.T @ g

    return _node(ad @ bd, (a, b), grad_fn, "matmul")


def ewise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Element-wise ``add``, ``sub`` or ``mul`` of two same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"{kind} shape mismatch: {a.shape} vs {b.shape}")
    if kind == "add":
        return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if kind == "sub":
        return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")
    if kind == "mul":
        ad, bd = a.data, b.data
        return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")
    raise InputError(f"unknown element-wise kind {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    return ewise(a, b, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return ewise(a, b, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return ewise(a, b, "mul")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-N bias to every row of a B x N tensor."""
    if x.data.ndim != 2 or bias.data.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise DimensionError(f"add_bias shape mismatch: {x.shape} + {bias.shape}")

    def grad_fn(g):
        return g, g.sum(axis=0)

    return _node(x.data + bias.data, (x, bias), grad_fn, "add_bias")


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    c = float(c)
    return _node(x.data * c, (x,), lambda g: (g * c,), "scale")


def one_minus(x: Tensor) -> Tensor:
    """Element-wise ``1 - x``."""
    return _node(1.0 - x.data, (x,), lambda g: (-g,), "one_minus")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


_ACTIVATIONS = {"relu": relu, "tanh": tanh}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise InputError(f"unknown activation {kind!r}") from None


def loss_ce(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be B x C, got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"labels must lie in [0, {c})")
    labels = labels.astype(np.int64)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()

    def grad_fn(g):
        d = np.exp(log_p)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _node(np.asarray(loss), (logits,), grad_fn, "loss_ce")


def loss_mse(pred: Tensor, target) -> Tensor:
    """Mean squared error; ``pred`` may be shaped (B,) or (B, 1)."""
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    flat = pred.data.reshape(-1)
    if pred.data.ndim > 2 or (pred.data.ndim == 2 and pred.shape[1] != 1):
        raise InputError(f"regression output must be (B,) or (B, 1), got {pred.shape}")
    if flat.shape != target.shape:
        raise InputError(f"length mismatch: {flat.size} predictions vs {target.size} targets")
    diff = flat - target
    n = diff.size

    def grad_fn(g):
        return ((2.0 * g / n) * diff.reshape(pred.shape),)

    return _node(np.asarray(np.mean(diff * diff)), (pred,), grad_fn, "loss_mse")


def frob_sq(x: Tensor) -> Tensor:
    """Sum of squared entries."""
    xd = x.data
    return _node(np.asarray(np.sum(xd * xd)), (x,), lambda g: (2.0 * g * xd,), "frob_sq")


def _topo_order(root: Tensor) -> list:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every ``requires_grad`` leaf.

    Gradients add onto whatever the leaves already hold; call
    :func:`zero_grad` between steps.
    """
    if loss.data.size != 1:
        raise InputError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            _check_finite(g, "backward")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None
