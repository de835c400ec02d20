"""Feed-forward networks whose hidden linear layers mix task and pretrained weights.

A mixup layer holds a trainable task weight ``W``, a frozen pretrained weight
``W0`` and two low-rank attention factors. The weight used in the forward pass
is

    W_mix = (a1 @ a2 / r) * W + ((1 - a1) @ (1 - a2) / r) * W0

with every factor entry kept in [0, 1]. Weights are stored input-major
(``in x out``) so a layer computes ``x @ W_mix + b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import DimensionError, InputError
from .tensor import Tensor

ROLES = ("task", "alpha", "frozen", "plain")

HEAD_INIT_STD = 0.02


def init_alpha(n: int, m: int, r: int, mu: float = 1.0, sigma: float = 0.005, seed: int = 0):
    """Draw low-rank attention factors from N(mu, sigma) and clip them to [0, 1].

    Returns ``(alpha1, alpha2)`` as arrays of shape ``(n, r)`` and ``(r, m)``.
    """
    if min(n, m, r) < 1:
        raise InputError(f"factor dimensions must be positive, got n={n} m={m} r={r}")
    if sigma < 0:
        raise InputError(f"sigma must be non-negative, got {sigma}")
    rng = np.random.default_rng(seed)
    a1 = np.clip(rng.normal(mu, sigma, size=(n, r)), 0.0, 1.0)
    a2 = np.clip(rng.normal(mu, sigma, size=(r, m)), 0.0, 1.0)
    return a1, a2


def compose_alpha(alpha1: Tensor, alpha2: Tensor, r: int) -> Tensor:
    """Attention matrix ``alpha1 @ alpha2 / r``."""
    if alpha1.shape[1] != r or alpha2.shape[0] != r:
        raise DimensionError(
            f"factor shapes {alpha1.shape} and {alpha2.shape} do not match rank {r}"
        )
    prod = T.matmul(alpha1, alpha2)
    return prod if r == 1 else T.scale(prod, 1.0 / r)


def coefficient_pair(alpha1: np.ndarray, alpha2: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Plain-array ``(C_W, C_W0)`` for a factor pair; no graph is recorded."""
    r = alpha1.shape[1]
    c_w = alpha1 @ alpha2
    c_w0 = (1.0 - alpha1) @ (1.0 - alpha2)
    if r != 1:
        c_w, c_w0 = c_w * (1.0 / r), c_w0 * (1.0 / r)
    return c_w, c_w0


class Linear:
    """Plain dense layer ``x @ W + b``."""

    mixup = False

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.W = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)

    @property
    def in_features(self) -> int:
        return self.W.shape[0]

    @property
    def out_features(self) -> int:
        return self.W.shape[1]

    def weight(self) -> Tensor:
        return self.W

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_bias(T.matmul(x, self.weight()), self.bias)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.W, "plain"
        yield f"{prefix}.bias", self.bias, "plain"


class MixupLinear(Linear):
    """Dense layer with attention-guided mixing of task and pretrained weights.

    ``coefficients`` (when set) replaces the factors with a frozen pair of
    coefficient matrices; this is the finetune-phase configuration.
    """

    mixup = True

    def __init__(self, w0: np.ndarray, bias: np.ndarray, rank: int = 1,
                 alpha1: Optional[np.ndarray] = None, alpha2: Optional[np.ndarray] = None,
                 weight: Optional[np.ndarray] = None):
        n, m = w0.shape
        super().__init__(w0 if weight is None else weight, bias)
        if self.W.shape != (n, m):
            raise DimensionError(f"task weight {self.W.shape} vs pretrained {w0.shape}")
        self.W0 = Tensor(np.array(w0, dtype=np.float64))
        self.rank = int(rank)
        if alpha1 is None:
            alpha1, alpha2 = np.ones((n, rank)), np.ones((rank, m))
        self.alpha1 = Tensor(alpha1, requires_grad=True)
        self.alpha2 = Tensor(alpha2, requires_grad=True)
        if self.alpha1.shape != (n, rank) or self.alpha2.shape != (rank, m):
            raise DimensionError(
                f"factors {self.alpha1.shape}, {self.alpha2.shape} do not fit {n}x{m} at rank {rank}"
            )
        self.coefficients: Optional[Tuple[Tensor, Tensor]] = None

    def freeze_coefficients(self, c_w: np.ndarray, c_w0: np.ndarray) -> None:
        if c_w.shape != self.W.shape or c_w0.shape != self.W.shape:
            raise DimensionError(f"coefficients {c_w.shape}/{c_w0.shape} vs weight {self.W.shape}")
        self.coefficients = (Tensor(c_w), Tensor(c_w0))

    def coefficient_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.coefficients is not None:
            return self.coefficients[0].data.copy(), self.coefficients[1].data.copy()
        return coefficient_pair(self.alpha1.data, self.alpha2.data)

    def clip_alpha(self) -> int:
        """Project both factors onto [0, 1]; returns how many entries moved."""
        moved = 0
        for a in (self.alpha1, self.alpha2):
            outside = (a.data < 0.0) | (a.data > 1.0)
            moved += int(outside.sum())
            np.clip(a.data, 0.0, 1.0, out=a.data)
        return moved

    def weight(self) -> Tensor:
        return mix_weights(self)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.W, "task"
        yield f"{prefix}.bias", self.bias, "plain"
        yield f"{prefix}.pretrained", self.W0, "frozen"
        if self.coefficients is None:
            yield f"{prefix}.alpha1", self.alpha1, "alpha"
            yield f"{prefix}.alpha2", self.alpha2, "alpha"


def mix_weights(layer: MixupLinear) -> Tensor:
    """The resultant weight of a mixup layer, differentiable in W and the factors."""
    if layer.coefficients is not None:
        c_w, c_w0 = layer.coefficients
        return T.add(T.mul(c_w, layer.W), T.mul(c_w0, layer.W0))
    c_w = compose_alpha(layer.alpha1, layer.alpha2, layer.rank)
    c_w0 = compose_alpha(T.one_minus(layer.alpha1), T.one_minus(layer.alpha2), layer.rank)
    return T.add(T.mul(c_w, layer.W), T.mul(c_w0, layer.W0))


@dataclass(frozen=True)
class TaskKind:
    """``classification`` with ``num_classes`` outputs, or scalar ``regression``."""

    kind: str = "classification"
    num_classes: int = 2

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise InputError(f"unknown task kind {self.kind!r}")

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.kind == "classification" else 1

    @classmethod
    def parse(cls, text: str) -> "TaskKind":
        if text == "regression":
            return cls("regression", 1)
        if text.startswith("classification"):
            n = text[len("classification"):].strip("()") or "2"
            return cls("classification", int(n))
        raise InputError(f"cannot parse task kind {text!r}")

    def __str__(self):
        return "regression" if self.kind == "regression" else f"classification({self.num_classes})"


class Network:
    """Hidden layers with a shared activation, then a plain output head."""

    def __init__(self, hidden: List[Linear], head: Linear, task: TaskKind, act: str = "tanh"):
        if head.mixup:
            raise InputError("the output head cannot be a mixup layer")
        if head.out_features != task.out_dim:
            raise DimensionError(f"head width {head.out_features} vs task output {task.out_dim}")
        self.hidden = list(hidden)
        self.head = head
        self.task = task
        self.act = act

    @property
    def in_features(self) -> int:
        return (self.hidden[0] if self.hidden else self.head).in_features

    @property
    def widths(self) -> List[int]:
        return [self.in_features] + [layer.out_features for layer in self.hidden]

    @property
    def mixup_layers(self) -> List[MixupLinear]:
        return [layer for layer in self.hidden if layer.mixup]

    def layer_names(self) -> List[str]:
        return [f"layer{i}" for i in range(len(self.hidden))]

    def named_parameters(self):
        """Yield ``(name, tensor, role)`` for every parameter."""
        for name, layer in zip(self.layer_names(), self.hidden):
            yield from layer.named_parameters(name)
        yield from self.head.named_parameters("head")

    def parameters(self, *roles: str) -> Dict[str, Tensor]:
        bad = set(roles) - set(ROLES)
        if bad:
            raise InputError(f"unknown parameter roles {sorted(bad)}")
        return {n: t for n, t, r in self.named_parameters() if r in roles}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t, _ in self.named_parameters()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        params = {n: t for n, t, _ in self.named_parameters()}
        for name, arr in state.items():
            if name not in params:
                raise InputError(f"unknown parameter {name!r}")
            if params[name].shape != arr.shape:
                raise DimensionError(f"{name}: {arr.shape} vs {params[name].shape}")
            params[name].data = np.array(arr, dtype=np.float64)

    def zero_grad(self) -> None:
        for _, t, _ in self.named_parameters():
            t.grad = None

    def __call__(self, x) -> Tensor:
        return forward(self, x)


def forward(net: Network, batch) -> Tensor:
    """Logits (B x C) or predictions (B,) for a batch of feature rows."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 2 or x.shape[1] != net.in_features:
        raise DimensionError(f"batch shape {x.shape} vs network input width {net.in_features}")
    for layer in net.hidden:
        x = T.activation(layer(x), net.act)
    out = net.head(x)
    if net.task.kind == "regression":
        out = _flatten_col(out)
    return out


def _flatten_col(x: Tensor) -> Tensor:
    return T._node(x.data.reshape(-1), (x,), lambda g: (g.reshape(-1, 1),), "flatten")


def task_loss(net: Network, out: Tensor, targets) -> Tensor:
    if net.task.kind == "classification":
        return T.loss_ce(out, targets)
    return T.loss_mse(out, targets)


def predict(net: Network, features: np.ndarray) -> np.ndarray:
    """Class indices for classification, real values for regression."""
    out = forward(net, features).data
    if net.task.kind == "classification":
        return out.argmax(axis=1)
    return out


def init_head(in_dim: int, out_dim: int, seed: int) -> Linear:
    rng = np.random.default_rng(seed)
    return Linear(rng.normal(0.0, HEAD_INIT_STD, size=(in_dim, out_dim)), np.zeros(out_dim))


def init_network(widths: List[int], task: TaskKind, seed: int, act: str = "tanh") -> Network:
    """Freshly initialized plain network (Glorot-uniform hidden layers)."""
    rng = np.random.default_rng(seed)
    hidden = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        hidden.append(Linear(rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
    head = init_head(widths[-1], task.out_dim, int(rng.integers(2**31)))
    return Network(hidden, head, task, act)


def pretrained_hidden(state: Dict[str, np.ndarray]) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(weight, bias) pairs of the hidden layers stored in a pretrained state."""
    layers, i = [], 0
    while f"layer{i}.weight" in state:
        layers.append((state[f"layer{i}.weight"], state[f"layer{i}.bias"]))
        i += 1
    if not layers:
        raise InputError("pretrained state holds no hidden layers")
    return layers


def build_downstream(pretrained: Dict[str, np.ndarray], task: TaskKind, seed: int,
                     mixup: bool = True, rank: int = 1, alpha_mu: float = 1.0,
                     alpha_sigma: float = 0.005, act: str = "tanh") -> Network:
    """Network for a downstream task: hidden layers from ``pretrained``, fresh head.

    With ``mixup`` the hidden layers become :class:`MixupLinear` with task
    weights starting at the pretrained values and factors from
    :func:`init_alpha`; otherwise they are plain copies (vanilla finetuning).
    The head seed and the factor seeds are derived from ``seed``.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    hidden: List[Linear] = []
    for w0, b in pretrained_hidden(pretrained):
        if mixup:
            a1, a2 = init_alpha(w0.shape[0], w0.shape[1], rank, alpha_mu, alpha_sigma,
                                seed=int(rng.integers(2**31)))
            hidden.append(MixupLinear(w0, b, rank, a1, a2))
        else:
            rng.integers(2**31)  # keep head seeds aligned with the mixup path
            hidden.append(Linear(w0, b))
    head = init_head(hidden[-1].out_features, task.out_dim, int(rng.integers(2**31)))
    return Network(hidden, head, task, act)
