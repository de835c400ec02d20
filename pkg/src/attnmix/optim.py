"""AdamW with decoupled weight decay and a linear warmup/decay schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .errors import InputError, NumericError
from .tensor import Tensor


@dataclass
class LrSchedule:
    """Linear warmup to ``peak_lr`` over ``warmup_steps``, then linear decay to 0."""

    peak_lr: float
    warmup_steps: int
    total_steps: int

    @classmethod
    def from_ratio(cls, peak_lr: float, warmup_ratio: float, total_steps: int) -> "LrSchedule":
        return cls(peak_lr, int(math.floor(warmup_ratio * total_steps + 0.5)), total_steps)

    def __call__(self, t: int) -> float:
        if t < self.warmup_steps:
            return self.peak_lr * t / self.warmup_steps
        remaining = self.total_steps - t
        if remaining <= 0:
            return 0.0
        return self.peak_lr * remaining / max(1, self.total_steps - self.warmup_steps)


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray],
               state: AdamWState, lr_t: float) -> None:
    """One AdamW update of ``params``.

    Parameters missing from ``grads`` see a zero gradient (their moments
    still decay). Non-finite gradients or updates abort before anything is
    modified.
    """
    if lr_t < 0:
        raise InputError(f"learning rate must be non-negative, got {lr_t}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise InputError(f"{name}: gradient {g.shape} vs parameter {params[name].shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")

    step = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step
    staged = {}
    with np.errstate(over="ignore", invalid="ignore"):
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m = state.m.get(name)
            v = state.v.get(name)
            m = b1 * m + (1.0 - b1) * g if m is not None else (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g if v is not None else (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
            if state.weight_decay:
                update = update + state.weight_decay * p.data
            new = p.data - lr_t * update
            if not np.isfinite(new).all():
                raise NumericError(f"update of {name} overflowed (lr {lr_t:g})")
            staged[name] = (new, m, v)
    # commit only once every parameter has a finite update
    state.step_count = step
    for name, (new, m, v) in staged.items():
        params[name].data = new
        state.m[name] = m
        state.v[name] = v


def grads_of(params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    """Gradient buffers of ``params``; missing buffers read as zero."""
    return {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in params.items()}
