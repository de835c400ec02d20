"""Bi-level search for attention factors, and the frozen-coefficient finetune.

One search iteration is

1. a stage-I AdamW step on task weights, biases and head, using a batch from
   the BLO train split, with the factors held fixed;
2. a stage-II AdamW step on the factors, driven by the hypergradient

       grad_a L_val(W', a) - eta_w * (grad_a L_tr(W+, a) - grad_a L_tr(W-, a)) / (2 eps)

   where ``W' `` are the weights after step 1, ``W+- = W_pre +- eps * v``,
   ``v = grad_W' L_val`` and ``eps = 0.01 / ||v||``. The factors are then
   projected back onto [0, 1].

Weight decay on both levels is the decoupled AdamW decay.
"""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .data import BatchCycler, Dataset, split_dataset
from .errors import ConfigError
from .model import Network, build_downstream, coefficient_pair, forward, task_loss
from .optim import AdamWState, LrSchedule, adamw_step, grads_of
from .tensor import Tensor

log = logging.getLogger(__name__)

STEP_LOG_HEADER = "step,stage,loss,epsilon,alpha_mean,alpha_min,alpha_max"

Coefficients = Dict[str, Tuple[np.ndarray, np.ndarray]]


@dataclass
class SearchConfig:
    eta_w: float = 2e-5
    eta_alpha: float = 2e-3
    lambda1: float = 0.01
    lambda2: float = 0.01
    warmup_ratio_w: float = 0.1
    warmup_ratio_alpha: float = 0.1
    total_steps: int = 100
    batch_size: int = 16
    split_ratio: float = 0.8
    K: int = 1
    rank: int = 1
    seed: int = 0
    alpha_mu: float = 1.0
    alpha_sigma: float = 0.005
    fd_radius: float = 0.01
    average: str = "coefficients"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError(f"split_ratio must lie in (0, 1), got {self.split_ratio}")
        if self.K < 1:
            raise ConfigError(f"K must be at least 1, got {self.K}")
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be non-negative, got {self.total_steps}")
        if self.rank < 1 or self.batch_size < 1:
            raise ConfigError("rank and batch_size must be positive")
        for name in ("warmup_ratio_w", "warmup_ratio_alpha"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.average not in ("coefficients", "factors"):
            raise ConfigError(f"average must be 'coefficients' or 'factors', got {self.average!r}")


@contextlib.contextmanager
def _no_grad(tensors: Iterable[Tensor]):
    tensors = list(tensors)
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in zip(tensors, saved):
            t.requires_grad = flag


def batch_loss(net: Network, batch) -> Tensor:
    x, y = batch
    return task_loss(net, forward(net, x), y)


def weight_params(net: Network) -> Dict[str, Tensor]:
    """Everything stage I and the finetune phase update."""
    return net.parameters("task", "plain")


def mixup_weights(net: Network) -> Dict[str, Tensor]:
    return net.parameters("task")


def alpha_params(net: Network) -> Dict[str, Tensor]:
    return net.parameters("alpha")


def alpha_stats(net: Network) -> Tuple[float, float, float]:
    alphas = [a.data.reshape(-1) for a in alpha_params(net).values()]
    if not alphas:
        return math.nan, math.nan, math.nan
    flat = np.concatenate(alphas)
    return float(flat.mean()), float(flat.min()), float(flat.max())


def stage1_step(net: Network, batch, state_w: AdamWState, lr_t: float):
    """Stage-I update of the weights with the factors held fixed.

    Returns ``(loss, w_pre)`` where ``w_pre`` maps each mixup task weight to
    its value before the update.
    """
    params = weight_params(net)
    net.zero_grad()
    with _no_grad(alpha_params(net).values()):
        loss = batch_loss(net, batch)
        T.backward(loss)
    w_pre = {n: t.data for n, t in mixup_weights(net).items()}
    adamw_step(params, grads_of(params), state_w, lr_t)
    return loss.item(), w_pre


def compute_epsilon(val_grads: Iterable[np.ndarray], radius: float = 0.01) -> Optional[float]:
    """``radius / ||g||`` over all gradients concatenated; None when the norm vanishes."""
    sq = sum(float(np.sum(g * g)) for g in val_grads)
    norm = math.sqrt(sq)
    if norm < 1e-12:
        return None
    return radius / norm


@dataclass
class Hypergradient:
    grads: Dict[str, np.ndarray]
    direct: Dict[str, np.ndarray]
    val_loss: float
    epsilon: Optional[float]

    @property
    def degenerate(self) -> bool:
        return self.epsilon is None


def fd_hypergradient(alphas: Dict[str, Tensor], weights: Dict[str, Tensor],
                     w_pre: Dict[str, np.ndarray], val_loss: Callable[[], Tensor],
                     train_loss: Callable[[], Tensor], eta_w: float,
                     epsilon: Optional[float] = None, radius: float = 0.01) -> Hypergradient:
    """Finite-difference hypergradient of the validation loss w.r.t. ``alphas``.

    ``weights`` hold the post-update values ``W'`` on entry and are restored
    to them on exit. ``val_loss`` and ``train_loss`` rebuild their graph from
    the current tensor values on every call. A fixed ``epsilon`` overrides
    the norm-scaled default.
    """
    for t in (*alphas.values(), *weights.values()):
        t.grad = None
    loss = val_loss()
    T.backward(loss)
    direct = {n: (a.grad if a.grad is not None else np.zeros_like(a.data)) for n, a in alphas.items()}
    v = {n: (w.grad if w.grad is not None else np.zeros_like(w.data)) for n, w in weights.items()}
    for t in weights.values():
        t.grad = None
    if epsilon is None:
        epsilon = compute_epsilon(v.values(), radius)
    if epsilon is None or eta_w == 0.0:
        # a zero step size leaves nothing to correct
        return Hypergradient({n: g.copy() for n, g in direct.items()}, direct, loss.item(), epsilon)

    w_post = {n: w.data for n, w in weights.items()}
    side = []
    try:
        with _no_grad(weights.values()):
            for sign in (1.0, -1.0):
                for n, w in weights.items():
                    w.data = w_pre[n] + (sign * epsilon) * v[n]
                for a in alphas.values():
                    a.grad = None
                T.backward(train_loss())
                side.append({n: (a.grad if a.grad is not None else np.zeros_like(a.data))
                             for n, a in alphas.items()})
    finally:
        for n, w in weights.items():
            w.data = w_post[n]
        for a in alphas.values():
            a.grad = None
    plus, minus = side
    scale = eta_w / (2.0 * epsilon)
    grads = {n: direct[n] - scale * (plus[n] - minus[n]) for n in alphas}
    return Hypergradient(grads, direct, loss.item(), epsilon)


@dataclass
class Stage2Result:
    loss: float
    epsilon: Optional[float]
    skipped: bool
    projected: int = 0


def stage2_step(net: Network, batch_val, batch_tr, w_pre: Dict[str, np.ndarray],
                state_alpha: AdamWState, eta_w: float, lr_alpha: float,
                radius: float = 0.01) -> Stage2Result:
    """Stage-II update of the attention factors, then projection onto [0, 1].

    A vanishing validation gradient leaves the factors untouched.
    """
    alphas = alpha_params(net)
    hg = fd_hypergradient(
        alphas, mixup_weights(net), w_pre,
        val_loss=lambda: batch_loss(net, batch_val),
        train_loss=lambda: batch_loss(net, batch_tr),
        eta_w=eta_w, radius=radius,
    )
    net.zero_grad()
    if hg.degenerate:
        log.info("zero validation gradient; alpha step skipped")
        return Stage2Result(hg.val_loss, None, True)
    adamw_step(alphas, hg.grads, state_alpha, lr_alpha)
    projected = sum(layer.clip_alpha() for layer in net.mixup_layers)
    return Stage2Result(hg.val_loss, hg.epsilon, False, projected)


class StepLog:
    """Append-only per-step scalar log in CSV form."""

    def __init__(self, path=None):
        self.rows: List[str] = []
        self._fh = None
        if path is not None:
            self._fh = open(path, "a", encoding="utf-8")
            if self._fh.tell() == 0:
                self._fh.write(STEP_LOG_HEADER + "\n")

    def write(self, step: int, stage: str, loss: float, epsilon: Optional[float],
              stats: Tuple[float, float, float]) -> None:
        eps = "" if epsilon is None else repr(float(epsilon))
        row = ",".join([str(step), stage, repr(float(loss)), eps] + [repr(float(s)) for s in stats])
        self.rows.append(row)
        if self._fh is not None:
            self._fh.write(row + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class SearchResult:
    coefficients: Coefficients
    factors: Dict[str, Tuple[np.ndarray, np.ndarray]]
    state: Dict[str, np.ndarray]
    val_losses: List[float] = field(default_factory=list)
    skipped: int = 0
    projected: int = 0
    alpha_entries: int = 0

    @property
    def violation_rate(self) -> float:
        steps = len(self.val_losses) - self.skipped
        if not steps or not self.alpha_entries:
            return 0.0
        return self.projected / (steps * self.alpha_entries)


def current_coefficients(net: Network) -> Coefficients:
    return {name: layer.coefficient_arrays()
            for name, layer in zip(net.layer_names(), net.hidden) if layer.mixup}


def search_phase(net: Network, d_btr: Dataset, d_bval: Dataset, config: SearchConfig,
                 step_log: Optional[StepLog] = None,
                 on_step: Optional[Callable[[int, Network], None]] = None) -> SearchResult:
    """Alternate stage-I and stage-II steps for ``config.total_steps`` iterations."""
    if len(d_btr) == 0 or len(d_bval) == 0:
        raise ConfigError("search needs non-empty train and validation splits")
    if not net.mixup_layers:
        raise ConfigError("search needs at least one mixup layer")
    n = config.total_steps
    sched_w = LrSchedule.from_ratio(config.eta_w, config.warmup_ratio_w, n)
    sched_a = LrSchedule.from_ratio(config.eta_alpha, config.warmup_ratio_alpha, n)
    state_w = AdamWState(weight_decay=config.lambda1)
    state_a = AdamWState(weight_decay=config.lambda2)
    tr_batches = BatchCycler(d_btr, config.batch_size, (config.seed, 0))
    val_batches = BatchCycler(d_bval, config.batch_size, (config.seed, 1))
    result = SearchResult({}, {}, {},
                          alpha_entries=sum(a.size for a in alpha_params(net).values()))
    for t in range(n):
        batch_tr = next(tr_batches)
        eta_w = sched_w(t)
        loss_tr, w_pre = stage1_step(net, batch_tr, state_w, eta_w)
        if step_log is not None:
            step_log.write(t, "w", loss_tr, None, alpha_stats(net))
        s2 = stage2_step(net, next(val_batches), batch_tr, w_pre, state_a, eta_w, sched_a(t),
                         config.fd_radius)
        result.val_losses.append(s2.loss)
        result.skipped += s2.skipped
        result.projected += s2.projected
        if step_log is not None:
            step_log.write(t, "alpha", s2.loss, s2.epsilon, alpha_stats(net))
        if on_step is not None:
            on_step(t, net)
    result.coefficients = current_coefficients(net)
    result.factors = {name: (layer.alpha1.data.copy(), layer.alpha2.data.copy())
                      for name, layer in zip(net.layer_names(), net.hidden) if layer.mixup}
    result.state = net.state_dict()
    if result.projected:
        log.debug("projection touched %.3g of alpha entries per step", result.violation_rate)
    return result


def average_coefficients(results: List[SearchResult], mode: str = "coefficients") -> Coefficients:
    """Element-wise mean over replicates, in replicate order."""
    if not results:
        raise ConfigError("nothing to average")
    names = list(results[0].coefficients)
    out = {}
    for name in names:
        if mode == "factors":
            a1 = sum(r.factors[name][0] for r in results) / len(results)
            a2 = sum(r.factors[name][1] for r in results) / len(results)
            out[name] = coefficient_pair(a1, a2)
        else:
            c_w = sum(r.coefficients[name][0] for r in results) / len(results)
            c_w0 = sum(r.coefficients[name][1] for r in results) / len(results)
            out[name] = (c_w, c_w0)
    return out


def replicate_config(config: SearchConfig, k: int) -> SearchConfig:
    fields = dict(config.__dict__)
    fields["seed"] = config.seed + k
    return SearchConfig(**fields)


def run_replicate(d_tr: Dataset, pretrained: Dict[str, np.ndarray], config: SearchConfig,
                  act: str = "tanh", step_log: Optional[StepLog] = None):
    """One search on a fresh network and a fresh split seeded by ``config.seed``."""
    split = split_dataset(d_tr, config.split_ratio, config.seed)
    net = build_downstream(pretrained, d_tr.task, config.seed, mixup=True, rank=config.rank,
                           alpha_mu=config.alpha_mu, alpha_sigma=config.alpha_sigma, act=act)
    d_btr = d_tr.take(split.train_indices, "B-tr")
    d_bval = d_tr.take(split.val_indices, "B-val")
    return search_phase(net, d_btr, d_bval, config, step_log=step_log), split


def k_replicate_search(d_tr: Dataset, pretrained: Dict[str, np.ndarray], config: SearchConfig,
                       act: str = "tanh",
                       step_log_for: Optional[Callable[[int], Optional[StepLog]]] = None,
                       search_fn=None):
    """Average the learned coefficients of ``config.K`` independent searches.

    Replicate ``k`` uses seed ``config.seed + k`` for its split, head, factor
    initialization and batch order. Returns ``(coefficients, results, splits)``.
    """
    search_fn = search_fn or run_replicate
    results, splits = [], []
    for k in range(config.K):
        step_log = step_log_for(k) if step_log_for is not None else None
        res, split = search_fn(d_tr, pretrained, replicate_config(config, k), act=act,
                               step_log=step_log)
        results.append(res)
        splits.append(split)
    return average_coefficients(results, config.average), results, splits


def train_steps(net: Network, batches: BatchCycler, schedule: LrSchedule, state: AdamWState,
                steps: int, on_step: Optional[Callable[[int, Network], None]] = None,
                extra: Optional[Callable[[int], None]] = None) -> List[float]:
    """Plain AdamW training on every weight parameter; returns batch losses."""
    params = weight_params(net)
    losses = []
    for t in range(steps):
        net.zero_grad()
        with _no_grad(alpha_params(net).values()):
            loss = batch_loss(net, next(batches))
            T.backward(loss)
        adamw_step(params, grads_of(params), state, schedule(t))
        losses.append(loss.item())
        if on_step is not None:
            on_step(t, net)
    return losses


def finetune_steps(n: int, batch_size: int, epochs: int) -> int:
    return epochs * math.ceil(n / min(batch_size, n))


def finetune_phase(net: Network, d_tr: Dataset, coefficients: Optional[Coefficients], epochs: int,
                   lr: float, config: SearchConfig, seed: int,
                   on_step: Optional[Callable[[int, Network], None]] = None) -> Network:
    """Train weights, biases and head on ``d_tr`` with frozen mixing coefficients.

    ``coefficients=None`` trains whatever the network holds; on a plain
    network that is vanilla finetuning.
    """
    if coefficients is not None:
        for name, layer in zip(net.layer_names(), net.hidden):
            if layer.mixup:
                layer.freeze_coefficients(*coefficients[name])
    steps = finetune_steps(len(d_tr), config.batch_size, epochs)
    schedule = LrSchedule.from_ratio(lr, config.warmup_ratio_w, steps)
    state = AdamWState(weight_decay=config.lambda1)
    batches = BatchCycler(d_tr, config.batch_size, (seed, 2))
    train_steps(net, batches, schedule, state, steps, on_step=on_step)
    return net


def joint_train(net: Network, d_tr: Dataset, epochs: int, lr: float, config: SearchConfig,
                seed: int, on_step: Optional[Callable[[int, Network], None]] = None) -> Network:
    """Single-level baseline: weights and factors descend the same training loss."""
    steps = finetune_steps(len(d_tr), config.batch_size, epochs)
    sched_w = LrSchedule.from_ratio(lr, config.warmup_ratio_w, steps)
    sched_a = LrSchedule.from_ratio(config.eta_alpha, config.warmup_ratio_alpha, steps)
    state_w = AdamWState(weight_decay=config.lambda1)
    state_a = AdamWState(weight_decay=config.lambda2)
    batches = BatchCycler(d_tr, config.batch_size, (seed, 2))
    params, alphas = weight_params(net), alpha_params(net)
    for t in range(steps):
        net.zero_grad()
        T.backward(batch_loss(net, next(batches)))
        adamw_step(params, grads_of(params), state_w, sched_w(t))
        adamw_step(alphas, grads_of(alphas), state_a, sched_a(t))
        for layer in net.mixup_layers:
            layer.clip_alpha()
        if on_step is not None:
            on_step(t, net)
    return net
