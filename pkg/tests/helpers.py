import numpy as np

from attnmix.model import Linear, MixupLinear, Network, TaskKind


def central_diff(fn, t, h=1e-5):
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. every entry of ``t``."""
    grad = np.zeros_like(t.data)
    for idx in np.ndindex(t.shape):
        orig = t.data[idx]
        t.data[idx] = orig + h
        up = fn().item()
        t.data[idx] = orig - h
        down = fn().item()
        t.data[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def grad_mismatch(analytic, numeric, rel=1e-4, small=1e-3, abs_tol=1e-6):
    """Entries violating: rel err <= rel, or abs err <= abs_tol where |numeric| < small."""
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = np.where(scale < small, err <= abs_tol, err <= rel * scale)
    return np.argwhere(~ok)


def random_mixup_net(rng, widths, out_dim=2, rank=1, act="tanh", task=None):
    """Mixup hidden layers with random factors in (0, 1) and a random head."""
    task = task or TaskKind("classification", out_dim)
    hidden = []
    for n, m in zip(widths[:-1], widths[1:]):
        hidden.append(MixupLinear(
            rng.normal(size=(n, m)), rng.normal(size=m) * 0.1, rank,
            rng.uniform(0.05, 0.95, size=(n, rank)), rng.uniform(0.05, 0.95, size=(rank, m)),
            weight=rng.normal(size=(n, m)),
        ))
    head = Linear(rng.normal(size=(widths[-1], task.out_dim)), rng.normal(size=task.out_dim) * 0.1)
    return Network(hidden, head, task, act)


def param_count(net):
    return sum(t.size for _, t, role in net.named_parameters() if role != "frozen")
