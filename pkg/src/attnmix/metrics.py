"""Evaluation metrics: accuracy, F1, MCC, Spearman and Pearson."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata

from .errors import InputError

METRICS = ("accuracy", "f1", "mcc", "spearman", "pearson")


def _pair(pred, target):
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape or pred.ndim != 1:
        raise InputError(f"length mismatch: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise InputError("metrics need at least one example")
    return pred, target


def accuracy(pred, target) -> float:
    pred, target = _pair(pred, target)
    return float(np.mean(pred == target))


def f1(pred, target, positive: int = 1) -> float:
    """Binary F1 for the ``positive`` class; 0 when it is never predicted nor present."""
    pred, target = _pair(pred, target)
    tp = int(np.sum((pred == positive) & (target == positive)))
    fp = int(np.sum((pred == positive) & (target != positive)))
    fn = int(np.sum((pred != positive) & (target == positive)))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def mcc(pred, target) -> float:
    """Matthews correlation (multi-class form); 0 if any denominator factor is 0."""
    pred, target = _pair(pred, target)
    classes = np.union1d(pred, target)
    p = np.searchsorted(classes, pred)
    t = np.searchsorted(classes, target)
    k = classes.size
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (t, p), 1)
    n = int(conf.sum())
    correct = int(np.trace(conf))
    pred_tot = conf.sum(axis=0)
    true_tot = conf.sum(axis=1)
    cov = correct * n - int(pred_tot @ true_tot)
    var_p = n * n - int(pred_tot @ pred_tot)
    var_t = n * n - int(true_tot @ true_tot)
    if var_p == 0 or var_t == 0:
        return 0.0
    return cov / math.sqrt(var_p * var_t)


def pearson(pred, target) -> float:
    """Pearson correlation; 0 when either side is constant."""
    pred, target = _pair(pred, target)
    x = pred.astype(np.float64) - np.mean(pred)
    y = target.astype(np.float64) - np.mean(target)
    sxx, syy = float(x @ x), float(y @ y)
    if sxx == 0.0 or syy == 0.0:
        return 0.0
    return float(x @ y) / math.sqrt(sxx * syy)


def spearman(pred, target) -> float:
    """Spearman rank correlation with average ranks for ties."""
    pred, target = _pair(pred, target)
    return pearson(rankdata(pred), rankdata(target))


_FUNCS = {"accuracy": accuracy, "f1": f1, "mcc": mcc, "spearman": spearman, "pearson": pearson}


def metric(pred, target, kind: str) -> float:
    try:
        fn = _FUNCS[kind]
    except KeyError:
        raise InputError(f"unknown metric {kind!r}; choose from {METRICS}") from None
    return fn(pred, target)
