"""Datasets, seeded splits, batching and the synthetic transfer benchmark."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Tuple

import numpy as np

from .errors import ConfigError, InputError
from .model import TaskKind


@dataclass
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    task: TaskKind
    name: str = "dataset"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.task.kind == "classification":
            self.targets = np.asarray(self.targets, dtype=np.int64)
        else:
            self.targets = np.asarray(self.targets, dtype=np.float64)
        n = self.features.shape[0]
        if self.features.ndim != 2 or n < 1:
            raise InputError(f"features must be a non-empty n x D array, got {self.features.shape}")
        if self.targets.shape != (n,):
            raise InputError(f"{n} feature rows but targets of shape {self.targets.shape}")
        if not np.isfinite(self.features).all():
            raise InputError("feature rows must be finite")
        if self.task.kind == "classification" and (
            self.targets.min() < 0 or self.targets.max() >= self.task.num_classes
        ):
            raise InputError(f"class indices must lie in [0, {self.task.num_classes})")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, indices, name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.targets[idx], self.task, name or self.name)


@dataclass(frozen=True)
class SplitPair:
    train_indices: np.ndarray
    val_indices: np.ndarray


def _round_half_up(x: float) -> int:
    # 1e-9 absorbs representation error such as (1 - 0.8) * 10 = 1.9999999999999996
    return int(math.floor(x + 0.5 + 1e-9))


def split_dataset(ds: Dataset, ratio: float, seed: int) -> SplitPair:
    """Seeded split into a ``ratio`` train part and the remaining validation part."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    n = len(ds)
    if n < 2:
        raise ConfigError(f"need at least 2 examples to split, got {n}")
    n_val = min(n - 1, max(1, _round_half_up((1.0 - ratio) * n)))
    perm = np.random.default_rng(seed).permutation(n)
    return SplitPair(train_indices=perm[n_val:], val_indices=perm[:n_val])


def subsample(ds: Dataset, n: int, seed: int) -> Dataset:
    """First ``n`` rows of a seeded permutation."""
    if n > len(ds):
        raise InputError(f"cannot draw {n} examples from a dataset of {len(ds)}")
    if n < 1:
        raise InputError(f"subsample size must be positive, got {n}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return ds.take(perm[:n], name=f"{ds.name}[{n}]")


class BatchCycler:
    """Endless minibatches, reshuffled at every epoch from a derived seed."""

    def __init__(self, ds: Dataset, batch_size: int, seed):
        if batch_size < 1:
            raise ConfigError(f"batch size must be positive, got {batch_size}")
        self.ds = ds
        self.batch_size = min(batch_size, len(ds))
        self.entropy = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
        self.epoch = 0
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def __iter__(self):
        return self

    def __next__(self) -> Tuple[np.ndarray, np.ndarray]:
        if self._pos >= len(self._order):
            self._order = np.random.default_rng([*self.entropy, self.epoch]).permutation(len(self.ds))
            self.epoch += 1
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.ds.features[idx], self.ds.targets[idx]

    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.ds) / self.batch_size)


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """A source task and a rotated, noisier downstream task sharing one teacher.

    ``target_n`` is the size of the downstream training pool that low-resource
    training sets are subsampled from.
    """

    input_dim: int = 20
    source_n: int = 20000
    target_n: int = 2000
    test_n: int = 5000
    teacher_hidden: int = 8
    shift_angle: float = 0.3
    label_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.label_noise < 0.5:
            raise ConfigError(f"label_noise must lie in [0, 0.5), got {self.label_noise}")
        if self.input_dim < 2:
            raise ConfigError("input_dim must be at least 2 to define a rotation plane")
        if min(self.source_n, self.target_n, self.test_n, self.teacher_hidden) < 1:
            raise ConfigError("dataset sizes and teacher width must be positive")


_BALANCE_PROBE = 4000
_MAX_TEACHER_TRIES = 100


def _draw_teacher(spec: SyntheticTaskSpec, rng: np.random.Generator):
    d, h = spec.input_dim, spec.teacher_hidden
    probe = rng.standard_normal((_BALANCE_PROBE, d))
    for _ in range(_MAX_TEACHER_TRIES):
        w1 = rng.standard_normal((d, h)) * (2.0 / math.sqrt(d))
        b1 = rng.standard_normal(h) * 0.5
        w2 = rng.standard_normal(h) / math.sqrt(h)

        def teacher(x, w1=w1, b1=b1, w2=w2):
            return (np.tanh(x @ w1 + b1) @ w2 > 0.0).astype(np.int64)

        if 0.35 <= teacher(probe).mean() <= 0.65:
            return teacher
    raise ConfigError("could not draw a class-balanced teacher")


def rotation_in_plane(dim: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix rotating by ``angle`` inside a random 2-plane."""
    q, _ = np.linalg.qr(rng.standard_normal((dim, 2)))
    u, v = q[:, 0], q[:, 1]
    c, s = math.cos(angle), math.sin(angle)
    return (np.eye(dim) + (c - 1.0) * (np.outer(u, u) + np.outer(v, v))
            + s * (np.outer(v, u) - np.outer(u, v)))


def make_synthetic_transfer(spec: SyntheticTaskSpec) -> Tuple[Dataset, Dataset, Dataset]:
    """``(source, target, test)`` datasets for a binary transfer task.

    Labels come from one random tanh teacher applied to the raw Gaussian
    input. Downstream (target and test) rows are presented after a fixed
    in-plane rotation, so the downstream concept is the teacher composed with
    the inverse rotation. Only target labels receive flip noise.
    """
    rng = np.random.default_rng(spec.seed)
    teacher = _draw_teacher(spec, rng)
    rot = rotation_in_plane(spec.input_dim, spec.shift_angle, rng)
    task = TaskKind("classification", 2)

    xs = rng.standard_normal((spec.source_n, spec.input_dim))
    source = Dataset(xs, teacher(xs), task, "source")

    xt = rng.standard_normal((spec.target_n, spec.input_dim))
    yt = teacher(xt)
    flips = rng.random(spec.target_n) < spec.label_noise
    yt = np.where(flips, 1 - yt, yt)
    target = Dataset(xt @ rot.T, yt, task, "target")

    xe = rng.standard_normal((spec.test_n, spec.input_dim))
    test = Dataset(xe @ rot.T, teacher(xe), task, "test")
    return source, target, test


def synthetic_spec_with(spec: SyntheticTaskSpec, **changes) -> SyntheticTaskSpec:
    return replace(spec, **changes)


def load_csv(path, task: TaskKind, name: str | None = None) -> Dataset:
    """Read ``f0..f{D-1},label`` rows; any empty field is rejected."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        d = len(header) - 1
        expected = [f"f{i}" for i in range(d)] + ["label"]
        if header != expected:
            raise InputError(f"{path}: header must be f0..f{d - 1},label")
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 1 or any(cell.strip() == "" for cell in row):
                raise InputError(f"{path}:{lineno}: missing value")
            try:
                feats.append([float(c) for c in row[:-1]])
                labels.append(float(row[-1]))
            except ValueError:
                raise InputError(f"{path}:{lineno}: non-numeric value") from None
    if not feats:
        raise InputError(f"{path}: no data rows")
    labels = np.asarray(labels)
    if task.kind == "classification":
        if not np.all(labels == np.round(labels)):
            raise InputError(f"{path}: classification labels must be integers")
        labels = labels.astype(np.int64)
    return Dataset(np.asarray(feats), labels, task, name or path.stem)


def save_csv(ds: Dataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(ds.dim)] + ["label"])
        for x, y in zip(ds.features, ds.targets):
            writer.writerow([repr(float(v)) for v in x] + [int(y) if ds.task.kind == "classification" else repr(float(y))])
