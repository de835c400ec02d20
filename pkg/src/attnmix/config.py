"""Run configuration: one flat TOML file with dotted keys per experiment.

Example::

    method = "ours"
    seeds = [0, 1, 2]
    metric = "accuracy"
    data.source = "synthetic"
    data.train_n = 300
    synthetic.shift_angle = 0.3
    model.hidden = [64, 64]
    search.eta_alpha = 2e-3
    search.steps_ratio = 0.3
    finetune.epochs = [5]
    finetune.lr = [1e-3]
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .blo import SearchConfig
from .data import SyntheticTaskSpec
from .errors import ConfigError

METHODS = ("ours", "vanilla", "joint", "random_alpha", "model_soup")


@dataclass
class DataConfig:
    source: str = "synthetic"
    task: str = "classification(2)"
    source_csv: Optional[str] = None
    train_csv: Optional[str] = None
    test_csv: Optional[str] = None
    train_n: Optional[int] = None


@dataclass
class ModelConfig:
    hidden: List[int] = field(default_factory=lambda: [64, 64])
    act: str = "tanh"


@dataclass
class PretrainConfig:
    epochs: int = 5
    lr: float = 3e-3
    batch_size: int = 64
    seed: int = 0
    checkpoint: str = "pretrained.bin"


@dataclass
class FinetuneConfig:
    epochs: List[int] = field(default_factory=lambda: [1, 3])
    lr: List[float] = field(default_factory=lambda: [2e-5, 3e-6])
    reset_w: bool = True


@dataclass
class BaselineConfig:
    sigma: float = 0.45
    soup_size: int = 5


@dataclass
class RunConfig:
    method: str = "ours"
    seeds: List[int] = field(default_factory=lambda: [0])
    metric: str = "accuracy"
    out: str = "runs/out"
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    steps_ratio: Optional[float] = None
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    base_dir: Path = field(default_factory=Path.cwd)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative integers")
        if not self.finetune.epochs or not self.finetune.lr:
            raise ConfigError("finetune grid must be non-empty")
        if self.data.source not in ("synthetic", "csv"):
            raise ConfigError(f"data.source must be 'synthetic' or 'csv', got {self.data.source!r}")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.baseline.soup_size < 1:
            raise ConfigError("baseline.soup_size must be at least 1")
        self.search.validate()

    def resolve(self, path: Optional[str]) -> Optional[Path]:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out_dir(self) -> Path:
        return self.resolve(self.out)

    @property
    def checkpoint_path(self) -> Path:
        return self.resolve(self.pretrain.checkpoint)


_SECTIONS = {
    "data": DataConfig,
    "synthetic": SyntheticTaskSpec,
    "model": ModelConfig,
    "pretrain": PretrainConfig,
    "search": SearchConfig,
    "finetune": FinetuneConfig,
    "baseline": BaselineConfig,
}
_TOP = {"method", "seeds", "metric", "out", "workers"}


def _coerce(cls, name: str, value: Any) -> Any:
    kinds = {f.name: f.type for f in fields(cls)}
    if name not in kinds:
        raise ConfigError(f"unknown key {cls.__name__}.{name}")
    t = str(kinds[name])
    if t in ("float", "Optional[float]") and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if t.startswith("List[float]"):
        return [float(v) for v in (value if isinstance(value, list) else [value])]
    if t.startswith("List[int]"):
        return [int(v) for v in (value if isinstance(value, list) else [value])]
    return value


def from_dict(raw: Dict[str, Any], base_dir: Optional[Path] = None) -> RunConfig:
    cfg = RunConfig(base_dir=base_dir or Path.cwd())
    sections: Dict[str, Dict[str, Any]] = {name: {} for name in _SECTIONS}
    for key, value in raw.items():
        if isinstance(value, dict):
            if key not in sections:
                raise ConfigError(f"unknown section {key!r}")
            for sub, v in value.items():
                if isinstance(v, dict):
                    raise ConfigError(f"nested key {key}.{sub} is too deep")
                if key == "search" and sub == "steps_ratio":
                    cfg.steps_ratio = float(v)
                    continue
                sections[key][sub] = _coerce(_SECTIONS[key], sub, v)
        elif key in _TOP:
            setattr(cfg, key, [int(s) for s in value] if key == "seeds" else value)
        else:
            raise ConfigError(f"unknown key {key!r}")
    try:
        for name, cls in _SECTIONS.items():
            if sections[name]:
                setattr(cfg, name, cls(**sections[name]))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(raw, base_dir=path.resolve().parent)
