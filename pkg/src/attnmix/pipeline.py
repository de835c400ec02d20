"""Experiment orchestration: pretrain, search, finetune, baselines and reports."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .blo import (
    Coefficients, SearchConfig, StepLog, current_coefficients, finetune_phase, finetune_steps,
    joint_train, k_replicate_search,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Dataset, load_csv, make_synthetic_transfer, split_dataset, subsample
from .errors import ConfigError, InputError
from .metrics import metric as compute_metric
from .model import Network, TaskKind, build_downstream, init_network, predict

log = logging.getLogger(__name__)

SOUP_SIZE = 5


@dataclass
class Task:
    source: Optional[Dataset]
    pool: Dataset
    test: Dataset

    @property
    def kind(self) -> TaskKind:
        return self.pool.task


def load_task(cfg: RunConfig) -> Task:
    if cfg.data.source == "synthetic":
        return Task(*make_synthetic_transfer(cfg.synthetic))
    kind = TaskKind.parse(cfg.data.task)
    if cfg.data.train_csv is None or cfg.data.test_csv is None:
        raise ConfigError("csv data needs data.train_csv and data.test_csv")
    source = load_csv(cfg.resolve(cfg.data.source_csv), kind) if cfg.data.source_csv else None
    pool = load_csv(cfg.resolve(cfg.data.train_csv), kind, "target")
    test = load_csv(cfg.resolve(cfg.data.test_csv), kind, "test")
    return Task(source, pool, test)


def low_resource_train(cfg: RunConfig, task: Task, seed: int) -> Dataset:
    n = cfg.data.train_n or len(task.pool)
    return subsample(task.pool, n, seed)


def dataset_label(cfg: RunConfig, task: Task) -> str:
    return f"{task.pool.name}[{cfg.data.train_n or len(task.pool)}]"


def evaluate(net: Network, ds: Dataset, kind: str) -> float:
    return compute_metric(predict(net, ds.features), ds.targets, kind)


def search_config_for(cfg: RunConfig, seed: int, n_train: int) -> SearchConfig:
    """The run's search settings with ``seed`` and a budget-derived step count."""
    changes = {"seed": seed}
    if cfg.steps_ratio is not None:
        ft = finetune_steps(n_train, cfg.search.batch_size, cfg.finetune.epochs[0])
        changes["total_steps"] = max(1, int(math.floor(cfg.steps_ratio * ft + 0.5)))
    return dataclasses.replace(cfg.search, **changes)


# -- pretraining -------------------------------------------------------------

def pretrain(cfg: RunConfig, source: Dataset) -> Tuple[Dict[str, np.ndarray], float]:
    """Train a fresh plain network on ``source``; returns (state, source metric)."""
    pt = cfg.pretrain
    widths = [source.dim] + list(cfg.model.hidden)
    net = init_network(widths, source.task, pt.seed, act=cfg.model.act)
    train_cfg = SearchConfig(batch_size=pt.batch_size, warmup_ratio_w=cfg.search.warmup_ratio_w,
                             lambda1=cfg.search.lambda1)
    finetune_phase(net, source, None, pt.epochs, pt.lr, train_cfg, pt.seed)
    return net.state_dict(), evaluate(net, source, cfg.metric)


def cmd_pretrain(cfg: RunConfig) -> Path:
    task = load_task(cfg)
    if task.source is None:
        raise ConfigError("pretraining needs a source dataset")
    state, score = pretrain(cfg, task.source)
    path = cfg.checkpoint_path
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, path)
    log.info("pretrained %s: source %s = %.4f", path, cfg.metric, score)
    return path


def load_pretrained(cfg: RunConfig) -> Dict[str, np.ndarray]:
    path = cfg.checkpoint_path
    if not path.exists():
        raise ConfigError(f"pretrained checkpoint not found: {path}")
    return load_checkpoint(path)


# -- per-seed method runners ---------------------------------------------------

@dataclass
class SeedOutcome:
    seed: int
    value: Optional[float]
    timings: Dict[str, float] = field(default_factory=dict)
    state: Optional[Dict[str, np.ndarray]] = None
    coefficients: Optional[Coefficients] = None
    steps: List[List[str]] = field(default_factory=list)
    selected: Optional[Tuple[int, float]] = None


Trainer = Callable[[Dataset, int, float], Network]


def select_finetune(cfg: RunConfig, d_tr: Dataset, seed: int, trainer: Trainer) -> Tuple[int, float]:
    """Pick (epochs, lr) from the grid by the metric on the first replicate's validation split."""
    grid = [(e, lr) for e in cfg.finetune.epochs for lr in cfg.finetune.lr]
    if len(grid) == 1:
        return grid[0]
    split = split_dataset(d_tr, cfg.search.split_ratio, seed)
    d_btr, d_bval = d_tr.take(split.train_indices), d_tr.take(split.val_indices)
    best, best_score = grid[0], -math.inf
    for epochs, lr in grid:
        score = evaluate(trainer(d_btr, epochs, lr), d_bval, cfg.metric)
        if score > best_score:
            best, best_score = (epochs, lr), score
    return best


def _coef_tensors(coef: Coefficients) -> Dict[str, np.ndarray]:
    out = {}
    for name, (c_w, c_w0) in coef.items():
        out[f"{name}.c_w"] = c_w
        out[f"{name}.c_w0"] = c_w0
    return out


def coefficients_from_tensors(tensors: Dict[str, np.ndarray]) -> Coefficients:
    names = sorted({k.rsplit(".", 1)[0] for k in tensors})
    try:
        return {n: (tensors[f"{n}.c_w"], tensors[f"{n}.c_w0"]) for n in names}
    except KeyError as exc:
        raise InputError(f"coefficient file misses {exc}") from None


def run_search(cfg: RunConfig, pretrained, d_tr: Dataset, seed: int):
    scfg = search_config_for(cfg, seed, len(d_tr))
    logs: List[StepLog] = []

    def step_log_for(k):
        logs.append(StepLog())
        return logs[-1]

    coef, results, splits = k_replicate_search(d_tr, pretrained, scfg, act=cfg.model.act,
                                               step_log_for=step_log_for)
    return coef, results, [sl.rows for sl in logs]


def _seed_ours(cfg: RunConfig, pretrained, task: Task, seed: int, mode: str,
               coefficients: Optional[Coefficients] = None) -> SeedOutcome:
    d_tr = low_resource_train(cfg, task, seed)
    out = SeedOutcome(seed, None)
    results = None
    if mode in ("run", "search"):
        t0 = time.perf_counter()
        coefficients, results, out.steps = run_search(cfg, pretrained, d_tr, seed)
        out.timings["search"] = time.perf_counter() - t0
        out.coefficients = coefficients
        if mode == "search":
            return out
    if coefficients is None:
        raise ConfigError(f"seed {seed}: no learned coefficients to finetune with")
    scfg = search_config_for(cfg, seed, len(d_tr))

    def make_net():
        net = build_downstream(pretrained, task.kind, seed, mixup=True, rank=scfg.rank,
                               act=cfg.model.act)
        if not cfg.finetune.reset_w and results is not None:
            net.load_state({k: v for k, v in results[0].state.items() if ".alpha" not in k})
        return net

    def trainer(d, epochs, lr):
        return finetune_phase(make_net(), d, coefficients, epochs, lr, scfg, seed)

    t0 = time.perf_counter()
    out.selected = select_finetune(cfg, d_tr, seed, trainer)
    net = trainer(d_tr, *out.selected)
    out.timings["finetune"] = time.perf_counter() - t0
    out.value = evaluate(net, task.test, cfg.metric)
    out.state = net.state_dict()
    out.coefficients = coefficients
    return out


def soup_member_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0] >> 1)


def average_states(states: Sequence[Dict[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    """Uniform element-wise average of parameter dicts."""
    if not states:
        raise InputError("no models to average")
    names = list(states[0])
    for s in states[1:]:
        if list(s) != names or any(s[n].shape != states[0][n].shape for n in names):
            raise InputError("cannot average models with mismatched parameters")
    return {n: sum(s[n] for s in states) / len(states) for n in names}


def _seed_baseline(cfg: RunConfig, pretrained, task: Task, seed: int) -> SeedOutcome:
    d_tr = low_resource_train(cfg, task, seed)
    scfg = search_config_for(cfg, seed, len(d_tr))
    act, method = cfg.model.act, cfg.method
    out = SeedOutcome(seed, None)

    if method == "vanilla":
        def trainer(d, epochs, lr, s=seed):
            net = build_downstream(pretrained, task.kind, s, mixup=False, act=act)
            return finetune_phase(net, d, None, epochs, lr, scfg, s)
    elif method == "random_alpha":
        def trainer(d, epochs, lr):
            net = build_downstream(pretrained, task.kind, seed, mixup=True, rank=scfg.rank,
                                   alpha_sigma=cfg.baseline.sigma, act=act)
            return finetune_phase(net, d, current_coefficients(net), epochs, lr, scfg, seed)
    elif method == "joint":
        def trainer(d, epochs, lr):
            net = build_downstream(pretrained, task.kind, seed, mixup=True, rank=scfg.rank,
                                   alpha_mu=scfg.alpha_mu, alpha_sigma=scfg.alpha_sigma, act=act)
            return joint_train(net, d, epochs, lr, scfg, seed)
    elif method == "model_soup":
        def trainer(d, epochs, lr):
            states = []
            for i in range(cfg.baseline.soup_size):
                s = soup_member_seed(seed, i)
                member = build_downstream(pretrained, task.kind, s, mixup=False, act=act)
                states.append(finetune_phase(member, d, None, epochs, lr, scfg, s).state_dict())
            net = build_downstream(pretrained, task.kind, seed, mixup=False, act=act)
            net.load_state(average_states(states))
            return net
    else:
        raise ConfigError(f"{method!r} is not a baseline")

    t0 = time.perf_counter()
    out.selected = select_finetune(cfg, d_tr, seed, trainer)
    net = trainer(d_tr, *out.selected)
    out.timings["finetune"] = time.perf_counter() - t0
    out.value = evaluate(net, task.test, cfg.metric)
    out.state = net.state_dict()
    if method in ("random_alpha", "joint"):
        out.coefficients = current_coefficients(net)
    return out


def _run_one(args) -> SeedOutcome:
    cfg, pretrained, task, seed, mode, coefficients = args
    if cfg.method == "ours":
        return _seed_ours(cfg, pretrained, task, seed, mode, coefficients)
    return _seed_baseline(cfg, pretrained, task, seed)


def fan_out(cfg: RunConfig, jobs: List[tuple]) -> List[SeedOutcome]:
    """Run per-seed jobs, serially or on a bounded process pool; results keep job order."""
    if cfg.workers == 1 or len(jobs) == 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(cfg.workers, len(jobs))) as pool:
        return list(pool.map(_run_one, jobs))


# -- reports -------------------------------------------------------------------

@dataclass
class ExperimentReport:
    method: str
    dataset: str
    metric: str
    values: Dict[int, float]
    timings: Dict[int, Dict[str, float]] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.values.values())))

    @property
    def std(self) -> float:
        return float(np.std(list(self.values.values())))

    def seconds(self) -> float:
        """Mean wall-clock seconds per seed over all phases."""
        if not self.timings:
            return math.nan
        return float(np.mean([sum(t.values()) for t in self.timings.values()]))


REPORT_HEADER = ["method", "dataset", "seed", "metric", "value"]
TIMING_HEADER = ["seed", "phase", "seconds"]


def write_report(report: ExperimentReport, out_dir: Path) -> None:
    with (out_dir / "report.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for seed, value in report.values.items():
            w.writerow([report.method, report.dataset, seed, report.metric, repr(value)])
        w.writerow([report.method, report.dataset, "mean", report.metric, repr(report.mean)])
        w.writerow([report.method, report.dataset, "std", report.metric, repr(report.std)])
    with (out_dir / "timing.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMING_HEADER)
        for seed, phases in report.timings.items():
            for phase, secs in phases.items():
                w.writerow([seed, phase, f"{secs:.6f}"])


def read_report(run_dir: Path) -> ExperimentReport:
    with (run_dir / "report.csv").open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise InputError(f"{run_dir}/report.csv has no rows")
    values = {int(r["seed"]): float(r["value"]) for r in rows if r["seed"] not in ("mean", "std")}
    rep = ExperimentReport(rows[0]["method"], rows[0]["dataset"], rows[0]["metric"], values)
    timing = run_dir / "timing.csv"
    if timing.exists():
        with timing.open(newline="", encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                rep.timings.setdefault(int(r["seed"]), {})[r["phase"]] = float(r["seconds"])
    return rep


def _seed_dir(out_dir: Path, seed: int) -> Path:
    d = out_dir / f"seed_{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _persist(cfg: RunConfig, outcomes: List[SeedOutcome], out_dir: Path) -> None:
    from .blo import STEP_LOG_HEADER

    for o in outcomes:
        d = _seed_dir(out_dir, o.seed)
        if o.state is not None:
            save_checkpoint(o.state, d / "checkpoint.bin")
        if o.coefficients is not None:
            save_checkpoint(_coef_tensors(o.coefficients), d / "coefficients.bin")
        for k, rows in enumerate(o.steps):
            rd = d / f"replicate_{k}"
            rd.mkdir(exist_ok=True)
            (rd / "steps.csv").write_text("\n".join([STEP_LOG_HEADER, *rows]) + "\n", encoding="utf-8")


def _execute(cfg: RunConfig, mode: str, coefficients_dir: Optional[Path] = None) -> Tuple[List[SeedOutcome], Task]:
    cfg.validate()
    task = load_task(cfg)
    pretrained = load_pretrained(cfg)
    jobs = []
    for seed in cfg.seeds:
        coef = None
        if mode == "finetune":
            path = (coefficients_dir or cfg.out_dir) / f"seed_{seed}" / "coefficients.bin"
            if not path.exists():
                raise ConfigError(f"missing learned coefficients: {path}")
            coef = coefficients_from_tensors(load_checkpoint(path))
        jobs.append((cfg, pretrained, task, seed, mode, coef))
    outcomes = fan_out(cfg, jobs)
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    _persist(cfg, outcomes, out_dir)
    return outcomes, task


def _report(cfg: RunConfig, outcomes: List[SeedOutcome], task: Task) -> ExperimentReport:
    rep = ExperimentReport(cfg.method, dataset_label(cfg, task), cfg.metric,
                           {o.seed: o.value for o in outcomes},
                           {o.seed: o.timings for o in outcomes})
    write_report(rep, cfg.out_dir)
    return rep


def cmd_search(cfg: RunConfig) -> Dict[int, Coefficients]:
    if cfg.method != "ours":
        raise ConfigError("search applies to method 'ours' only")
    outcomes, _ = _execute(cfg, "search")
    return {o.seed: o.coefficients for o in outcomes}


def cmd_finetune(cfg: RunConfig, coefficients_dir: Optional[Path] = None) -> ExperimentReport:
    if cfg.method != "ours":
        raise ConfigError("finetune applies to method 'ours' only")
    outcomes, task = _execute(cfg, "finetune", coefficients_dir)
    return _report(cfg, outcomes, task)


def cmd_search_finetune(cfg: RunConfig) -> ExperimentReport:
    if cfg.method != "ours":
        raise ConfigError("run applies to method 'ours'; use baseline for the others")
    outcomes, task = _execute(cfg, "run")
    return _report(cfg, outcomes, task)


def cmd_baseline(cfg: RunConfig) -> ExperimentReport:
    if cfg.method == "ours":
        raise ConfigError("baseline needs a baseline method, not 'ours'")
    outcomes, task = _execute(cfg, "run")
    return _report(cfg, outcomes, task)


def cmd_report(run_dirs: Sequence[Path], out: Optional[Path] = None) -> str:
    """Aligned mean/std table over runs; also writes ``summary.csv`` into ``out``."""
    reports, missing = [], []
    for d in map(Path, run_dirs):
        if not (d / "report.csv").exists():
            missing.append(str(d))
            continue
        reports.append(read_report(d))
    for m in missing:
        log.warning("skipping %s: no report.csv", m)
    vanilla_secs = {r.dataset: r.seconds() for r in reports if r.method == "vanilla"}
    rows = []
    for r in reports:
        base = vanilla_secs.get(r.dataset)
        ratio = r.seconds() / base if base and not math.isnan(r.seconds()) else math.nan
        rows.append([r.method, r.dataset, r.metric, str(len(r.values)),
                     f"{100 * r.mean:.2f}", f"{100 * r.std:.2f}",
                     "" if math.isnan(ratio) else f"{ratio:.2f}"])
    header = ["method", "dataset", "metric", "seeds", "mean", "std", "time_ratio"]
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    widths = [max(len(x) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header, *rows]]
    if missing:
        lines.append("skipped (no report.csv): " + ", ".join(missing))
    return "\n".join(lines)
