"""Desk-scale benchmark setups shared by scripts, the CLI and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .data import Dataset, LabeledSplit, kshot_split, mixture_splits
from .inference import GridSearchResult, InterpolationSetting, evaluate_heads, grid_search
from .model import DHO, SHO, StudentModel, build_model
from .seeding import rng_for
from .teacher import OracleTeacherConfig, TeacherPredictions, calibrate_corruption, oracle_teacher_predict
from .trainer import TrainConfig, TrainReport, linear_probe, train


@dataclass
class BenchmarkSpec:
    num_classes: int = 4
    input_dim: int = 16
    separation: float = 5.0
    noise: float = 1.0
    shots: int = 2
    n_train: int = 100  # per class
    n_val: int = 50
    n_test: int = 200
    teacher_accuracy: float = 0.70
    teacher_noise: float = 0.0


CONFLICT_BENCHMARK = BenchmarkSpec()


@dataclass
class BenchmarkData:
    spec: BenchmarkSpec
    means: np.ndarray
    train: Dataset  # full labels; split decides what training sees
    val: Dataset
    test: Dataset
    split: LabeledSplit
    teacher: TeacherPredictions


def make_benchmark(spec: BenchmarkSpec, seed: int, zeta: float = 0.01) -> BenchmarkData:
    m = mixture_splits(spec.num_classes, spec.input_dim, spec.separation, spec.noise, seed,
                       spec.n_train, spec.n_val, spec.n_test)
    split = kshot_split(m.train, spec.shots, int(rng_for(seed, "data-split").integers(2**31)))
    rate = calibrate_corruption(m.means, m.train, spec.teacher_accuracy, zeta)
    cfg = OracleTeacherConfig(m.means, spec.teacher_noise, zeta, rate)
    teacher = oracle_teacher_predict(cfg, m.train, int(rng_for(seed, "teacher-noise").integers(2**31)),
                                     strata=[split.labeled_indices, split.unlabeled_indices])
    return BenchmarkData(spec, m.means, m.train, m.val, m.test, split, teacher)


@dataclass
class RunResult:
    mode: str
    model: StudentModel
    report: TrainReport
    grid: GridSearchResult
    test_accuracy: float  # combined (DHO at the grid-searched setting; SHO head alone)
    probe_accuracy: Optional[float] = None


def run_mode(data: BenchmarkData, mode: str, config: TrainConfig, probe: bool = True,
             hidden=(64, 64), feature_dim: int = 32) -> RunResult:
    spec = data.spec
    model = build_model(spec.input_dim, spec.num_classes, hidden, feature_dim, mode=mode,
                        seed=int(rng_for(config.seed, "init").integers(2**31)))
    train_view = data.split.strip_labels(data.train)
    report, _ = train(model, train_view, data.split, data.teacher, config)
    grid = grid_search(model, data.val)
    setting = grid.best if mode == DHO else InterpolationSetting(1.0, 1.0)
    test_acc = evaluate_heads(model, data.test, setting).combined
    probe_acc = linear_probe(model.extractor, data.train, data.test) if probe else None
    return RunResult(mode, model, report, grid, test_acc, probe_acc)


def run_pair(seed: int, spec: BenchmarkSpec = CONFLICT_BENCHMARK, config: Optional[TrainConfig] = None,
             probe: bool = True) -> dict:
    """SHO and DHO trained from identical data, teacher, init seed and batch order."""
    config = replace(config or TrainConfig(), seed=seed)
    data = make_benchmark(spec, seed, config.zeta)
    return {mode: run_mode(data, mode, config, probe) for mode in (SHO, DHO)} | {"data": data}
