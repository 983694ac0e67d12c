import logging
import math

import numpy as np
import pytest

from dholab.data import Dataset, kshot_split, mixture_splits
from dholab.errors import NonFiniteGradientError
from dholab.inference import evaluate_heads, grid_search
from dholab.model import DHO, SHO, build_model
from dholab.teacher import OracleTeacherConfig, oracle_teacher_predict
from dholab.trainer import (
    OptimizerState,
    TrainConfig,
    cosine_schedule,
    linear_probe,
    optimizer_step,
    train,
)

# AdamW, p0=1, grads (0.5, -0.2, 0.1), lr=0.1, wd=0.01: 50-digit hand trace (scripts/reference_values.py)
ADAMW_TRACE = [0.89900000199999996, 0.8635404181145105854, 0.82473770041558090563]


def test_adamw_three_step_trace():
    p = {"w": np.array([1.0])}
    state = OptimizerState()
    cfg = TrainConfig(lr=0.1, weight_decay=0.01)
    for g, expected in zip((0.5, -0.2, 0.1), ADAMW_TRACE):
        optimizer_step(p, {"w": np.array([g])}, state, cfg)
        assert p["w"][0] == pytest.approx(expected, rel=1e-14)
    assert state.t["w"] == 3 and state.step == 3


def test_zero_gradient_no_decay_is_identity():
    p = {"w": np.array([0.3, -2.0])}
    optimizer_step(p, {"w": np.zeros(2)}, OptimizerState(), TrainConfig(weight_decay=0.0))
    np.testing.assert_array_equal(p["w"], [0.3, -2.0])


def test_sgd_step():
    p = {"w": np.array([1.0, 2.0])}
    optimizer_step(p, {"w": np.array([0.5, -1.0])}, OptimizerState(), TrainConfig(optimizer="sgd", lr=0.1, weight_decay=0.0))
    np.testing.assert_allclose(p["w"], [0.95, 2.1])


def test_non_finite_gradient_names_group():
    p = {"g.W0": np.ones(2), "ce.W": np.ones(2)}
    with pytest.raises(NonFiniteGradientError, match="ce.W"):
        optimizer_step(p, {"g.W0": np.ones(2), "ce.W": np.array([np.nan, 0])}, OptimizerState(), TrainConfig())
    np.testing.assert_array_equal(p["g.W0"], 1.0)


@pytest.mark.parametrize("step, total, warmup, expected", [(0, 100, 0, 1.0), (100, 100, 0, 0.0), (50, 100, 0, 0.5),
                                                            (5, 110, 10, 0.5), (60, 110, 10, 0.5)])
def test_cosine_schedule(step, total, warmup, expected):
    assert cosine_schedule(step, total, warmup) == pytest.approx(expected, abs=1e-15)


def test_cosine_schedule_rejects_out_of_range():
    with pytest.raises(ValueError):
        cosine_schedule(11, 10)


def test_config_validation():
    for bad in ({"lam": 1.5}, {"batch_size": 0}, {"lr": 0.0}, {"optimizer": "rmsprop"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def small_problem(seed=0, C=3, shots=4, accurate=True):
    m = mixture_splits(C, 8, 6.0, 1.0, seed, n_train=20, n_val=10, n_test=40)
    split = kshot_split(m.train, shots, seed)
    teacher = oracle_teacher_predict(OracleTeacherConfig(m.means, 0.0, 0.01, 0.0 if accurate else 0.3), m.train, seed)
    return m, split, teacher


def test_lam_one_leaves_kd_head_untouched():
    m, split, teacher = small_problem()
    model = build_model(8, 3, (16,), 8, mode=DHO, seed=0)
    kd_W, kd_b = model.kd_head.W.copy(), model.kd_head.b.copy()
    ce_W = model.ce_head.W.copy()
    train(model, split.strip_labels(m.train), split, teacher, TrainConfig(lam=1.0, epochs=3))
    np.testing.assert_array_equal(model.kd_head.W, kd_W)
    np.testing.assert_array_equal(model.kd_head.b, kd_b)
    assert not np.array_equal(model.ce_head.W, ce_W)


def test_zero_epochs_is_noop():
    m, split, teacher = small_problem()
    model = build_model(8, 3, (16,), 8, seed=0)
    before = {k: v.copy() for k, v in model.parameters().items()}
    report, _ = train(model, m.train, split, teacher, TrainConfig(epochs=0))
    assert report.trace == [] and report.epoch_losses == []
    for k, v in model.parameters().items():
        np.testing.assert_array_equal(v, before[k])


def test_training_deterministic():
    m, split, teacher = small_problem()
    models = []
    for _ in range(2):
        model = build_model(8, 3, (16,), 8, seed=1)
        train(model, m.train, split, teacher, TrainConfig(epochs=4, seed=9))
        models.append(model)
    for k, v in models[0].parameters().items():
        np.testing.assert_array_equal(v, models[1].parameters()[k])


def test_report_shape_and_replacement_flag(caplog):
    m, split, teacher = small_problem()
    model = build_model(8, 3, (16,), 8, mode=SHO, seed=1)
    with caplog.at_level(logging.WARNING):
        report, state = train(model, m.train, split, teacher, TrainConfig(epochs=3, batch_size=64, unlabeled_batch_size=16))
    assert report.labeled_with_replacement
    assert "sampling with replacement" in caplog.text
    steps_per_epoch = math.ceil(len(split.train_indices) / 16)
    assert report.steps == 3 * steps_per_epoch == len(report.trace)
    assert len(report.epoch_losses) == 3
    assert state.step == report.steps
    assert all(t.mode == SHO for t in report.trace)


def test_teacher_must_cover_dataset():
    m, split, teacher = small_problem()
    short = Dataset(m.train.features[:10], m.train.labels[:10], 3)
    with pytest.raises(ValueError):
        train(build_model(8, 3, (16,), 8), short, split, teacher, TrainConfig(epochs=1))


def test_separable_mixture_reaches_high_accuracy():
    m = mixture_splits(4, 16, 10.0, 0.1, seed=0, n_train=100, n_val=50, n_test=200)
    split = kshot_split(m.train, 4, 0)
    teacher = oracle_teacher_predict(OracleTeacherConfig(m.means), m.train, 0)
    model = build_model(16, 4, (64, 64), 32, mode=DHO, seed=0)
    train(model, split.strip_labels(m.train), split, teacher, TrainConfig(epochs=200))
    acc = evaluate_heads(model, m.test, grid_search(model, m.val).best).combined
    assert acc >= 0.95


def test_probe_on_one_hot_features_is_perfect():
    class Identity:
        def forward(self, x):
            return np.asarray(x)

    labels = np.tile(np.arange(4), 10)
    ds = Dataset(np.eye(4)[labels], labels, 4)
    assert linear_probe(Identity(), ds, ds) == 1.0


def test_random_extractor_probe_beats_chance():
    m = mixture_splits(4, 16, 5.0, 1.0, seed=0)
    extractor = build_model(16, 4, (64, 64), 32, seed=0).extractor
    assert linear_probe(extractor, m.train, m.test) > 0.25 + 0.05


def test_combined_loss_decreases_on_benchmark(benchmark_runs):
    for seed, pair in benchmark_runs.pairs.items():
        for mode in (SHO, DHO):
            losses = pair[mode].report.epoch_losses
            assert losses[-1]["combined"] < losses[0]["combined"], (seed, mode)
