import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dholab.data import Dataset
from dholab.inference import (
    DEFAULT_ALPHAS,
    InterpolationSetting,
    emulate_sho,
    entropy_adaptive_alpha,
    evaluate_heads,
    grid_search,
    heuristic_setting,
    interpolate,
    predict,
)
from dholab.model import DHO, FeatureExtractor, LinearHead, StudentModel
from dholab.numcore import entropy, is_prob_vector, softmax


def identity_model(W_ce, b_ce, W_kd, b_kd):
    """Student whose features are the (non-negative) inputs themselves."""
    d = np.asarray(W_ce).shape[1]
    ext = FeatureExtractor([np.eye(d)], [np.zeros(d)])
    return StudentModel(ext, LinearHead(np.array(W_ce, float), np.array(b_ce, float)),
                        LinearHead(np.array(W_kd, float), np.array(b_kd, float)), DHO)


def bias_model(p_ce, p_kd):
    """Input-independent heads whose outputs are exactly p_ce and p_kd (at beta=1)."""
    C = len(p_ce)
    return identity_model(np.zeros((C, 1)), np.log(p_ce), np.zeros((C, 1)), np.log(p_kd))


def test_interpolate_examples():
    p_ce = np.array([0.2, 0.8])
    np.testing.assert_array_equal(interpolate(p_ce, [3.0, -1.0], 1.0, 1.0), p_ce)
    np.testing.assert_allclose(interpolate(p_ce, [3.0, -1.0], 0.0, 1.0), softmax([3.0, -1.0]))
    kd = np.log([0.3, 0.7])
    np.testing.assert_allclose(interpolate([1.0, 0.0], kd, 0.5, 1.0), [0.65, 0.35])


@pytest.mark.parametrize("alpha, beta", [(-0.1, 1.0), (1.1, 1.0), (0.5, 0.0)])
def test_interpolate_rejects_out_of_range(alpha, beta):
    with pytest.raises(ValueError):
        interpolate([0.5, 0.5], [0.0, 0.0], alpha, beta)


simplex3 = arrays(np.float64, 3, elements=st.floats(0.01, 1)).map(lambda a: a / a.sum())
logits3 = arrays(np.float64, 3, elements=st.floats(-30, 30))


@given(simplex3, logits3, st.floats(0, 1), st.floats(0.05, 20))
def test_interpolation_is_probability(p_ce, kd, alpha, beta):
    assert is_prob_vector(interpolate(p_ce, kd, alpha, beta))


@given(st.integers(0, 2), st.floats(0.05, 5), st.floats(0.05, 5), st.floats(0, 1), st.floats(0.05, 10))
@settings(max_examples=200)
def test_shared_argmax_preserved(c, gap_ce, gap_kd, alpha, beta):
    ce_logits = np.zeros(3)
    ce_logits[c] = gap_ce
    kd_logits = np.zeros(3)
    kd_logits[c] = gap_kd
    model = bias_model(softmax(ce_logits), softmax(kd_logits))
    assert predict(model, np.ones(1), InterpolationSetting(alpha, beta)) == c


def test_predict_onehot_ce():
    model = bias_model(np.array([1e-9, 1e-9, 1 - 2e-9]), np.array([0.9, 0.05, 0.05]))
    assert predict(model, np.ones(1), InterpolationSetting(1.0)) == 2


def test_disagreement_flip_by_enumeration():
    p_ce, p_kd = np.array([0.5, 0.4, 0.1]), np.array([0.05, 0.45, 0.5])
    model = bias_model(p_ce, p_kd)
    for alpha in (0.0, 0.5, 1.0):
        mix = [alpha * a + (1 - alpha) * b for a, b in zip(p_ce, p_kd)]
        expected = max(range(3), key=lambda c: (mix[c], -c))
        assert predict(model, np.ones(1), InterpolationSetting(alpha)) == expected
    assert predict(model, np.ones(1), InterpolationSetting(0.0)) == 2
    assert predict(model, np.ones(1), InterpolationSetting(0.5)) == 1


def test_ties_break_to_lowest_index():
    model = bias_model(np.array([0.4, 0.4, 0.2]), np.array([0.4, 0.4, 0.2]))
    assert predict(model, np.ones(1), InterpolationSetting(0.5)) == 0


def dominance_setup(seed=0, n=60, C=3):
    """CE head barely right on every example, KD head confidently on a random class."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % C
    r = rng.integers(0, C, size=n)
    X = np.hstack([np.eye(C)[y], np.eye(C)[r]])
    W_ce = np.hstack([0.1 * np.eye(C), np.zeros((C, C))])
    W_kd = np.hstack([np.zeros((C, C)), 20 * np.eye(C)])
    return identity_model(W_ce, np.zeros(C), W_kd, np.zeros(C)), Dataset(X, y, C, split="val")


def test_grid_prefers_perfect_ce_head():
    model, val = dominance_setup()
    res = grid_search(model, val)
    assert res.best.alpha == max(DEFAULT_ALPHAS)
    assert res.best.val_accuracy == 1.0
    acc = evaluate_heads(model, val, InterpolationSetting(0.0))
    assert acc.ce == 1.0 and acc.kd < 0.6


def test_grid_single_point():
    model, val = dominance_setup()
    res = grid_search(model, val, [0.3], [0.7])
    assert (res.best.alpha, res.best.beta) == (0.3, 0.7)
    assert res.accuracy.shape == (1, 1)


def test_grid_matches_per_example_recomputation():
    rng = np.random.default_rng(4)
    C, d, n = 4, 6, 40
    model = identity_model(rng.normal(size=(C, d)), rng.normal(size=C), rng.normal(size=(C, d)) * 3, rng.normal(size=C))
    X = np.abs(rng.normal(size=(n, d)))
    val = Dataset(X, rng.integers(0, C, size=n), C)
    res = grid_search(model, val)
    for i, a in enumerate(res.alphas):
        for j, b in enumerate(res.betas):
            correct = 0
            for x, y in zip(X, val.labels):
                ce = [sum(model.ce_head.W[c, k] * x[k] for k in range(d)) + model.ce_head.b[c] for c in range(C)]
                kd = [(sum(model.kd_head.W[c, k] * x[k] for k in range(d)) + model.kd_head.b[c]) / b for c in range(C)]
                e_ce = [math.exp(v - max(ce)) for v in ce]
                e_kd = [math.exp(v - max(kd)) for v in kd]
                mix = [a * p / sum(e_ce) + (1 - a) * q / sum(e_kd) for p, q in zip(e_ce, e_kd)]
                correct += int(max(range(C), key=lambda c: (mix[c], -c)) == y)
            assert res.accuracy[i, j] == pytest.approx(correct / n, abs=1e-12)
    assert res.best.val_accuracy == res.accuracy.max()
    assert res.best.val_accuracy >= res.accuracy[res.alphas.index(0.0)].max()
    assert res.best.val_accuracy >= res.accuracy[res.alphas.index(1.0)].max()


def test_grid_ties_prefer_half_then_small_beta():
    model = bias_model(np.array([0.6, 0.4]), np.array([0.7, 0.3]))
    val = Dataset(np.ones((4, 1)), [0, 0, 0, 0], 2)
    res = grid_search(model, val)
    assert (res.best.alpha, res.best.beta) == (0.5, 0.1)


def test_grid_rejects_empty_validation():
    model, _ = dominance_setup()
    with pytest.raises(ValueError):
        grid_search(model, Dataset(np.ones((2, 6)), [-1, -1], 3))


def test_grid_csv(tmp_path):
    model, val = dominance_setup()
    res = grid_search(model, val)
    res.to_csv(tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert len(lines) == 1 + len(DEFAULT_ALPHAS)
    assert lines[0].split(",")[1:] == ["0.1", "0.3", "0.5", "0.7", "1.0", "2.0"]


def test_adaptive_alpha_examples():
    p = np.array([0.2, 0.3, 0.5])
    assert entropy_adaptive_alpha(p, p[::-1]) == pytest.approx(0.5)
    assert entropy_adaptive_alpha(np.array([1.0, 0, 0, 0]), np.full(4, 0.25)) == pytest.approx(0.8)


@given(st.floats(0.34, 0.98), st.floats(0.34, 0.98))
def test_adaptive_alpha_decreases_with_ce_entropy(a, b):
    lo, hi = sorted((a, b))
    sharp, flat = np.array([hi, (1 - hi) / 2, (1 - hi) / 2]), np.array([lo, (1 - lo) / 2, (1 - lo) / 2])
    p_kd = np.array([0.5, 0.3, 0.2])
    assert entropy(sharp) <= entropy(flat)
    assert entropy_adaptive_alpha(sharp, p_kd) >= entropy_adaptive_alpha(flat, p_kd)


def test_adaptive_alpha_in_unit_interval():
    rng = np.random.default_rng(0)
    a = entropy_adaptive_alpha(rng.dirichlet(np.ones(5), 50), rng.dirichlet(np.ones(5), 50))
    assert np.all((a > 0) & (a < 1))


def test_emulate_sho():
    assert emulate_sho(0.5) == InterpolationSetting(0.5, 1.0)
    model, val = dominance_setup()
    acc1 = evaluate_heads(model, val, emulate_sho(1.0))
    assert acc1.combined == acc1.ce
    acc0 = evaluate_heads(model, val, emulate_sho(0.0))
    assert acc0.combined == acc0.kd


def test_heuristic_setting():
    assert heuristic_setting(0.9) == InterpolationSetting(0.2, 0.5)
    assert heuristic_setting(0.6) == InterpolationSetting(0.4, 0.5)
    assert heuristic_setting(None) == InterpolationSetting(0.4, 0.5)


def test_setting_validation():
    with pytest.raises(ValueError):
        InterpolationSetting(1.2)
    with pytest.raises(ValueError):
        InterpolationSetting(0.5, -1.0)
