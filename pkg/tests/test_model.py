import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dholab.errors import CheckpointError, StateError, UndefinedSimilarityError
from dholab.experiments import CONFLICT_BENCHMARK, make_benchmark
from dholab.inference import evaluate_heads, grid_search
from dholab.model import (
    DHO,
    SHO,
    ActivationCache,
    CosineHead,
    FeatureExtractor,
    LinearHead,
    StudentModel,
    build_model,
    cosine_head_forward,
    forward_features,
    init_language_aware,
    init_random,
    linear_head_forward,
    load_checkpoint,
    prototype_embeddings,
    save_checkpoint,
)
from dholab.seeding import rng_for
from dholab.trainer import OptimizerState, TrainConfig, train

mpmath.mp.dps = 40


def mp_forward(weights, biases, x):
    h = [mpmath.mpf(float(v)) for v in x]
    for W, b in zip(weights, biases):
        a = [sum(mpmath.mpf(float(W[i, j])) * h[j] for j in range(W.shape[1])) + mpmath.mpf(float(b[i]))
             for i in range(W.shape[0])]
        h = [max(v, mpmath.mpf(0)) for v in a]
    return np.array([float(v) for v in h])


def test_identity_extractor_is_relu():
    ext = FeatureExtractor([np.eye(3)], [np.zeros(3)])
    np.testing.assert_array_equal(forward_features(ext, [1.0, -2.0, 0.5]), [1.0, 0.0, 0.5])


def test_zero_input_zero_bias():
    m = build_model(5, 3, (4,), 3, seed=1)
    np.testing.assert_array_equal(forward_features(m.extractor, np.zeros(5)), np.zeros(3))


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_high_precision_oracle(seed):
    rng = np.random.default_rng(seed)
    m = build_model(6, 3, (7,), 4, seed=seed)
    for b in m.extractor.biases:
        b[...] = rng.normal(size=b.shape) * 0.1
    x = rng.normal(size=6)
    expected = mp_forward(m.extractor.weights, m.extractor.biases, x)
    np.testing.assert_allclose(forward_features(m.extractor, x), expected, rtol=1e-13, atol=1e-15)


def test_forward_dimension_mismatch():
    with pytest.raises(ValueError):
        forward_features(build_model(5, 3, (4,), 3).extractor, np.zeros(4))


def test_backward_without_cache_is_state_error():
    ext = build_model(3, 2, (4,), 2).extractor
    with pytest.raises(StateError):
        ext.backward(np.ones((1, 2)), None)


def test_forward_cache_retains_activations():
    ext = build_model(3, 2, (4,), 2).extractor
    cache = ActivationCache()
    forward_features(ext, np.ones((2, 3)), cache)
    assert len(cache.preacts) == 2 and cache.preacts[0].shape == (2, 4)


def test_linear_head_examples(rng):
    head = LinearHead(np.zeros((2, 3)), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(linear_head_forward(head, rng.normal(size=3)), [1.0, 2.0])
    z = rng.normal(size=4)
    np.testing.assert_array_equal(linear_head_forward(LinearHead(np.eye(4), np.zeros(4)), z), z)
    W, b = rng.normal(size=(3, 4)), rng.normal(size=3)
    expected = [float(mpmath.fsum(mpmath.mpf(W[c, j]) * mpmath.mpf(z[j]) for j in range(4)) + b[c]) for c in range(3)]
    np.testing.assert_allclose(linear_head_forward(LinearHead(W, b), z), expected, rtol=1e-13)
    with pytest.raises(ValueError):
        linear_head_forward(head, np.ones(4))


def test_cosine_head_examples(rng):
    W = np.array([[1.0, 0.0], [0.0, 2.0]])
    np.testing.assert_allclose(cosine_head_forward(CosineHead(W, 1.0), W[0]), [1.0, 0.0], atol=1e-15)
    z = rng.normal(size=2)
    np.testing.assert_allclose(cosine_head_forward(CosineHead(W, 0.01), z),
                               100 * cosine_head_forward(CosineHead(W, 1.0), z), rtol=1e-12)
    with pytest.raises(UndefinedSimilarityError):
        cosine_head_forward(CosineHead(W, 1.0), np.zeros(2))
    with pytest.raises(UndefinedSimilarityError):
        CosineHead(np.zeros((2, 2)), 1.0)


def test_cosine_head_matches_oracle(rng):
    W, z = rng.normal(size=(4, 5)), rng.normal(size=5)
    nz = mpmath.sqrt(mpmath.fsum(mpmath.mpf(v) ** 2 for v in z))
    expected = []
    for w in W:
        nw = mpmath.sqrt(mpmath.fsum(mpmath.mpf(v) ** 2 for v in w))
        dot = mpmath.fsum(mpmath.mpf(a) * mpmath.mpf(b) for a, b in zip(w, z))
        expected.append(float(dot / (nz * nw) / mpmath.mpf("0.05")))
    np.testing.assert_allclose(cosine_head_forward(CosineHead(W, 0.05), z), expected, rtol=1e-12)


@given(st.integers(0, 10_000), st.floats(1e-3, 10))
@settings(max_examples=30, deadline=None)
def test_cosine_logits_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    out = CosineHead(rng.normal(size=(3, 4)), scale).forward(rng.normal(size=(5, 4)))
    assert np.all(np.abs(out) <= 1 / scale * (1 + 1e-12))


def test_language_init_sets_rows(rng):
    E = rng.normal(size=(3, 4))
    head = init_language_aware(LinearHead(rng.normal(size=(3, 4)), np.ones(3)), E)
    np.testing.assert_array_equal(head.W, E)
    np.testing.assert_array_equal(head.b, 0)
    again = init_language_aware(head, E)
    np.testing.assert_array_equal(again.W, E)
    with pytest.raises(ValueError):
        init_language_aware(head, np.ones((2, 4)))


def test_language_init_cosine_self_similarity(rng):
    E = rng.normal(size=(5, 6))
    head = init_language_aware(CosineHead(np.ones((5, 6)), 0.01), E)
    for c in range(5):
        assert np.argmax(cosine_head_forward(head, E[c])) == c


def test_init_random_reproducible_and_bounded():
    a, b, c = build_model(8, 3, (6,), 4, seed=3), build_model(8, 3, (6,), 4, seed=3), build_model(8, 3, (6,), 4, seed=4)
    for name, arr in a.parameters().items():
        np.testing.assert_array_equal(arr, b.parameters()[name])
        if ".W" in name:
            assert np.all(np.abs(arr) <= 1 / np.sqrt(arr.shape[1]))
        else:
            np.testing.assert_array_equal(arr, 0)
    assert not np.array_equal(a.extractor.weights[0], c.extractor.weights[0])


def test_sho_aliases_and_dho_disjoint(rng):
    sho = build_model(4, 3, (5,), 2, mode=SHO)
    assert sho.ce_head is sho.kd_head
    dho = build_model(4, 3, (5,), 2, mode=DHO)
    z = rng.normal(size=2)
    before = dho.kd_head.forward(z).copy()
    dho.ce_head.W += 1.0
    dho.ce_head.b -= 2.0
    np.testing.assert_array_equal(dho.kd_head.forward(z), before)
    before_ce = dho.ce_head.forward(z).copy()
    dho.kd_head.W *= -3.0
    np.testing.assert_array_equal(dho.ce_head.forward(z), before_ce)


def test_mode_aliasing_enforced():
    h = LinearHead(np.ones((2, 2)), np.zeros(2))
    ext = FeatureExtractor([np.eye(2)], [np.zeros(2)])
    with pytest.raises(ValueError):
        StudentModel(ext, h, LinearHead(np.ones((2, 2)), np.zeros(2)), SHO)
    with pytest.raises(ValueError):
        StudentModel(ext, h, h, DHO)


@pytest.mark.parametrize("kd", ["linear", "cosine"])
def test_checkpoint_round_trip(tmp_path, kd):
    m = build_model(4, 3, (5,), 2, kd_head=kd, seed=2)
    st_ = OptimizerState(step=3, m={"ce.W": np.ones((3, 2))}, v={"ce.W": np.full((3, 2), 0.5)}, t={"ce.W": 3})
    save_checkpoint(tmp_path / "c.json", m, 0.4, 0.5, st_)
    back = load_checkpoint(tmp_path / "c.json")
    assert back["alpha"] == 0.4 and back["beta"] == 0.5
    for name, arr in m.parameters().items():
        np.testing.assert_array_equal(back["model"].parameters()[name], arr)
    assert type(back["model"].kd_head) is type(m.kd_head)
    np.testing.assert_array_equal(back["optimizer"].v["ce.W"], st_.v["ce.W"])


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"format": "something-else"}')
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_prototype_embeddings_centered():
    m = build_model(4, 3, (5,), 6, seed=0)
    E = prototype_embeddings(m.extractor, np.eye(4)[:3] * 3, row_norm=2.0)
    np.testing.assert_allclose(np.linalg.norm(E, axis=1), 2.0)
    assert E.shape == (3, 6)


def _final_accuracy(seed: int, language: bool) -> float:
    cfg = TrainConfig(seed=seed)
    data = make_benchmark(CONFLICT_BENCHMARK, seed, cfg.zeta)
    m = build_model(16, 4, (64, 64), 32, mode=DHO, kd_head="cosine", seed=int(rng_for(seed, "init").integers(2**31)))
    if language:
        E = prototype_embeddings(m.extractor, data.means, float(np.linalg.norm(m.ce_head.W, axis=1).mean()))
        init_language_aware(m.ce_head, E)
        init_language_aware(m.kd_head, E)
    train(m, data.split.strip_labels(data.train), data.split, data.teacher, cfg)
    return evaluate_heads(m, data.test, grid_search(m, data.val).best).combined


@pytest.mark.slow
def test_language_init_not_worse_than_random():
    wins = sum(_final_accuracy(s, True) >= _final_accuracy(s, False) for s in range(5))
    assert wins >= 4
