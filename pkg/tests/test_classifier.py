import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wmlab import lm
from wmlab.classifier import (
    FeatureRegistry, Scenario, ScenarioSpec, evaluate, extract_features, extract_matrix, f1_change,
    loss_and_grad, metrics_from_confusion, run_scenario, stratified_indices, train_classifier,
)
from wmlab.errors import InvalidDataset, InvalidInput, InvalidParameter, UndefinedBaseline
from wmlab.watermark import SchemeConfig, SchemeKind, WatermarkKey, watermarked_generate

KEY = WatermarkKey(4242)


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(0)
    Z = rng.normal(size=(30, 6))
    y = rng.integers(0, 4, size=30)
    W, b = rng.normal(size=(4, 6)), rng.normal(size=4)
    _, gW, gb = loss_and_grad(W, b, Z, y, 0.01)
    h = 1e-6
    num_W = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        Wp, Wm = W.copy(), W.copy()
        Wp[idx] += h
        Wm[idx] -= h
        num_W[idx] = (loss_and_grad(Wp, b, Z, y, 0.01)[0] - loss_and_grad(Wm, b, Z, y, 0.01)[0]) / (2 * h)
    num_b = np.zeros_like(b)
    for k in range(4):
        bp, bm = b.copy(), b.copy()
        bp[k] += h
        bm[k] -= h
        num_b[k] = (loss_and_grad(W, bp, Z, y, 0.01)[0] - loss_and_grad(W, bm, Z, y, 0.01)[0]) / (2 * h)
    assert np.linalg.norm(gW - num_W) / np.linalg.norm(num_W) <= 1e-5
    assert np.linalg.norm(gb - num_b) / np.linalg.norm(num_b) <= 1e-5


def _blobs(n=40, sep=4.0, seed=0):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(0, 1, (n, 3)), rng.normal(sep, 1, (n, 3))])
    return X, ["a"] * n + ["b"] * n


def test_separable_data_fits_perfectly():
    X, y = _blobs(sep=8.0)
    clf = train_classifier(X, y, epochs=500)
    assert evaluate(clf, X, y).macro_f1 == 1.0
    assert all(b <= a for a, b in zip(clf.loss_history, clf.loss_history[1:]))


def test_shuffled_labels_give_chance():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(1200, 5))
    labels = rng.choice(["a", "b", "c"], size=1200).tolist()
    clf = train_classifier(X[:900], labels[:900])
    assert abs(evaluate(clf, X[900:], labels[900:]).macro_f1 - 1 / 3) <= 0.1


def test_training_deterministic():
    X, y = _blobs(sep=1.0)
    a, b = train_classifier(X, y, rng_seed=3), train_classifier(X, y, rng_seed=3)
    assert np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)


def test_training_errors():
    X, _ = _blobs()
    with pytest.raises(InvalidDataset):
        train_classifier(X, ["a"] * len(X))
    with pytest.raises(InvalidDataset):
        train_classifier(X[:15], ["a"] * 10 + ["b"] * 5)


def test_metric_examples():
    assert metrics_from_confusion([[5, 0], [0, 5]]).macro_f1 == 1.0
    m = metrics_from_confusion([[8, 2], [2, 8]])
    assert m.macro_f1 == pytest.approx(0.8)
    assert m.precision.tolist() == pytest.approx([0.8, 0.8]) and m.recall.tolist() == pytest.approx([0.8, 0.8])
    # P = R = 0.5 for class 0
    m = metrics_from_confusion([[1, 1], [1, 3]])
    assert m.f1[0] == pytest.approx(0.5)


@given(st.lists(st.integers(0, 3), min_size=5, max_size=80), st.integers(0, 10**6))
@settings(max_examples=80, deadline=None)
def test_metrics_match_bruteforce_recount(truth, seed):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 4, size=len(truth))
    C = np.zeros((4, 4), dtype=int)
    for t, p in zip(truth, pred):
        C[t, p] += 1
    m = metrics_from_confusion(C)
    for c in range(4):
        tp = sum(1 for t, p in zip(truth, pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(truth, pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(truth, pred) if t == c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        assert m.precision[c] == prec and m.recall[c] == rec and m.f1[c] == f1
    assert m.macro_f1 == sum(m.f1) / 4


def test_evaluate_rejects_unknown_label():
    X, y = _blobs()
    clf = train_classifier(X, y)
    with pytest.raises(InvalidInput):
        evaluate(clf, X[:2], ["a", "zzz"])


def test_f1_change_examples():
    assert f1_change(0.8, 0.8) == 0.0
    assert f1_change(0.90, 0.75) == pytest.approx(0.2)
    assert f1_change(0.5, 0.75) < 0
    with pytest.raises(UndefinedBaseline):
        f1_change(0.5, 0.0)


def test_stratified_split():
    labels = ["a"] * 30 + ["b"] * 30
    tr, te = stratified_indices(labels, 20, 10, 0)
    assert len(tr) == 40 and len(te) == 20 and not set(tr) & set(te)
    assert sum(labels[i] == "a" for i in te) == 10
    with pytest.raises(InvalidDataset):
        stratified_indices(labels, 25, 10, 0)


def test_scenario_spec_rules():
    s = SchemeConfig(SchemeKind.KGW, KEY)
    ScenarioSpec(Scenario.A, ("m0", "m1"))
    ScenarioSpec(Scenario.B, ("m0", "m1"), ("m1",), s)
    ScenarioSpec(Scenario.C, ("m0", "m1"), ("m0", "m1"), s)
    for bad in [
        dict(scenario="A", models=("m0",), scheme=s),
        dict(scenario="B", models=("m0", "m1"), watermarked_models=("m0", "m1"), scheme=s),
        dict(scenario="C", models=("m0", "m1"), watermarked_models=("m0",), scheme=s),
        dict(scenario="C", models=("m0",), watermarked_models=("m0",)),
        dict(scenario="B", models=("m0",), watermarked_models=("m9",), scheme=s),
    ]:
        with pytest.raises(InvalidParameter):
            ScenarioSpec(**bad)


@pytest.fixture(scope="module")
def registry(ref_models):
    schemes = [SchemeConfig(SchemeKind.KGW, KEY), SchemeConfig(SchemeKind.EXP, KEY)]
    return FeatureRegistry(ref_models, schemes)


def test_feature_layout_and_batch_equality(registry, ref_models, ref_prompts):
    assert registry.dim == 512 + 2 * 4 + 2 == len(registry.layout)
    texts = [watermarked_generate(ref_models[j % 4], ref_prompts[j], None, 30 + j, rng_seed=j) for j in range(8)]
    X = extract_matrix(texts, registry)
    for t, row in zip(texts, X):
        single = extract_features(t, registry)
        assert np.allclose(single, row, rtol=1e-12, atol=1e-12)
        assert np.array_equal(single, extract_features(t, registry))
    i = registry.layout.index("log_ppl:m1")
    assert X[0, i] == pytest.approx(math.log(lm.perplexity(ref_models[1], texts[0])))
    with pytest.raises(InvalidInput):
        extract_features([], registry)


def test_own_model_has_lowest_perplexity_feature(registry, ref_models, ref_prompts):
    cols = [registry.layout.index(f"log_ppl:m{i}") for i in range(4)]
    wins = 0
    for j in range(200):
        t = lm.generate(ref_models[j % 4], ref_prompts[j], 200, rng_seed=j)
        wins += int(np.argmin(extract_features(t, registry)[cols]) == j % 4)
    assert wins >= 180


def test_kgw_text_has_high_z_feature(registry, ref_models, ref_prompts):
    col = registry.layout.index("z:KGW")
    s = registry.schemes[0]
    texts = [watermarked_generate(ref_models[j % 4], ref_prompts[j], s, 200, rng_seed=j) for j in range(200)]
    assert (extract_matrix(texts, registry)[:, col] > 4).mean() >= 0.99


def test_identical_models_are_indistinguishable(ref_models, ref_prompts):
    twin = {"a": ref_models[1], "b": ref_models[1]}
    reg = FeatureRegistry([ref_models[1]], use_scheme_features=False)
    m = run_scenario(ScenarioSpec(Scenario.A, ("a", "b")), twin, ref_prompts, reg, n_train=150, n_test=100,
                     length=100, rng_seed=0)
    assert abs(m.macro_f1 - 0.5) <= 0.1


def test_distinct_models_are_separable(ref_models, ref_prompts):
    models = {m.model_id: m for m in ref_models}
    reg = FeatureRegistry(ref_models, use_scheme_features=False)
    m = run_scenario(ScenarioSpec(Scenario.A, tuple(models)), models, ref_prompts, reg, n_train=100,
                     n_test=50, length=200, rng_seed=1)
    assert m.macro_f1 >= 0.70
