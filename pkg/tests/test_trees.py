"""Histogram GBDT and random forest: objective, growth, persistence, importance."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridfail.trees import (
    ForestConfig,
    GbdtConfig,
    TrainError,
    apply_bins,
    bin_edges,
    cross_entropy,
    feature_importance,
    fit_gbdt,
    fit_random_forest,
    load_model,
    predict,
    predict_proba,
    save_model,
    softmax,
    softmax_grad_hess,
)

from oracles import softmax_ce_central_differences


def _mixed(n=600, seed=0, K=4):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 6))
    y = (np.digitize(X[:, 0] + 0.5 * X[:, 1], [-0.8, 0.0, 0.8]) % K).astype(np.int64)
    return X, y


def test_zero_rounds_predicts_priors():
    X, y = _mixed()
    m = fit_gbdt(X, y, GbdtConfig(n_rounds=0))
    prior = np.bincount(y, minlength=4) / len(y)
    np.testing.assert_allclose(predict_proba(m, X[:5]), np.tile(prior, (5, 1)), rtol=1e-12)


def test_separable_one_dimensional():
    x = np.arange(100, dtype=float)[:, None]
    y = (x[:, 0] >= 50).astype(np.int64)
    m = fit_gbdt(x, y, GbdtConfig(n_rounds=20, learning_rate=0.3))
    assert (predict(m, x) == y).all()
    assert m.trees[0].threshold[0] == pytest.approx(49.5)


@pytest.mark.parametrize("K", [2, 4, 7])
def test_gradient_and_hessian_match_finite_differences(K):
    rng = np.random.default_rng(K)
    scores = rng.normal(scale=3.0, size=(100, K))
    y = rng.integers(0, K, 100)
    g, h = softmax_grad_hess(scores, y)
    for i in range(100):
        ref_g, ref_h = softmax_ce_central_differences(scores[i], int(y[i]))
        np.testing.assert_allclose(g[i], ref_g, rtol=1e-5, atol=1e-12)
        np.testing.assert_allclose(h[i], ref_h, rtol=1e-5, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6))
def test_softmax_is_a_distribution(row):
    p = softmax(np.array([row]))
    assert abs(p.sum() - 1.0) < 1e-12 and (p >= 0).all()


def test_cross_entropy_of_uniform_scores():
    assert cross_entropy(np.zeros((3, 4)), np.array([0, 1, 3])) == pytest.approx(np.log(4))


@pytest.mark.parametrize("growth", ["leaf_wise", "level_wise"])
def test_training_loss_never_increases(growth):
    X, y = _mixed(seed=1)
    m = fit_gbdt(X, y, GbdtConfig(n_rounds=40, growth=growth, max_leaves=15, max_depth=4))
    losses = [e["train_loss"] for e in m.train_log]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_structure_limits():
    X, y = _mixed(seed=2)
    m = fit_gbdt(X, y, GbdtConfig(n_rounds=3, max_leaves=5, max_depth=10))
    assert all(t.n_leaves <= 5 for t in m.trees)
    m = fit_gbdt(X, y, GbdtConfig(n_rounds=3, growth="level_wise", max_depth=2, max_leaves=64))
    assert all(t.n_leaves <= 4 for t in m.trees)


def test_importance_is_sum_of_split_gains():
    X, y = _mixed(seed=3)
    m = fit_gbdt(X, y, GbdtConfig(n_rounds=10))
    total = np.zeros(X.shape[1])
    for t in m.trees:
        for f, g in zip(t.feature, t.gain):
            if f >= 0:
                total[f] += g
    np.testing.assert_allclose(m.feature_gain, total, rtol=1e-12)
    assert all((t.gain[t.feature >= 0] > 0).all() for t in m.trees)


def test_monotone_transform_invariance():
    X, y = _mixed(seed=4)
    cfg = GbdtConfig(n_rounds=15)
    a = fit_gbdt(X, y, cfg)
    Z = np.exp(X) * 3.0 + 1.0
    b = fit_gbdt(Z, y, cfg)
    np.testing.assert_array_equal(predict(a, X), predict(b, Z))
    np.testing.assert_allclose(predict_proba(a, X), predict_proba(b, Z), rtol=1e-12)


def test_bins_are_rank_based():
    col = np.array([3.0, 1.0, 2.0, 2.0, 10.0])
    e = bin_edges(col, 255)
    np.testing.assert_array_equal(apply_bins(col[:, None], [e])[:, 0], [2, 0, 1, 1, 3])
    assert bin_edges(np.ones(4), 8).size == 0
    big = np.arange(1000, dtype=float)
    assert len(bin_edges(big, 16)) == 15


@pytest.mark.parametrize("kind", ["gbdt", "forest"])
def test_save_load_identical(tmp_path, kind):
    X, y = _mixed(seed=5)
    if kind == "gbdt":
        m = fit_gbdt(X, y, GbdtConfig(n_rounds=8), X_val=X[:50], y_val=y[:50])
    else:
        m = fit_random_forest(X, y, ForestConfig(n_trees=10, max_depth=5))
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    np.testing.assert_array_equal(predict_proba(back, X), predict_proba(m, X))
    save_model(back, tmp_path / "m2.json")
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "m2.json").read_bytes()


def test_row_permutation_equivariance():
    X, y = _mixed(seed=6)
    cfg = GbdtConfig(n_rounds=10)
    m = fit_gbdt(X, y, cfg)
    perm = np.random.default_rng(0).permutation(len(y))
    p = fit_gbdt(X[perm], y[perm], cfg)
    np.testing.assert_allclose(predict_proba(p, X), predict_proba(m, X), rtol=1e-9, atol=1e-12)


def test_early_stopping_truncates():
    X, y = _mixed(seed=7)
    Xv, yv = _mixed(n=200, seed=8)
    yv = np.random.default_rng(1).permutation(yv)  # noise: validation loss soon rises
    m = fit_gbdt(X, y, GbdtConfig(n_rounds=60, early_stopping_rounds=5), X_val=Xv, y_val=yv)
    assert m.config["best_round"] * 4 == len(m.trees)
    assert len(m.train_log) < 60


def test_subsampling_is_seeded():
    X, y = _mixed(seed=9)
    cfg = GbdtConfig(n_rounds=5, row_subsample=0.5, feature_subsample=0.5, seed=3)
    a, b = fit_gbdt(X, y, cfg), fit_gbdt(X, y, cfg)
    np.testing.assert_array_equal(predict_proba(a, X), predict_proba(b, X))


def test_forest_depth_zero_is_bootstrap_majority():
    X, y = _mixed(seed=10)
    m = fit_random_forest(X, y, ForestConfig(n_trees=5, max_depth=0))
    from gridfail.rng import stream

    for i, t in enumerate(m.trees):
        boot = stream(0, "forest", i).integers(0, len(y), len(y))
        assert t.n_leaves == 1
        assert int(t.value[0]) == int(np.argmax(np.bincount(y[boot], minlength=4)))


def test_forest_on_blobs(blobs):
    X, y = blobs
    m = fit_random_forest(X, y, ForestConfig(n_trees=30, max_depth=8))
    P = predict_proba(m, X)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
    assert np.mean(predict(m, X) == y) > 0.95


def test_decisive_feature_ranks_first():
    rng = np.random.default_rng(12)
    X = rng.normal(size=(800, 5))
    y = (X[:, 3] > 0).astype(np.int64)
    X[:, 1] = 0.0  # constant, never split on
    for m in (fit_gbdt(X, y, GbdtConfig(n_rounds=10)), fit_random_forest(X, y, ForestConfig(n_trees=20, feature_subsample=1.0))):
        ranked = feature_importance(m)
        assert ranked[0][0] == "f3"
        assert dict(ranked)["f1"] == 0.0
    assert len(feature_importance(m, top_k=50)) == 5
    assert [n for n, _ in feature_importance(m, top_k=2)] == [n for n, _ in ranked[:2]]


def test_schema_mismatch_and_bad_input():
    X, y = _mixed(seed=13)
    m = fit_gbdt(X, y, GbdtConfig(n_rounds=2))
    with pytest.raises(TrainError):
        predict_proba(m, X[:, :5])
    with pytest.raises(TrainError, match="schema"):
        predict_proba(m, X, feature_names=list("abcdef"))
    with pytest.raises(TrainError, match="single class"):
        fit_gbdt(X, np.zeros(len(X), dtype=np.int64))
    with pytest.raises(TrainError, match="single class"):
        fit_random_forest(X, np.ones(len(X), dtype=np.int64))
    with pytest.raises(TrainError):
        fit_gbdt(X, y, GbdtConfig(n_bins=300))
