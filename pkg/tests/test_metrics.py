"""Evaluation metrics, probability matrices and element-level importance."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridfail.metrics import (
    MetricsError,
    aggregate_importance,
    avg_probability_matrix,
    evaluate,
    f1_micro,
    feature_importance_table,
    report_tables,
)


def test_worked_example():
    r = evaluate([0, 0, 3, 1], np.eye(4)[[0, 2, 3, 3]])
    assert (r.accuracy, r.binary_accuracy) == (0.5, 0.75)
    assert r.confusion.sum(axis=1).tolist() == [2, 1, 0, 1]


def test_perfect_predictions():
    y = np.array([0, 1, 2, 3, 3])
    r = evaluate(y, np.eye(4)[y])
    assert r.accuracy == r.balanced_accuracy == r.f1_micro == r.binary_accuracy == 1.0
    np.testing.assert_array_equal(r.avg_probability, np.eye(4))


def test_f1_micro_equals_accuracy():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        y, p = rng.integers(0, 4, n), rng.integers(0, 4, n)
        assert f1_micro(y, p, 4) == pytest.approx(np.mean(y == p), abs=1e-15)


def test_uniform_probabilities():
    y = np.array([0, 1, 2, 3] * 5)
    r = evaluate(y, np.full((20, 4), 0.25))
    np.testing.assert_allclose(r.avg_probability, 0.25)
    assert r.accuracy == 0.25  # argmax ties resolve to class 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 60))
def test_invariants(seed, n):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 4, n)
    P = rng.dirichlet(np.ones(4), n)
    r = evaluate(y, P)
    assert r.binary_accuracy >= r.accuracy
    assert r.f1_micro == pytest.approx(r.accuracy, abs=1e-15)
    assert r.confusion.sum(axis=1).tolist() == np.bincount(y, minlength=4).tolist()
    for c in range(4):
        row = r.avg_probability[c]
        if (y == c).any():
            assert abs(math.fsum(row) - 1.0) <= 1e-9
        else:
            assert np.isnan(row).all()


def test_absent_class_rows_are_nan_in_tables():
    r = evaluate([0, 0, 1], np.eye(4)[[0, 1, 1]])
    assert r.balanced_accuracy == pytest.approx(0.75)
    rows = report_tables([r])["avg_prob_matrix"]
    assert rows[2]["SURVIVED"] == "" and rows[0]["SURVIVED"] == pytest.approx(0.5)


@pytest.mark.parametrize(
    "y, P",
    [([0, 1], np.eye(4)[[0]]), ([], np.zeros((0, 4))), ([0], [[0.5, 0.6, 0.0, 0.0]]), ([5], np.eye(4)[[0]]), ([0], [[-0.1, 1.1, 0, 0]])],
)
def test_invalid_inputs(y, P):
    with pytest.raises(MetricsError):
        evaluate(y, P)


SCHEMA = [("line_7_rho", "line", 7), ("line_7_p_or", "line", 7), ("line_7_status", "line", 7), ("gen_0_p", "gen", 0), ("agent", "global", 0)]


def test_aggregate_importance_mean():
    imp = aggregate_importance({"line_7_rho": 6.0, "line_7_p_or": 3.0, "line_7_status": 0.0}, SCHEMA)
    assert imp.rows[0]["mean_gain"] == 3.0 and imp.rows[0]["n_features"] == 3


def test_aggregate_importance_zero_and_single():
    imp = aggregate_importance({"line_7_rho": 0.0, "line_7_p_or": 0.0, "line_7_status": 0.0, "gen_0_p": 2.5}, SCHEMA)
    by = {(r["element_type"], r["element_id"]): r for r in imp.rows}
    assert by[("line", 7)]["mean_gain"] == 0.0
    assert by[("gen", 0)]["mean_gain"] == 2.5 and by[("gen", 0)]["n_features"] == 1


def test_aggregate_importance_unmapped():
    with pytest.raises(MetricsError, match="not mapped"):
        aggregate_importance({"mystery": 1.0}, SCHEMA)


def test_element_ranking_with_grid(grid):
    from gridfail.dataset import feature_schema, feature_names

    names = feature_names(grid)
    gains = {n: (5.0 if n.startswith("line_4_") else 0.0) for n in names}
    imp = aggregate_importance(gains, feature_schema(grid), grid)
    top = imp.top("line", 1)[0]
    assert top["element_id"] == 4 and (top["or_sub"], top["ex_sub"]) == tuple(grid.line_endpoints[4])
    table = imp.table(top_k=2)
    assert [r["rank"] for r in table if r["element_type"] == "line"] == [1, 2]


def test_feature_table():
    rows = feature_importance_table([("a", 3.0), ("b", 1.0)], top_k=1)
    assert rows == [{"rank": 1, "feature": "a", "gain": 3.0}]
