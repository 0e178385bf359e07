"""Forecasting samples: featurization, sampling rules, chronic splits and persistence."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridfail.dataset import (
    DatasetError,
    Label,
    SampleSet,
    build_dataset,
    chronic_counts,
    feature_names,
    featurize_observation,
    featurize_steps,
    leakage_report,
    read_feature_schema,
    read_samples,
    split_by_chronic,
    survived_candidates,
    write_feature_schema,
    write_samples,
)

from conftest import make_episode


def _rising(t):
    # rho_max grows with t so the quantile rule has something to select
    return {"rho": [0.3 + 0.01 * t, 0.2]}


def test_feature_vector_length(schema, grid):
    for s in (schema, grid):
        expected = 7 * s.n_lines + s.n_generators + s.n_loads + s.n_substations + 4 + 1
        assert len(feature_names(s)) == expected
    e = make_episode(3)
    assert featurize_observation(e.observations[1], e, schema).shape == (len(feature_names(schema)),)


def test_step_zero_has_no_changed_flags(schema):
    e = make_episode(3, per_step=lambda t: {"sub_topology": [0, t, 0]})
    names = feature_names(schema)
    flags = [i for i, n in enumerate(names) if n.endswith("_changed")]
    assert (featurize_observation(e.observations[0], e, schema)[flags] == 0).all()
    assert featurize_observation(e.observations[2], e, schema)[flags].tolist() == [0, 1, 0]


def test_single_field_difference(grid, small_corpus):
    e = small_corpus.episodes[0]
    o = e.observations[5]
    from dataclasses import replace

    rho = o.rho.copy()
    rho[5] += 0.25
    a = featurize_observation(o, e, grid)
    b = featurize_observation(replace(o, rho=rho), e, grid)
    diff = np.flatnonzero(a != b)
    assert [feature_names(grid)[i] for i in diff] == ["line_5_rho"]


def test_featurize_steps_matches_observations(grid, small_corpus):
    e = small_corpus.episodes[1]
    steps = [0, 3, len(e) - 1]
    M = featurize_steps(e, grid, steps)
    for row, t in zip(M, steps):
        np.testing.assert_array_equal(row, featurize_observation(e.observations[t], e, grid))


def test_failure_samples_and_survived_window(schema):
    e = make_episode(10, failed_step=10, per_step=_rising)
    ds = build_dataset([e], schema, seed=0, high_rho_quantile=0.0)
    fail = ds.subset(ds.y != Label.SURVIVED)
    assert sorted(fail.source_step.tolist()) == [5, 7, 9]
    assert dict(zip(fail.source_step.tolist(), fail.y.tolist())) == {9: 3, 7: 2, 5: 1}
    assert set(survived_candidates(e, 6, 0.0).tolist()) == {0, 1, 2, 3, 4}
    surv = ds.subset(ds.y == Label.SURVIVED)
    assert len(surv) == 3 and (surv.source_step <= 4).all()


def test_short_failure_has_no_n_minus_5(schema):
    ds = build_dataset([make_episode(4, failed_step=4)], schema, seed=0)
    labels = set(ds.y.tolist())
    assert Label.N_MINUS_5 not in labels
    assert sorted(ds.subset(ds.y != 0).source_step.tolist()) == [1, 3]


def test_quantile_rule(schema):
    e = make_episode(40, per_step=_rising)
    c = survived_candidates(e, 6, 0.75)
    assert c.min() >= 29 and c.max() == 39


def test_no_failures_is_an_error(schema):
    with pytest.raises(DatasetError):
        build_dataset([make_episode(5)], schema, seed=0)
    with pytest.raises(DatasetError):
        build_dataset([], schema, seed=0)


@pytest.fixture(scope="module")
def corpus_samples(small_corpus, grid):
    return build_dataset(small_corpus.episodes, grid, seed=0)


def test_class_proportions(corpus_samples):
    frac = corpus_samples.class_fractions()
    assert frac[0] == pytest.approx(0.5, abs=0.01)
    assert frac[1:] == pytest.approx([1 / 6] * 3, abs=0.01)


def test_sample_rules_against_raw_log(corpus_samples, small_corpus, grid):
    eps = {e.key: e for e in small_corpus.episodes}
    for i in range(len(corpus_samples)):
        e = eps[(corpus_samples.chronic_id[i], corpus_samples.agent[i], int(corpus_samples.seed[i]))]
        step = int(corpus_samples.source_step[i])
        lab = int(corpus_samples.y[i])
        if lab == Label.N_MINUS_1:
            assert step == len(e) - 1
            np.testing.assert_array_equal(corpus_samples.X[i], featurize_observation(e.observations[-1], e, grid))
        elif lab == Label.SURVIVED and e.failed:
            assert e.termination.failed_step - step >= 6


def test_dataset_is_deterministic(small_corpus, grid, corpus_samples):
    again = build_dataset(list(reversed(small_corpus.episodes)), grid, seed=0)
    np.testing.assert_array_equal(again.X, corpus_samples.X)
    other = build_dataset(small_corpus.episodes, grid, seed=1)
    assert not np.array_equal(other.source_step, corpus_samples.source_step)


def _fake_samples(n_chronics, per=4):
    n = n_chronics * per
    return SampleSet(
        ["f"],
        np.arange(n, dtype=float)[:, None],
        np.zeros(n, dtype=np.int64),
        np.array([f"c{i // per}" for i in range(n)], dtype=object),
        np.array(["SENIOR"] * n, dtype=object),
        np.zeros(n, dtype=np.int64),
        np.zeros(n, dtype=np.int64),
    )


def test_ten_chronics_split_8_1_1():
    split = split_by_chronic(_fake_samples(10), (0.8, 0.1, 0.1), seed=3)
    assert [len(split.chronics[k]) for k in ("train", "val", "test")] == [8, 1, 1]
    again = split_by_chronic(_fake_samples(10), (0.8, 0.1, 0.1), seed=3)
    assert split.chronics == again.chronics


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 40), st.integers(0, 1000))
def test_split_has_no_leakage(n, seed):
    s = _fake_samples(n)
    split = split_by_chronic(s, (0.6, 0.2, 0.2), seed=seed)
    assert leakage_report(split) == []
    assert sum(len(p) for p in split.parts().values()) == len(s)
    assert all(len(p) > 0 for p in split.parts().values())


def test_split_errors():
    with pytest.raises(DatasetError):
        split_by_chronic(_fake_samples(2), (0.8, 0.1, 0.1))
    with pytest.raises(DatasetError):
        split_by_chronic(_fake_samples(5), (0.8, 0.1, 0.2))
    s = _fake_samples(5)
    with pytest.raises(DatasetError, match="overlap"):
        split_by_chronic(s, ood=s.subset(s.chronic_id == "c0"))


def test_leakage_report_flags_shared_chronic():
    split = split_by_chronic(_fake_samples(6), seed=0)
    split.test = SampleSet.concat([split.test, split.train.subset(np.arange(1))])
    assert leakage_report(split)


@pytest.mark.parametrize("n, fractions, expected", [(10, (0.8, 0.1, 0.1), [8, 1, 1]), (3, (0.8, 0.1, 0.1), [1, 1, 1]), (7, (0.5, 0.25, 0.25), [3, 2, 2])])
def test_chronic_counts(n, fractions, expected):
    assert chronic_counts(n, fractions) == expected


def test_samples_and_schema_roundtrip(corpus_samples, grid, tmp_path):
    write_samples(corpus_samples, tmp_path / "d.csv")
    back = read_samples(tmp_path / "d.csv", expected_names=feature_names(grid))
    np.testing.assert_array_equal(back.X, corpus_samples.X)
    for f in ("y", "chronic_id", "agent", "seed", "source_step"):
        assert getattr(back, f).tolist() == getattr(corpus_samples, f).tolist()
    write_feature_schema(grid, tmp_path / "fs.json")
    fs = read_feature_schema(tmp_path / "fs.json")
    assert [n for n, _, _ in fs] == feature_names(grid)
    with pytest.raises(DatasetError, match="do not match"):
        read_samples(tmp_path / "d.csv", expected_names=["x"])
