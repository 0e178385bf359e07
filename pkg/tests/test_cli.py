"""CLI: exit codes, help text and a small end-to-end pipeline."""
import os

import pytest

from gridfail.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, EXIT_VALIDATION, main
from gridfail.config import describe_keys

SMALL = [
    "--set", "synth.n_chronics=6",
    "--set", "synth.horizon=400",
    "--set", "synth.ood_chronics=3",
    "--set", "cluster.k_max=4",
    "--set", "learner.gbdt={n_rounds: 5}",
]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--corpus-dir", str(d), *SMALL]) == EXIT_OK
    return d


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for key, _, _ in describe_keys():
        assert key in out
    assert "report-all" in out and "exit codes" in out


def test_missing_dataset_exits_2(tmp_path, capsys):
    assert main(["train", "--output-dir", str(tmp_path)]) == EXIT_MISSING
    assert "missing input" in capsys.readouterr().err


def test_missing_corpus_exits_2(tmp_path):
    assert main(["ingest", "--corpus-dir", str(tmp_path / "nope")]) == EXIT_MISSING


def test_unknown_key_exits_3(tmp_path, capsys):
    assert main(["train", "--set", "learner.colour=red"]) == EXIT_CONFIG
    assert "unknown config key: learner.colour" in capsys.readouterr().err


def test_corrupt_episode_exits_4(corpus, tmp_path):
    import shutil

    bad = tmp_path / "corpus"
    shutil.copytree(corpus, bad)
    victim = sorted(p for p in bad.iterdir() if p.name.startswith("chronic"))[0]
    victim.write_text(victim.read_text()[:200])
    assert main(["features", "--corpus-dir", str(bad), "--output-dir", str(tmp_path / "o"), *SMALL]) == EXIT_VALIDATION


def test_ingest_reports_problem_rows(corpus, tmp_path):
    from gridfail.store import read_table

    assert main(["ingest", "--corpus-dir", str(corpus), "--output-dir", str(tmp_path), *SMALL]) == EXIT_OK
    rows = read_table(tmp_path / "ingest_report.csv")
    assert len(rows) == 3 * 9 and all(int(r["ok"]) == 1 for r in rows)


def _outputs(d):
    return {p: (d / p).read_bytes() for p in sorted(os.listdir(d))}


def test_report_all_is_deterministic(corpus, tmp_path):
    runs = []
    for i, workers in enumerate(["1", "2", "1"]):
        out = tmp_path / f"out{i}"
        assert main(["report-all", "--corpus-dir", str(corpus), "--output-dir", str(out), "--workers", workers, *SMALL]) == EXIT_OK
        runs.append(_outputs(out))
    assert runs[0] == runs[1] == runs[2]
    for name in ("manifest.csv", "eval_report.csv", "model.model", "k_selection.csv", "importance_elements.csv", "dataset_ood.csv"):
        assert name in runs[0]


def test_steps_run_individually_with_tuning(corpus, tmp_path):
    args = ["--corpus-dir", str(corpus), "--output-dir", str(tmp_path), *SMALL, "--set", "tune.n_trials=3", "--set", "tune.n_startup=2"]
    for step in ("build-dataset", "tune", "train", "eval", "importance"):
        assert main([step, *args]) == EXIT_OK, step
    assert (tmp_path / "tuned_params.json").exists()
    assert main(["train", *args, "--set", "learner.use_tuned=true", "--set", "learner.kind=random_forest"]) == EXIT_CONFIG
