"""Command-line entry point: ``gridfail <subcommand>``."""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import cluster as clu
from . import dataset as ds
from . import metrics as met
from . import store, synth, trees, tuner
from .config import ConfigError, PipelineConfig, load_config, reference_text
from .episode import validate_episode
from .features import FailureFeatureRow, FeatureError, correlation_matrix, extract_failure_row

log = logging.getLogger("gridfail")

EXIT_OK, EXIT_MISSING, EXIT_CONFIG, EXIT_VALIDATION = 0, 2, 3, 4


class MissingInput(Exception):
    pass


class ValidationFailure(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _out(cfg: PipelineConfig, name: str) -> str:
    return os.path.join(cfg.paths.output_dir, name)


def _require(path: str) -> str:
    if not os.path.exists(path):
        raise MissingInput(f"missing input: {path}")
    return path


def _pool_map(fn, items, workers: int):
    items = list(items)
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))
    return [fn(i) for i in items]


def _write_table(cfg, name, rows, columns=None) -> None:
    store.write_table(rows, _out(cfg, name), columns=columns)
    log.info("wrote %s", name)


def _episode_name(chronic_id: str, agent: str, seed: int) -> str:
    return f"{chronic_id}__{agent}__{seed}.epis"


def _gbdt_config(params: dict) -> trees.GbdtConfig:
    try:
        c = trees.GbdtConfig(**params)
        c.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"learner.gbdt: {exc}") from None
    return c


def _forest_config(params: dict) -> trees.ForestConfig:
    try:
        c = trees.ForestConfig(**params)
        c.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"learner.random_forest: {exc}") from None
    return c


# ---------------------------------------------------------------- synth


def _synth_one(job):
    cfg, directory = job
    e = synth.generate_episode(cfg)
    name = _episode_name(e.chronic_id, e.agent, e.seed)
    nbytes = store.write_episode(e, os.path.join(directory, name), cfg.schema)
    return {
        "file": name,
        "chronic_id": e.chronic_id,
        "agent": e.agent,
        "seed": e.seed,
        "planted_mode": cfg.planted_failure_mode.value,
        "outcome": e.termination.outcome.value,
        "failed_step": e.termination.failed_step if e.failed else -1,
        "error_type": e.termination.error_type.value,
        "bytes": nbytes,
    }


def _synth_corpus(cfg: PipelineConfig, directory: str, n_chronics: int, salt: str, load_scale: float, prefix: str):
    sc = cfg.synth
    base = synth.SynthConfig(
        seed=sc.seed,
        horizon=sc.horizon,
        attacks_per_day=sc.attacks_per_day,
        load_scale=load_scale,
        chronic_salt=salt,
    )
    try:
        cfgs = synth.corpus_configs(base, n_chronics, sc.n_seeds, sc.agents, sc.mode_mix, chronic_prefix=prefix)
    except ValueError as exc:
        raise ConfigError(f"synth: {exc}") from None
    os.makedirs(directory, exist_ok=True)
    rows = _pool_map(_synth_one, [(c, directory) for c in cfgs], cfg.workers)
    store.write_schema(base.schema, os.path.join(directory, "schema.json"))
    store.write_table(rows, os.path.join(directory, "corpus_manifest.csv"))
    n_failed = sum(r["outcome"] == "FAILED" for r in rows)
    log.info("%s: %d episodes, %d failed", directory, len(rows), n_failed)
    return rows


def cmd_synth(cfg: PipelineConfig) -> None:
    sc = cfg.synth
    _synth_corpus(cfg, cfg.paths.corpus_dir, sc.n_chronics, "train", sc.load_scale, "chronic")
    if sc.ood_chronics > 0:
        _synth_corpus(cfg, os.path.join(cfg.paths.corpus_dir, "ood"), sc.ood_chronics, sc.ood_salt, sc.ood_load_scale, "ood")


# ---------------------------------------------------------------- corpus loading


def _corpus_files(directory: str) -> list[str]:
    manifest = _require(os.path.join(directory, "corpus_manifest.csv"))
    files = [os.path.join(directory, str(r["file"])) for r in store.iter_table(manifest)]
    for f in files:
        _require(f)
    return files


def _schema(directory: str):
    return store.read_schema(_require(os.path.join(directory, "schema.json")))


def _check_file(args):
    path, schema = args
    try:
        e = store.read_episode(path)
    except store.StoreError as exc:
        return {"file": os.path.basename(path), "ok": 0, "n_observations": 0, "outcome": "", "problems": str(exc)}
    report = validate_episode(e, schema)
    problems = "; ".join(f"{v.step}:{v.message}" if v.step is not None else v.message for v in report.violations)
    return {
        "file": os.path.basename(path),
        "ok": int(report.ok),
        "n_observations": len(e),
        "outcome": e.termination.outcome.value,
        "problems": problems,
    }


def _read(path):
    return store.read_episode(path)


class Corpus:
    """Episodes of one corpus directory, read once per process."""

    def __init__(self, directory: str, workers: int):
        self.directory = directory
        self.schema = _schema(directory)
        self.files = _corpus_files(directory)
        self.workers = workers
        self._episodes = None

    @property
    def episodes(self):
        if self._episodes is None:
            try:
                self._episodes = _pool_map(_read, self.files, self.workers)
            except store.StoreError as exc:
                raise ValidationFailure(str(exc)) from None
        return self._episodes


def _ood_dir(cfg) -> str | None:
    d = os.path.join(cfg.paths.corpus_dir, "ood")
    return d if os.path.exists(os.path.join(d, "corpus_manifest.csv")) else None


def cmd_ingest(cfg: PipelineConfig, ctx: dict | None = None) -> None:
    rows = []
    for directory in [cfg.paths.corpus_dir] + ([_ood_dir(cfg)] if _ood_dir(cfg) else []):
        schema = _schema(directory)
        files = _corpus_files(directory)
        part = _pool_map(_check_file, [(f, schema) for f in files], cfg.workers)
        rel = os.path.relpath(directory, cfg.paths.corpus_dir)
        for r in part:
            r["file"] = r["file"] if rel == "." else f"{rel}/{r['file']}"
        rows += part
    os.makedirs(cfg.paths.output_dir, exist_ok=True)
    _write_table(cfg, "ingest_report.csv", rows, ["file", "ok", "n_observations", "outcome", "problems"])
    bad = [r["file"] for r in rows if not r["ok"]]
    if bad:
        raise ValidationFailure(f"{len(bad)} invalid episode file(s), first: {bad[0]}")


# ---------------------------------------------------------------- features and clusters


def cmd_features(cfg: PipelineConfig, ctx: dict | None = None) -> None:
    corpus = _corpus(cfg, ctx)
    rows = []
    for e in sorted(corpus.episodes, key=lambda e: e.key):
        if e.failed and len(e):
            try:
                rows.append(extract_failure_row(e, corpus.schema, cfg.features.tracked_line, cfg.features.tracked_gen))
            except FeatureError as exc:
                raise ValidationFailure(str(exc)) from None
    if not rows:
        raise ValidationFailure("corpus contains no failed episode")
    os.makedirs(cfg.paths.output_dir, exist_ok=True)
    _write_table(cfg, "failure_features.csv", [r.to_dict() for r in rows])
    if len(rows) >= 3:
        _write_table(cfg, "correlation_matrix.csv", correlation_matrix(rows).table())


def _corpus(cfg, ctx) -> Corpus:
    if ctx is not None and "corpus" in ctx:
        return ctx["corpus"]
    c = Corpus(cfg.paths.corpus_dir, cfg.workers)
    if ctx is not None:
        ctx["corpus"] = c
    return c


def _failure_rows(cfg) -> list[FailureFeatureRow]:
    path = _require(_out(cfg, "failure_features.csv"))
    try:
        return [FailureFeatureRow.from_dict(r) for r in store.iter_table(path)]
    except (KeyError, ValueError) as exc:
        raise ValidationFailure(f"{path}: {exc}") from None


def cmd_cluster(cfg: PipelineConfig, ctx: dict | None = None) -> None:
    cc = cfg.cluster
    rows = _failure_rows(cfg)
    try:
        pca = clu.pca_fit(rows, cc.variance_threshold)
    except clu.ClusterError as exc:
        raise ValidationFailure(str(exc)) from None
    P = clu.pca_transform(pca, rows)
    k_hi = min(cc.k_max, len(rows))
    if k_hi < cc.k_min:
        raise ValidationFailure(f"only {len(rows)} failures, cannot try k >= {cc.k_min}")
    sel = clu.select_k(P, range(cc.k_min, k_hi + 1), seed=cc.seed, n_restarts=cc.n_restarts)
    k = cc.k if cc.k is not None else sel.k
    model = sel.models[k] if k in sel.models else clu.kmeans_fit(P, k, cc.seed, cc.n_restarts)
    names = cc.names if cc.names else None
    if names is not None and len(names) < k:
        raise ConfigError(f"cluster.names has {len(names)} labels for k={k}")
    profile = clu.profile_clusters(rows, model.labels, names)
    label_of = profile.names
    _write_table(cfg, "pca_components.csv", pca.table())
    _write_table(cfg, "k_selection.csv", [{**r, "chosen": int(r["k"] == k)} for r in sel.table])
    assign = [
        {"chronic_id": r.chronic_id, "agent": r.agent, "seed": r.seed, "cluster": label_of[int(c)], **{f"pc{j + 1}": float(v) for j, v in enumerate(p)}}
        for r, c, p in zip(rows, model.labels, P)
    ]
    _write_table(cfg, "cluster_assignments.csv", assign)
    _write_table(cfg, "cluster_means.csv", profile.means)
    _write_table(cfg, "cluster_agents.csv", profile.agent_counts)
    _write_table(cfg, "cluster_survival.csv", profile.survival)
    _write_table(cfg, "cluster_error_types.csv", profile.error_types)
    _write_table(cfg, "cluster_chi_square.csv", profile.chi_square_table())
    _write_table(cfg, "cluster_coordinates.csv", clu.cluster_coordinates(rows, model.labels, label_of))


# ---------------------------------------------------------------- dataset


SPLIT_FILES = {"train": "dataset_train.csv", "val": "dataset_val.csv", "test": "dataset_test.csv", "ood": "dataset_ood.csv"}


def cmd_build_dataset(cfg: PipelineConfig, ctx: dict | None = None) -> None:
    dc = cfg.dataset
    corpus = _corpus(cfg, ctx)
    kw = dict(
        seed=dc.seed,
        survived_per_failure=dc.survived_per_failure,
        min_gap=dc.min_gap,
        high_rho_quantile=dc.high_rho_quantile,
        survived_sources=dc.survived_sources,
    )
    try:
        samples = ds.build_dataset(corpus.episodes, corpus.schema, **kw)
        ood = None
        if _ood_dir(cfg):
            oc = Corpus(_ood_dir(cfg), cfg.workers)
            ood = ds.build_dataset(oc.episodes, oc.schema, **kw)
        split = ds.split_by_chronic(samples, tuple(dc.fractions), dc.seed, ood=ood)
    except ds.DatasetError as exc:
        raise ValidationFailure(str(exc)) from None
    leaks = ds.leakage_report(split)
    if leaks:
        raise ValidationFailure("chronic leakage between splits: " + "; ".join(leaks))
    os.makedirs(cfg.paths.output_dir, exist_ok=True)
    summary = []
    for name, part in split.parts().items():
        ds.write_samples(part, _out(cfg, SPLIT_FILES[name]))
        fr = part.class_fractions()
        summary.append({
            "split": name,
            "n": len(part),
            "n_chronics": len(part.chronics()),
            **{f"frac_{ln}": float(f) for ln, f in zip(ds.LABEL_NAMES, fr)},
        })
    ds.write_feature_schema(corpus.schema, _out(cfg, "feature_schema.json"))
    store.write_schema(corpus.schema, _out(cfg, "grid_schema.json"))
    _write_table(cfg, "dataset_summary.csv", summary)


def _load_split(cfg, name: str) -> ds.SampleSet:
    names = [n for n, _, _ in ds.read_feature_schema(_require(_out(cfg, "feature_schema.json")))]
    try:
        return ds.read_samples(_require(_out(cfg, SPLIT_FILES[name])), names)
    except (ds.DatasetError, store.ParseError) as exc:
        raise ValidationFailure(str(exc)) from None


# ---------------------------------------------------------------- learning


def _fit(cfg: PipelineConfig, train: ds.SampleSet, val: ds.SampleSet | None, params: dict):
    n_classes = len(ds.Label)
    if cfg.learner.kind == "gbdt":
        gc = _gbdt_config({**cfg.learner.gbdt, **params})
        return trees.fit_gbdt(
            train.X, train.y, gc, n_classes,
            X_val=val.X if val is not None and len(val) else None,
            y_val=val.y if val is not None and len(val) else None,
            feature_names=train.feature_names,
        )
    fc = _forest_config({**cfg.learner.random_forest, **params})
    return trees.fit_random_forest(train.X, train.y, fc, n_classes, feature_names=train.feature_names)


def cmd_tune(cfg: PipelineConfig, ctx: dict | None = None) -> None:
    tc = cfg.tune
    train, val = _load_split(cfg, "train"), _load_split(cfg, "val")
    try:
        space = {k: tuner.parse_domain(v) for k, v in tc.space.items()}
    except tuner.SpaceError as exc:
        raise ConfigError(f"tune.space: {exc}") from None

    def objective(params):
        m = _fit(cfg, train, val, params)
        return float(np.mean(trees.predict(m, val.X) == val.y))

    res = tuner.tpe_optimize(space, objective, tc.n_trials, seed=tc.seed, n_startup=tc.n_startup, gamma=tc.gamma, n_candidates=tc.n_candidates)
    _write_table(cfg, "tune_history.csv", res.table(list(space)))
    if res.best_config is None:
        raise ValidationFailure("every tuning trial failed")
    store.write_json({"params": res.best_config, "objective": res.best_objective}, _out(cfg, "tuned_params.json"))


def cmd_train(cfg: PipelineConfig, ctx: dict | None = None) -> None:
    train = _load_split(cfg, "train")
    val = _load_split(cfg, "val") if os.path.exists(_out(cfg, SPLIT_FILES["val"])) else None
    params = {}
    if cfg.learner.use_tuned:
        params = dict(store.read_json(_require(_out(cfg, "tuned_params.json")))["params"])
    try:
        model = _fit(cfg, train, val, params)
    except trees.TrainError as exc:
        raise ValidationFailure(str(exc)) from None
    trees.save_model(model, _out(cfg, "model.model"))
    _write_table(cfg, "train_log.csv", model.train_log or [{"round": 0, "train_loss": ""}])


def cmd_eval(cfg: PipelineConfig, ctx: dict | None = None) -> None:
    model = trees.load_model(_require(_out(cfg, "model.model")))
    reports = []
    for name in ("test", "ood"):
        path = _out(cfg, SPLIT_FILES[name])
        if name == "ood" and not os.path.exists(path):
            continue
        part = _load_split(cfg, name)
        if not len(part):
            continue
        proba = trees.predict_proba(model, part.X, part.feature_names)
        reports.append(met.evaluate(part.y, proba, split=name))
    tables = met.report_tables(reports)
    _write_table(cfg, "eval_report.csv", tables["eval_report"])
    _write_table(cfg, "avg_prob_matrix.csv", tables["avg_prob_matrix"])
    _write_table(cfg, "confusion_matrix.csv", tables["confusion"])


def cmd_importance(cfg: PipelineConfig, ctx: dict | None = None) -> None:
    model = trees.load_model(_require(_out(cfg, "model.model")))
    fschema = ds.read_feature_schema(_require(_out(cfg, "feature_schema.json")))
    grid = store.read_schema(_require(_out(cfg, "grid_schema.json")))
    ranked = trees.feature_importance(model)
    _write_table(cfg, "importance_features.csv", met.feature_importance_table(ranked, cfg.report.top_k))
    try:
        elems = met.aggregate_importance(ranked, fschema, grid)
    except met.MetricsError as exc:
        raise ValidationFailure(str(exc)) from None
    _write_table(cfg, "importance_elements.csv", elems.table(cfg.report.top_elements))


# ---------------------------------------------------------------- report-all


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(cfg: PipelineConfig) -> list[dict]:
    rows = []
    for name in sorted(os.listdir(cfg.paths.output_dir)):
        path = _out(cfg, name)
        if name == "manifest.csv" or not os.path.isfile(path):
            continue
        rows.append({"file": name, "bytes": os.path.getsize(path), "sha256": sha256_file(path)})
    _write_table(cfg, "manifest.csv", rows, ["file", "bytes", "sha256"])
    return rows


def cmd_report_all(cfg: PipelineConfig) -> None:
    os.makedirs(cfg.paths.output_dir, exist_ok=True)
    ctx: dict = {}
    _corpus(cfg, ctx)  # fail early on a missing corpus
    # runtime knobs (workers, paths) cannot change results and are left out
    settings = {k: v for k, v in cfg.to_dict().items() if k not in ("workers", "paths")}
    store.write_json(settings, _out(cfg, "resolved_config.json"))
    cmd_ingest(cfg, ctx)
    cmd_features(cfg, ctx)
    cmd_cluster(cfg, ctx)
    cmd_build_dataset(cfg, ctx)
    ctx.pop("corpus", None)
    if cfg.tune.enabled:
        cmd_tune(cfg, ctx)
        cfg = replace(cfg, learner=replace(cfg.learner, use_tuned=True))
    cmd_train(cfg, ctx)
    cmd_eval(cfg, ctx)
    cmd_importance(cfg, ctx)
    write_manifest(cfg)


COMMANDS = {
    "synth": (cmd_synth, "generate the synthetic training corpus (and OOD corpus) into paths.corpus_dir"),
    "ingest": (cmd_ingest, "validate every episode file; writes ingest_report.csv"),
    "features": (cmd_features, "failure descriptors and their correlation matrix"),
    "cluster": (cmd_cluster, "PCA, k selection, k-means and cluster profile tables"),
    "build-dataset": (cmd_build_dataset, "forecasting samples split by chronic into dataset_{train,val,test,ood}.csv"),
    "train": (cmd_train, "fit the configured learner; writes model.model and train_log.csv"),
    "tune": (cmd_tune, "TPE search over tune.space; writes tune_history.csv and tuned_params.json"),
    "eval": (cmd_eval, "metrics on test (and OOD) splits"),
    "importance": (cmd_importance, "feature and grid-element gain importance"),
    "report-all": (cmd_report_all, "run ingest through importance and write manifest.csv with sha256 hashes"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (default: $GRIDFAIL_CONFIG, else built-in defaults)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override one config key, e.g. --set dataset.seed=3")
    common.add_argument("--workers", type=int, help="shortcut for --set workers=N")
    common.add_argument("--corpus-dir", help="shortcut for --set paths.corpus_dir=DIR")
    common.add_argument("--output-dir", help="shortcut for --set paths.output_dir=DIR")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    epilog = (
        "exit codes: 0 success, 2 missing input file, 3 config error, 4 data validation failure\n\n"
        + reference_text()
    )
    p = argparse.ArgumentParser(
        prog="gridfail",
        description="Failure analytics for power-grid control episodes.",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        parents=[common],
    )
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, (_, text) in COMMANDS.items():
        sub.add_parser(name, help=text, description=text, parents=[common], epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = list(args.overrides)
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    if args.corpus_dir:
        overrides.append(f"paths.corpus_dir={args.corpus_dir}")
    if args.output_dir:
        overrides.append(f"paths.output_dir={args.output_dir}")
    try:
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command][0](cfg)
    except MissingInput as exc:
        print(f"gridfail: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"gridfail: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValidationFailure as exc:
        print(f"gridfail: validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
