"""Pipeline configuration: nested dataclasses, strict loading, self-documenting keys."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import yaml

from .episode import DEFAULT_HORIZON

CONFIG_ENV = "GRIDFAIL_CONFIG"


class ConfigError(ValueError):
    pass


def _doc(text: str, default=dataclasses.MISSING, factory=dataclasses.MISSING):
    if factory is not dataclasses.MISSING:
        return field(default_factory=factory, metadata={"doc": text})
    return field(default=default, metadata={"doc": text})


DEFAULT_MODE_MIX = {
    "TOPO_DRIFT": 0.39,
    "LOAD_DROP": 0.23,
    "LINE_CASCADE": 0.30,
    "GEN_SURGE": 0.01,
    "FLOW_SURGE": 0.07,
}


@dataclass
class PathsSection:
    corpus_dir: str = _doc("directory holding episode files, schema.json and corpus_manifest.csv", "corpus")
    output_dir: str = _doc("directory receiving every report, dataset and model", "out")


@dataclass
class SynthSection:
    seed: int = _doc("base seed for the corpus (episode seeds derive from it)", 1)
    n_chronics: int = _doc("number of chronics (scenarios) in the training corpus", 20)
    n_seeds: int = _doc("simulation seeds per chronic and agent", 1)
    agents: list = _doc("agents to simulate (DO_NOTHING, SENIOR, TOPOLOGY)", factory=lambda: ["DO_NOTHING", "SENIOR", "TOPOLOGY"])
    mode_mix: dict = _doc("fraction of episodes per planted failure mode; must sum to 1", factory=lambda: dict(DEFAULT_MODE_MIX))
    horizon: int = _doc("episode length in 5-minute steps", DEFAULT_HORIZON)
    attacks_per_day: float = _doc("expected adversarial line attacks per simulated day", 0.0)
    load_scale: float = _doc("multiplier on every load profile", 1.0)
    ood_chronics: int = _doc("chronics in the out-of-distribution corpus (0 disables it)", 5)
    ood_salt: str = _doc("salt that makes OOD chronics distinct scenarios", "ood")
    ood_load_scale: float = _doc("load multiplier applied to the OOD corpus", 1.05)


@dataclass
class FeaturesSection:
    tracked_line: int | None = _doc("line id whose disconnection sets flag_attack_line (null disables)", None)
    tracked_gen: int | None = _doc("generator id whose relative change is reported (null disables)", None)


@dataclass
class ClusterSection:
    variance_threshold: float = _doc("keep principal components explaining at least this variance ratio", 0.05)
    k_min: int = _doc("smallest k tried by model selection", 2)
    k_max: int = _doc("largest k tried by model selection", 10)
    k: int | None = _doc("force this k instead of the silhouette argmax (null = automatic)", None)
    seed: int = _doc("k-means seed", 0)
    n_restarts: int = _doc("k-means++ restarts per k", 10)
    names: list = _doc("labels for clusters in centroid order (empty = cluster_i)", factory=list)


@dataclass
class DatasetSection:
    seed: int = _doc("sampling and split seed", 0)
    survived_per_failure: int = _doc("SURVIVED samples per failed episode (3 gives a 50% share)", 3)
    min_gap: int = _doc("minimum distance in steps between a SURVIVED sample and the failure", 6)
    high_rho_quantile: float = _doc("per-episode rho_max quantile a SURVIVED sample must reach", 0.75)
    survived_sources: str = _doc("where SURVIVED samples come from: both, failed or survived episodes", "both")
    fractions: list = _doc("train/validation/test chronic fractions", factory=lambda: [0.8, 0.1, 0.1])


@dataclass
class LearnerSection:
    kind: str = _doc("gbdt or random_forest", "gbdt")
    use_tuned: bool = _doc("train with tuned_params.json from the tune step when present", False)
    gbdt: dict = _doc(
        "GBDT hyperparameters: n_rounds, learning_rate, growth (leaf_wise|level_wise), max_leaves, max_depth, "
        "n_bins, l2_lambda, min_child_weight, row_subsample, feature_subsample, seed, early_stopping_rounds",
        factory=lambda: {"n_rounds": 100, "learning_rate": 0.1, "early_stopping_rounds": 20},
    )
    random_forest: dict = _doc(
        "forest hyperparameters: n_trees, max_depth, feature_subsample (0 = sqrt), min_samples_leaf, n_bins, seed",
        factory=lambda: {"n_trees": 100, "max_depth": 12},
    )


@dataclass
class TuneSection:
    enabled: bool = _doc("run the tune step inside report-all", False)
    n_trials: int = _doc("TPE trials", 20)
    n_startup: int = _doc("random trials before the density model is used", 10)
    gamma: float = _doc("fraction of trials treated as good", 0.25)
    n_candidates: int = _doc("candidates scored per TPE step", 24)
    seed: int = _doc("tuner seed", 0)
    space: dict = _doc(
        "search space: name -> {uniform|loguniform: [lo, hi]} | {int: [lo, hi]} | {choice: [...]}",
        factory=lambda: {
            "learning_rate": {"loguniform": [0.02, 0.3]},
            "max_leaves": {"int": [8, 63]},
            "l2_lambda": {"loguniform": [0.1, 10.0]},
        },
    )


@dataclass
class ReportSection:
    top_k: int = _doc("features listed in importance_features.csv", 30)
    top_elements: int = _doc("elements listed per type in importance_elements.csv", 10)


@dataclass
class PipelineConfig:
    workers: int = _doc("worker processes for simulation and episode loading (output is identical for any value)", 1)
    paths: PathsSection = _doc("file locations", factory=PathsSection)
    synth: SynthSection = _doc("synthetic corpus generation", factory=SynthSection)
    features: FeaturesSection = _doc("failure descriptor options", factory=FeaturesSection)
    cluster: ClusterSection = _doc("PCA and k-means options", factory=ClusterSection)
    dataset: DatasetSection = _doc("forecasting dataset options", factory=DatasetSection)
    learner: LearnerSection = _doc("classifier choice and hyperparameters", factory=LearnerSection)
    tune: TuneSection = _doc("hyperparameter search", factory=TuneSection)
    report: ReportSection = _doc("report sizes", factory=ReportSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _is_section(tp) -> bool:
    return dataclasses.is_dataclass(tp)


def _coerce(value, default, key: str):
    """Light type check against the default's type."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a mapping, got {value!r}")
        return value
    return value


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    obj = cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(f"unknown config key: {dotted}")
        current = getattr(obj, key)
        if _is_section(current):
            setattr(obj, key, _build(type(current), value or {}, dotted + "."))
        else:
            setattr(obj, key, _coerce(value, current, dotted))
    return obj


_GBDT_KEYS = {
    "n_rounds", "learning_rate", "growth", "max_leaves", "max_depth", "n_bins", "l2_lambda",
    "min_child_weight", "row_subsample", "feature_subsample", "seed", "early_stopping_rounds",
}
_FOREST_KEYS = {"n_trees", "max_depth", "feature_subsample", "min_samples_leaf", "n_bins", "seed"}


def validate(cfg: PipelineConfig) -> PipelineConfig:
    problems = []
    if cfg.workers < 1:
        problems.append("workers must be >= 1")
    if cfg.learner.kind not in ("gbdt", "random_forest"):
        problems.append(f"learner.kind must be gbdt or random_forest, got {cfg.learner.kind!r}")
    for k in cfg.learner.gbdt:
        if k not in _GBDT_KEYS:
            problems.append(f"unknown config key: learner.gbdt.{k}")
    for k in cfg.learner.random_forest:
        if k not in _FOREST_KEYS:
            problems.append(f"unknown config key: learner.random_forest.{k}")
    for k in cfg.tune.space:
        target = _GBDT_KEYS if cfg.learner.kind == "gbdt" else _FOREST_KEYS
        if k not in target:
            problems.append(f"tune.space.{k} is not a {cfg.learner.kind} hyperparameter")
    if len(cfg.dataset.fractions) != 3 or any(not isinstance(f, (int, float)) or f <= 0 for f in cfg.dataset.fractions):
        problems.append("dataset.fractions needs three positive numbers")
    elif abs(sum(cfg.dataset.fractions) - 1.0) > 1e-9:
        problems.append("dataset.fractions must sum to 1")
    if not 2 <= cfg.cluster.k_min <= cfg.cluster.k_max:
        problems.append("cluster.k_min must be >= 2 and <= cluster.k_max")
    if cfg.synth.n_chronics < 3:
        problems.append("synth.n_chronics must be at least 3 (one per split)")
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def load_config(path: str | None = None, overrides=(), env=None) -> PipelineConfig:
    """Defaults, then the file (explicit path or ``$GRIDFAIL_CONFIG``), then ``key=value`` overrides."""
    env = os.environ if env is None else env
    path = path or env.get(CONFIG_ENV) or None
    data: dict = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override {item!r}: {exc}") from None
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = value
    return validate(_build(PipelineConfig, data, ""))


def describe_keys(cls=PipelineConfig, prefix: str = "") -> list[tuple[str, object, str]]:
    """(dotted key, default, description) for every leaf key."""
    out = []
    obj = cls()
    for f in dataclasses.fields(cls):
        value = getattr(obj, f.name)
        if _is_section(value):
            out.extend(describe_keys(type(value), f"{prefix}{f.name}."))
        else:
            out.append((f"{prefix}{f.name}", value, f.metadata.get("doc", "")))
    return out


def reference_text() -> str:
    lines = ["configuration keys (YAML file; override with --set key=value):"]
    for key, default, doc in describe_keys():
        lines.append(f"  {key} (default {yaml.safe_dump(default, default_flow_style=True).strip().removesuffix('...').strip()})")
        lines.append(f"      {doc}")
    return "\n".join(lines)
