"""Four-class forecasting samples, observation featurization and chronic-level splits."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import rng, store
from .episode import AGENTS, Episode, GridSchema, Observation, Outcome, schema_mismatch

log = logging.getLogger(__name__)


class Label(IntEnum):
    SURVIVED = 0
    N_MINUS_5 = 1
    N_MINUS_3 = 2
    N_MINUS_1 = 3


LABEL_NAMES = tuple(l.name for l in Label)
FAILURE_OFFSETS = {Label.N_MINUS_1: 1, Label.N_MINUS_3: 3, Label.N_MINUS_5: 5}

# per-line observation fields, in feature order; (feature suffix, trajectory column)
LINE_FIELDS = (
    ("rho", "rho"),
    ("p_or", "p_or"),
    ("p_ex", "p_ex"),
    ("status", "line_status"),
    ("ts_overflow", "ts_overflow_line"),
    ("cooldown", "cooldown_line"),
    ("maintenance_time", "maintenance_time"),
)
DESCRIPTIVE = ("current_step", "minute_of_hour", "hour_of_day", "day_of_week")


class DatasetError(ValueError):
    pass


def agent_code(agent: str) -> int:
    """Categorical code of an agent label; unknown labels share the OTHER code."""
    return AGENTS.index(agent) if agent in AGENTS else len(AGENTS)


def feature_names(s: GridSchema) -> list[str]:
    names = [f"line_{l}_{suffix}" for suffix, _ in LINE_FIELDS for l in range(s.n_lines)]
    names += [f"gen_{g}_p" for g in range(s.n_generators)]
    names += [f"load_{d}_p" for d in range(s.n_loads)]
    names += [f"sub_{i}_changed" for i in range(s.n_substations)]
    names += list(DESCRIPTIVE)
    names.append("agent")
    return names


def feature_elements(s: GridSchema) -> list[tuple[str, int]]:
    """(element type, element id) for every feature column; descriptive columns use id -1."""
    out = [("line", l) for _ in LINE_FIELDS for l in range(s.n_lines)]
    out += [("gen", g) for g in range(s.n_generators)]
    out += [("load", d) for d in range(s.n_loads)]
    out += [("sub", i) for i in range(s.n_substations)]
    out += [("descriptive", -1)] * (len(DESCRIPTIVE) + 1)
    return out


def featurize_steps(e: Episode, s: GridSchema, steps) -> np.ndarray:
    """Feature matrix for the given observation indices of ``e`` (one row per step)."""
    mismatch = schema_mismatch(e, s)
    if mismatch:
        raise DatasetError(f"{e.chronic_id}: schema mismatch ({mismatch})")
    tr = e.trajectory
    idx = np.asarray(steps, dtype=np.int64)
    parts = [np.asarray(getattr(tr, col)[idx], dtype=float) for _, col in LINE_FIELDS]
    parts.append(tr.gen_p[idx])
    parts.append(tr.load_p[idx])
    parts.append((tr.sub_topology[idx] != tr.sub_topology[0]).astype(float))
    parts.append(
        np.stack([tr.step[idx], tr.minute_of_hour[idx], tr.hour_of_day[idx], tr.day_of_week[idx]], axis=1).astype(float)
    )
    parts.append(np.full((len(idx), 1), float(agent_code(e.agent))))
    return np.concatenate(parts, axis=1)


def featurize_observation(o: Observation, e: Episode, s: GridSchema) -> np.ndarray:
    """Feature vector of one observation; ``e`` supplies the step-0 topology and the agent."""
    if not 0 <= o.step < len(e):
        raise DatasetError(f"step {o.step} outside episode {e.chronic_id}")
    first = e.trajectory.at(0)
    vec = [np.asarray(getattr(o, col), dtype=float) for _, col in LINE_FIELDS]
    vec += [np.asarray(o.gen_p, dtype=float), np.asarray(o.load_p, dtype=float)]
    vec.append((np.asarray(o.sub_topology) != np.asarray(first.sub_topology)).astype(float))
    vec.append(np.array([o.step, o.minute_of_hour, o.hour_of_day, o.day_of_week], dtype=float))
    vec.append(np.array([float(agent_code(e.agent))]))
    out = np.concatenate(vec)
    if len(out) != len(feature_names(s)):
        raise DatasetError("observation does not match the schema")
    return out


@dataclass
class SampleSet:
    """Feature matrix plus per-row bookkeeping."""

    feature_names: list[str]
    X: np.ndarray
    y: np.ndarray
    chronic_id: np.ndarray
    agent: np.ndarray
    seed: np.ndarray
    source_step: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, mask) -> "SampleSet":
        return SampleSet(
            self.feature_names,
            self.X[mask],
            self.y[mask],
            self.chronic_id[mask],
            self.agent[mask],
            self.seed[mask],
            self.source_step[mask],
        )

    def class_fractions(self) -> np.ndarray:
        return np.bincount(self.y, minlength=len(Label)) / max(len(self.y), 1)

    def chronics(self) -> set[str]:
        return set(self.chronic_id.tolist())

    @classmethod
    def empty(cls, names) -> "SampleSet":
        return cls(
            list(names),
            np.zeros((0, len(names))),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=object),
            np.zeros(0, dtype=object),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
        )

    @classmethod
    def concat(cls, parts) -> "SampleSet":
        parts = list(parts)
        return cls(
            parts[0].feature_names,
            np.concatenate([p.X for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.chronic_id for p in parts]),
            np.concatenate([p.agent for p in parts]),
            np.concatenate([p.seed for p in parts]),
            np.concatenate([p.source_step for p in parts]),
        )


def survived_candidates(e: Episode, min_gap: int, quantile: float) -> np.ndarray:
    """Steps eligible as SURVIVED samples: high rho_max and far from any failure."""
    n = len(e)
    if e.failed:
        eligible = np.arange(0, max(0, n - min_gap + 1))
    else:
        eligible = np.arange(n)
    if len(eligible) == 0:
        return eligible
    rho_max = e.trajectory.rho[eligible].max(axis=1)
    thr = np.quantile(rho_max, quantile)
    return eligible[rho_max >= thr]


def _spread(total: int, capacity: list[int], order: list[int]) -> list[int]:
    """Split ``total`` as evenly as possible under per-slot capacities."""
    quota = [0] * len(capacity)
    left = total
    open_slots = [i for i in order if capacity[i] > 0]
    while left > 0 and open_slots:
        share, extra = divmod(left, len(open_slots))
        nxt = []
        for rank, i in enumerate(open_slots):
            want = share + (1 if rank < extra else 0)
            take = min(want, capacity[i] - quota[i])
            quota[i] += take
            left -= take
            if quota[i] < capacity[i]:
                nxt.append(i)
        open_slots = nxt
    return quota


def build_dataset(
    corpus,
    s: GridSchema,
    seed: int,
    survived_per_failure: int = 3,
    min_gap: int = 6,
    high_rho_quantile: float = 0.75,
    survived_sources: str = "both",
) -> SampleSet:
    """Forecasting samples from a corpus of episodes.

    Every failed episode yields its observations at n-1, n-3 and n-5 (when
    they exist). SURVIVED samples are drawn without replacement from high
    rho_max observations at least ``min_gap`` steps before a failure, or
    anywhere in a survived episode. Their total is
    ``failure_samples * survived_per_failure / 3``, i.e. half the dataset with
    the default.
    """
    if survived_sources not in ("both", "failed", "survived"):
        raise DatasetError(f"unknown survived_sources {survived_sources!r}")
    if not 0.0 <= high_rho_quantile <= 1.0:
        raise DatasetError("high_rho_quantile must lie in [0, 1]")
    episodes = sorted(corpus, key=lambda e: e.key)
    if not episodes:
        raise DatasetError("empty corpus")
    names = feature_names(s)
    parts = []
    n_fail = 0
    for e in episodes:
        if not e.failed:
            continue
        n = len(e)
        rows = [(lab, n - k) for lab, k in sorted(FAILURE_OFFSETS.items()) if n - k >= 0]
        if not rows:
            continue
        labels, steps = zip(*rows)
        parts.append(_samples(e, s, steps, labels))
        n_fail += len(steps)
    if n_fail == 0:
        raise DatasetError("corpus has no failed episodes")

    target = int(round(n_fail * survived_per_failure / 3))
    cands = []
    for e in episodes:
        use = survived_sources == "both" or (survived_sources == "failed") == e.failed
        cands.append(survived_candidates(e, min_gap, high_rho_quantile) if use else np.zeros(0, dtype=np.int64))
    order = [int(i) for i in rng.stream(seed, "survived-allocation").permutation(len(episodes))]
    quota = _spread(target, [len(c) for c in cands], order)
    if sum(quota) < target:
        log.warning("only %d of %d SURVIVED samples available", sum(quota), target)
    for e, c, q in zip(episodes, cands, quota):
        if q == 0:
            continue
        g = rng.stream(seed, e.chronic_id, e.agent, e.seed, "survived")
        steps = np.sort(g.choice(c, size=q, replace=False))
        parts.append(_samples(e, s, steps, [Label.SURVIVED] * q))
    return SampleSet.concat(parts)


def _samples(e: Episode, s: GridSchema, steps, labels) -> SampleSet:
    steps = np.asarray(steps, dtype=np.int64)
    m = len(steps)
    return SampleSet(
        feature_names(s),
        featurize_steps(e, s, steps),
        np.asarray([int(l) for l in labels], dtype=np.int64),
        np.full(m, e.chronic_id, dtype=object),
        np.full(m, e.agent, dtype=object),
        np.full(m, e.seed, dtype=np.int64),
        steps,
    )


@dataclass
class DatasetSplit:
    train: SampleSet
    validation: SampleSet
    test: SampleSet
    ood: SampleSet | None = None
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    chronics: dict = field(default_factory=dict)

    def parts(self) -> dict[str, SampleSet]:
        out = {"train": self.train, "val": self.validation, "test": self.test}
        if self.ood is not None:
            out["ood"] = self.ood
        return out


def chronic_counts(n: int, fractions) -> list[int]:
    """Chronics per split by largest remainder; every split gets at least one."""
    raw = [f * n for f in fractions]
    counts = [int(math.floor(r + 1e-12)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    for i in range(len(counts)):
        if counts[i] == 0:
            j = max(range(len(counts)), key=lambda k: (counts[k], -k))
            counts[j] -= 1
            counts[i] += 1
    return counts


def split_by_chronic(samples: SampleSet, fractions=(0.8, 0.1, 0.1), seed: int = 0, ood: SampleSet | None = None) -> DatasetSplit:
    """Shuffle chronics with ``seed`` and partition them; samples follow their chronic."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"fractions must be three positive ratios summing to 1, got {fractions}")
    chronics = sorted(samples.chronics())
    if len(chronics) < 3:
        raise DatasetError(f"need at least 3 chronics to split, got {len(chronics)}")
    perm = rng.stream(seed, "chronic-split").permutation(len(chronics))
    shuffled = [chronics[int(i)] for i in perm]
    n_train, n_val, _ = chronic_counts(len(chronics), fractions)
    groups = {
        "train": shuffled[:n_train],
        "val": shuffled[n_train : n_train + n_val],
        "test": shuffled[n_train + n_val :],
    }
    pick = {name: samples.subset(np.isin(samples.chronic_id, g)) for name, g in groups.items()}
    if ood is not None:
        clash = ood.chronics() & samples.chronics()
        if clash:
            raise DatasetError(f"OOD chronics overlap the main corpus: {sorted(clash)[:3]}")
        groups["ood"] = sorted(ood.chronics())
    return DatasetSplit(pick["train"], pick["val"], pick["test"], ood, fractions, seed, groups)


def leakage_report(split: DatasetSplit) -> list[str]:
    """Pairs of splits sharing a chronic id; empty means leak-free."""
    parts = split.parts()
    names = list(parts)
    problems = []
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            shared = parts[a].chronics() & parts[b].chronics()
            if shared:
                problems.append(f"{a}/{b} share {len(shared)} chronics, e.g. {sorted(shared)[0]}")
    return problems


# ---------------------------------------------------------------- persistence

FEATURE_SCHEMA_FORMAT = "gridfail-features/1"
_META = ("chronic_id", "agent", "seed", "source_step", "label")


def feature_schema(s: GridSchema) -> list[tuple[str, str, int]]:
    """(column, element type, element id) for every feature column, in order."""
    return [(n, t, i) for n, (t, i) in zip(feature_names(s), feature_elements(s))]


def write_feature_schema(s: GridSchema, destination) -> int:
    doc = {
        "format": FEATURE_SCHEMA_FORMAT,
        "grid": s.name,
        "labels": list(LABEL_NAMES),
        "meta_columns": list(_META),
        "columns": [{"name": n, "element_type": t, "element_id": i} for n, t, i in feature_schema(s)],
    }
    return store.write_json(doc, destination)


def read_feature_schema(source) -> list[tuple[str, str, int]]:
    doc = store.read_json(source)
    if doc.get("format") != FEATURE_SCHEMA_FORMAT:
        raise DatasetError(f"unknown feature schema format {doc.get('format')!r}")
    return [(c["name"], c["element_type"], int(c["element_id"])) for c in doc["columns"]]


def write_samples(samples: SampleSet, destination) -> int:
    """CSV with bookkeeping columns first, then every feature in schema order."""
    prefix = [
        ("chronic_id", samples.chronic_id.tolist()),
        ("agent", samples.agent.tolist()),
        ("seed", samples.seed.tolist()),
        ("source_step", samples.source_step.tolist()),
        ("label", samples.y.tolist()),
    ]
    return store.write_matrix(samples.feature_names, samples.X, destination, prefix)


def read_samples(source, expected_names=None) -> SampleSet:
    with open(source, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[: len(_META)]) != _META:
            raise DatasetError(f"{source}: not a dataset file")
        names = header[len(_META):]
        if expected_names is not None and list(expected_names) != names:
            raise DatasetError(f"{source}: feature columns do not match the feature schema")
        meta, X = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise store.ParseError(lineno, f"expected {len(header)} cells, got {len(row)}")
            meta.append(row[: len(_META)])
            X.append(row[len(_META):])
    m = np.array(meta, dtype=object).reshape(len(meta), len(_META))
    try:
        Xa = np.array(X, dtype=float).reshape(len(X), len(names))
        ints = [np.array(m[:, i].tolist(), dtype=np.int64) for i in (2, 3, 4)]
    except ValueError as exc:
        raise DatasetError(f"{source}: {exc}") from None
    return SampleSet(
        names,
        Xa,
        ints[2],
        np.array(m[:, 0].tolist(), dtype=object),
        np.array(m[:, 1].tolist(), dtype=object),
        ints[0],
        ints[1],
    )
