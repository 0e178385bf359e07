"""Failure descriptors computed from the first and the last observation of a failed episode."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .episode import Episode, GridSchema, Outcome, schema_mismatch

# Clustering descriptors, in reporting order.
CLUSTER_COLUMNS = (
    "ts_overflow",
    "n_lines_dis",
    "n_sub_changed",
    "rho_max",
    "rho_mean",
    "load_p_max",
    "load_p_mean",
    "gen_p_max",
    "gen_p_mean",
    "line_ex_p_max",
    "line_ex_p_mean",
    "line_or_p_max",
    "line_or_p_mean",
)


class FeatureError(ValueError):
    pass


def relative_change_stats(values_t0, values_tn1) -> tuple[float, float]:
    """Max and mean of ``v1 / v0`` minus one, over elements with a non-zero baseline.

    >>> relative_change_stats([0.0, 10.0], [5.0, 20.0])
    (1.0, 1.0)
    """
    v0 = np.asarray(values_t0, dtype=float)
    v1 = np.asarray(values_tn1, dtype=float)
    if v0.shape != v1.shape:
        raise FeatureError(f"vector lengths differ: {v0.shape} vs {v1.shape}")
    keep = v0 != 0
    if not keep.any():
        raise FeatureError("no valid elements")
    ratio = v1[keep] / v0[keep]
    return float(ratio.max() - 1.0), float(ratio.mean() - 1.0)


@dataclass(frozen=True)
class FailureFeatureRow:
    ts_overflow: int
    n_lines_dis: int
    n_sub_changed: int
    rho_max: float
    rho_mean: float
    load_p_max: float
    load_p_mean: float
    gen_p_max: float
    gen_p_mean: float
    line_ex_p_max: float
    line_ex_p_mean: float
    line_or_p_max: float
    line_or_p_mean: float
    t_survived: int
    agent: str
    chronic_id: str
    seed: int
    error_type: str
    flag_attack_line: bool = False
    flag_stable_topology: bool = False
    tracked_gen_change: float | None = None

    def descriptors(self) -> np.ndarray:
        return np.array([float(getattr(self, c)) for c in CLUSTER_COLUMNS])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flag_attack_line"] = int(self.flag_attack_line)
        d["flag_stable_topology"] = int(self.flag_stable_topology)
        if d["tracked_gen_change"] is None:
            d["tracked_gen_change"] = ""
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FailureFeatureRow":
        kw = {}
        for f in fields(cls):
            v = d[f.name]
            if f.name in ("ts_overflow", "n_lines_dis", "n_sub_changed", "t_survived", "seed"):
                v = int(v)
            elif f.name in ("flag_attack_line", "flag_stable_topology"):
                v = bool(int(v))
            elif f.name == "tracked_gen_change":
                v = None if v in ("", None) else float(v)
            elif f.name in ("agent", "chronic_id", "error_type"):
                v = str(v)
            else:
                v = float(v)
            kw[f.name] = v
        return cls(**kw)


def extract_failure_row(
    e: Episode,
    s: GridSchema,
    tracked_line: int | None = None,
    tracked_gen: int | None = None,
) -> FailureFeatureRow:
    """Descriptors of a failed episode from its step-0 and last (n-1) observations."""
    if e.termination.outcome != Outcome.FAILED:
        raise FeatureError(f"{e.chronic_id}: episode survived, no failure to describe")
    if len(e) == 0:
        raise FeatureError(f"{e.chronic_id}: no observations")
    mismatch = schema_mismatch(e, s)
    if mismatch:
        raise FeatureError(f"{e.chronic_id}: schema mismatch ({mismatch})")
    tr = e.trajectory
    first, last = 0, len(tr) - 1
    status = tr.line_status[last]
    rho = tr.rho[last][status]
    n_lines_dis = int((~status).sum())
    n_sub_changed = int((tr.sub_topology[last] != tr.sub_topology[first]).sum())
    load_max, load_mean = relative_change_stats(tr.load_p[first], tr.load_p[last])
    gen_max, gen_mean = relative_change_stats(tr.gen_p[first], tr.gen_p[last])
    ex_max, ex_mean = relative_change_stats(tr.p_ex[first], tr.p_ex[last])
    or_max, or_mean = relative_change_stats(tr.p_or[first], tr.p_or[last])
    attack_flag = False
    if tracked_line is not None:
        attack_flag = not bool(status[tracked_line])
    gen_change = None
    if tracked_gen is not None:
        g0 = tr.gen_p[first, tracked_gen]
        gen_change = float(tr.gen_p[last, tracked_gen] / g0 - 1.0) if g0 != 0 else math.nan
    return FailureFeatureRow(
        ts_overflow=int(tr.ts_overflow_line[last].sum()),
        n_lines_dis=n_lines_dis,
        n_sub_changed=n_sub_changed,
        rho_max=float(rho.max()) if rho.size else 0.0,
        rho_mean=float(rho.mean()) if rho.size else 0.0,
        load_p_max=load_max,
        load_p_mean=load_mean,
        gen_p_max=gen_max,
        gen_p_mean=gen_mean,
        line_ex_p_max=ex_max,
        line_ex_p_mean=ex_mean,
        line_or_p_max=or_max,
        line_or_p_mean=or_mean,
        t_survived=int(e.termination.failed_step),
        agent=e.agent,
        chronic_id=e.chronic_id,
        seed=e.seed,
        error_type=e.termination.error_type.value,
        flag_attack_line=attack_flag,
        flag_stable_topology=n_sub_changed == 0 and n_lines_dis == 0,
        tracked_gen_change=gen_change,
    )


def descriptor_matrix(rows) -> np.ndarray:
    return np.array([r.descriptors() for r in rows]).reshape(-1, len(CLUSTER_COLUMNS))


@dataclass
class CorrelationResult:
    names: tuple[str, ...]
    matrix: np.ndarray  # NaN where undefined
    undefined: tuple[str, ...]

    def table(self) -> list[dict]:
        out = []
        for i, name in enumerate(self.names):
            row = {"variable": name}
            for j, other in enumerate(self.names):
                v = self.matrix[i, j]
                row[other] = "" if math.isnan(v) else float(v)
            out.append(row)
        return out


def correlation_matrix(rows, columns=CLUSTER_COLUMNS) -> CorrelationResult:
    """Pearson correlation between descriptors; constant columns are flagged undefined."""
    X = descriptor_matrix(rows) if not isinstance(rows, np.ndarray) else np.asarray(rows, dtype=float)
    if X.shape[0] < 3:
        raise FeatureError("correlation needs at least 3 rows")
    centered = X - X.mean(axis=0)
    norm = np.sqrt((centered**2).sum(axis=0))
    const = norm == 0
    safe = np.where(const, 1.0, norm)
    z = centered / safe
    C = np.clip(z.T @ z, -1.0, 1.0)
    np.fill_diagonal(C, 1.0)
    C[const, :] = np.nan
    C[:, const] = np.nan
    names = tuple(columns)
    return CorrelationResult(names, C, tuple(n for n, c in zip(names, const) if c))
