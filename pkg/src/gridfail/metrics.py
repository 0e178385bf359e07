"""Forecast evaluation, average-probability matrices and element-level importance."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import LABEL_NAMES, Label
from .episode import GridSchema


class MetricsError(ValueError):
    pass


@dataclass
class EvalReport:
    split: str
    n: int
    accuracy: float
    balanced_accuracy: float
    f1_micro: float
    binary_accuracy: float
    confusion: np.ndarray  # rows = truth, columns = prediction
    avg_probability: np.ndarray  # NaN rows for absent truth classes

    def row(self) -> dict:
        return {
            "split": self.split,
            "n": self.n,
            "accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "f1_micro": self.f1_micro,
            "binary_accuracy": self.binary_accuracy,
        }


def _check(y_true, y_proba):
    y = np.asarray(y_true, dtype=np.int64)
    P = np.asarray(y_proba, dtype=float)
    if P.ndim != 2 or len(y) != len(P):
        raise MetricsError(f"length mismatch: {len(y)} labels vs probability shape {P.shape}")
    if len(y) == 0:
        raise MetricsError("no samples")
    if (P < -1e-12).any() or (P > 1 + 1e-12).any() or not np.allclose(P.sum(axis=1), 1.0, atol=1e-9):
        raise MetricsError("probability rows must lie in [0, 1] and sum to 1")
    if y.min() < 0 or y.max() >= P.shape[1]:
        raise MetricsError("label outside the probability columns")
    return y, P


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(y_true) * n_classes + np.asarray(y_pred), minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def f1_micro(y_true, y_pred, n_classes: int) -> float:
    """Micro-pooled F1 from one-vs-rest TP/FP/FN counts."""
    cm = confusion_matrix(y_true, y_pred, n_classes)
    tp = int(np.trace(cm))
    fp = int(cm.sum(axis=0).sum() - tp)
    fn = int(cm.sum(axis=1).sum() - tp)
    return 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0


def to_binary(labels) -> np.ndarray:
    """SURVIVED -> 0, any failure horizon -> 1."""
    return (np.asarray(labels) != Label.SURVIVED).astype(np.int64)


def avg_probability_matrix(y_true, y_proba) -> np.ndarray:
    """Row c is the mean probability vector over samples whose truth is c (NaN if none)."""
    y, P = _check(y_true, y_proba)
    K = P.shape[1]
    out = np.full((K, K), np.nan)
    for c in range(K):
        sel = y == c
        if sel.any():
            out[c] = P[sel].mean(axis=0)
    return out


def evaluate(y_true, y_proba, split: str = "test") -> EvalReport:
    """Four-class metrics plus the survive/fail collapse of the argmax label.

    >>> P = np.eye(4)[[0, 2, 3, 3]]
    >>> r = evaluate([0, 0, 3, 1], P)
    >>> r.accuracy, r.binary_accuracy
    (0.5, 0.75)
    """
    y, P = _check(y_true, y_proba)
    K = P.shape[1]
    pred = np.argmax(P, axis=1)
    cm = confusion_matrix(y, pred, K)
    correct = int(np.trace(cm))
    support = cm.sum(axis=1)
    present = support > 0
    recalls = np.diag(cm)[present] / support[present]
    return EvalReport(
        split=split,
        n=len(y),
        accuracy=correct / len(y),
        balanced_accuracy=math.fsum(recalls.tolist()) / len(recalls),
        f1_micro=f1_micro(y, pred, K),
        binary_accuracy=float(np.mean(to_binary(y) == to_binary(pred))),
        confusion=cm,
        avg_probability=avg_probability_matrix(y, P),
    )


def report_tables(reports) -> dict[str, list[dict]]:
    """eval_report, avg_prob_matrix and confusion tables for a list of reports."""
    summary, avg, conf = [], [], []
    for r in reports:
        summary.append(r.row())
        for c, name in enumerate(LABEL_NAMES[: r.confusion.shape[0]]):
            a = {"split": r.split, "truth": name}
            k = {"split": r.split, "truth": name}
            for j, other in enumerate(LABEL_NAMES[: r.confusion.shape[0]]):
                v = r.avg_probability[c, j]
                a[other] = "" if math.isnan(v) else float(v)
                k[other] = int(r.confusion[c, j])
            avg.append(a)
            conf.append(k)
    return {"eval_report": summary, "avg_prob_matrix": avg, "confusion": conf}


# ---------------------------------------------------------------- importance


@dataclass
class ElementImportance:
    rows: list[dict]  # element_type, element_id, or_sub, ex_sub, substation, n_features, mean_gain

    def top(self, element_type: str, k: int = 10) -> list[dict]:
        sel = [r for r in self.rows if r["element_type"] == element_type]
        return sorted(sel, key=lambda r: (-r["mean_gain"], r["element_id"]))[:k]

    def table(self, top_k: int | None = None) -> list[dict]:
        types = []
        for r in self.rows:
            if r["element_type"] not in types:
                types.append(r["element_type"])
        out = []
        for t in types:
            for rank, r in enumerate(self.top(t, top_k if top_k is not None else len(self.rows)), start=1):
                out.append({"rank": rank, **r})
        return out


def aggregate_importance(gains, feature_schema, grid: GridSchema | None = None) -> ElementImportance:
    """Mean gain per grid element.

    ``gains`` maps feature name to gain (or is a sequence of pairs);
    ``feature_schema`` is a sequence of (name, element_type, element_id).

    >>> schema = [("line_7_rho", "line", 7), ("line_7_p_or", "line", 7), ("line_7_status", "line", 7)]
    >>> aggregate_importance({"line_7_rho": 6.0, "line_7_p_or": 3.0, "line_7_status": 0.0}, schema).rows[0]["mean_gain"]
    3.0
    """
    gains = dict(gains)
    owner = {name: (etype, int(eid)) for name, etype, eid in feature_schema}
    unmapped = [n for n in gains if n not in owner]
    if unmapped:
        raise MetricsError(f"feature not mapped to a grid element: {unmapped[0]}")
    members: dict[tuple[str, int], list[float]] = {}
    for name, (etype, eid) in owner.items():
        if name in gains:
            members.setdefault((etype, eid), []).append(float(gains[name]))
    rows = []
    for (etype, eid), vals in members.items():
        row = {"element_type": etype, "element_id": eid, "or_sub": "", "ex_sub": "", "substation": ""}
        if grid is not None:
            if etype == "line":
                row["or_sub"], row["ex_sub"] = grid.line_endpoints[eid]
            elif etype == "gen":
                row["substation"] = grid.gen_substation[eid]
            elif etype == "load":
                row["substation"] = grid.load_substation[eid]
            elif etype == "sub":
                row["substation"] = eid
        row["n_features"] = len(vals)
        row["mean_gain"] = math.fsum(vals) / len(vals)
        rows.append(row)
    return ElementImportance(rows)


def feature_importance_table(ranked, top_k: int | None = None) -> list[dict]:
    ranked = list(ranked)[: top_k if top_k is not None else None]
    return [{"rank": i + 1, "feature": n, "gain": g} for i, (n, g) in enumerate(ranked)]
