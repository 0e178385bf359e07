"""Standardized PCA, k-means with silhouette model selection, and cluster profiling."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .episode import AGENTS, ErrorType
from .features import CLUSTER_COLUMNS, FailureFeatureRow
from .rng import stream
from .stats import ChiSquareResult, chi_square_independence


class ClusterError(ValueError):
    pass


def _canonical_order(X: np.ndarray) -> np.ndarray:
    # lexicographic row order makes fits independent of input row order
    return np.lexsort(X.T[::-1]) if X.size else np.arange(len(X))


# ---------------------------------------------------------------- PCA


@dataclass
class PcaModel:
    columns: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    components: np.ndarray  # rows are orthonormal eigenvectors, descending variance
    ratios: np.ndarray
    selected: int
    variance_threshold: float = 0.05

    def table(self) -> list[dict]:
        rows = []
        cum = 0.0
        for i, r in enumerate(self.ratios):
            cum += float(r)
            row = {"component": i + 1, "explained_ratio": float(r), "cumulative": cum, "selected": int(i < self.selected)}
            row.update({c: float(v) for c, v in zip(self.columns, self.components[i])})
            rows.append(row)
        return rows


def pca_fit(rows, variance_threshold: float = 0.05, columns=CLUSTER_COLUMNS) -> PcaModel:
    """Correlation-matrix PCA. Keeps every component explaining at least ``variance_threshold``.

    >>> m = pca_fit(np.array([[0.0, 0.0], [1.0, 2.0], [2.0, 4.0]]), columns=("x", "y"))
    >>> [round(float(r), 12) for r in m.ratios], m.selected
    ([1.0, 0.0], 1)
    """
    X = _as_matrix(rows)
    if X.shape[0] < 2:
        raise ClusterError("PCA needs at least 2 rows")
    if X.shape[1] != len(columns):
        raise ClusterError(f"expected {len(columns)} columns, got {X.shape[1]}")
    X = X[_canonical_order(X)]
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    for name, s in zip(columns, std):
        if s == 0:
            raise ClusterError(f"constant column: {name}")
    Z = (X - mean) / std
    corr = Z.T @ Z / len(Z)
    corr = (corr + corr.T) / 2
    w, v = np.linalg.eigh(corr)
    order = np.argsort(-w, kind="stable")
    w = np.clip(w[order], 0.0, None)
    comps = v[:, order].T.copy()
    for i, c in enumerate(comps):
        if c[np.argmax(np.abs(c))] < 0:
            comps[i] = -c
    ratios = w / w.sum()
    selected = int((ratios >= variance_threshold).sum())
    return PcaModel(tuple(columns), mean, std, comps, ratios, selected, variance_threshold)


def _as_matrix(rows) -> np.ndarray:
    if isinstance(rows, np.ndarray):
        X = np.asarray(rows, dtype=float)
    else:
        rows = list(rows)
        if rows and isinstance(rows[0], FailureFeatureRow):
            X = np.array([r.descriptors() for r in rows])
        else:
            X = np.asarray(rows, dtype=float)
    if X.ndim != 2:
        raise ClusterError("expected a 2-D table")
    return X


def pca_transform(m: PcaModel, rows, n_components: int | None = None) -> np.ndarray:
    X = _as_matrix(rows)
    if X.shape[1] != len(m.columns):
        raise ClusterError(f"column mismatch: model has {len(m.columns)}, got {X.shape[1]}")
    k = m.selected if n_components is None else n_components
    Z = (X - m.mean) / m.std
    return Z @ m.components[:k].T


def pca_reconstruct(m: PcaModel, reduced: np.ndarray) -> np.ndarray:
    """Back to z-scored space from a (possibly full-rank) projection."""
    k = reduced.shape[1]
    return reduced @ m.components[:k]


# ---------------------------------------------------------------- k-means


def _sq_dist(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    acc = np.zeros((len(X), len(C)))
    for j in range(X.shape[1]):
        acc += (X[:, j, None] - C[None, :, j]) ** 2
    return acc


@dataclass
class KMeansModel:
    k: int
    centroids: np.ndarray
    inertia: float
    seed: int
    n_restarts: int
    labels: np.ndarray = field(repr=False)
    n_iter: int = 0
    history: list[float] = field(default_factory=list, repr=False)  # inertia per Lloyd iteration

    def predict(self, points) -> np.ndarray:
        return np.argmin(_sq_dist(np.asarray(points, dtype=float), self.centroids), axis=1)


def _kmeanspp(X: np.ndarray, k: int, g: np.random.Generator) -> np.ndarray:
    n = len(X)
    idx = [int(g.integers(n))]
    d2 = _sq_dist(X, X[idx]).ravel()
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            nxt = int(g.integers(n))
        else:
            nxt = int(np.searchsorted(np.cumsum(d2), g.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        idx.append(nxt)
        d2 = np.minimum(d2, _sq_dist(X, X[nxt : nxt + 1]).ravel())
    return X[idx].copy()


def _lloyd(X, C, max_iter, tol):
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d = _sq_dist(X, C)
        labels = np.argmin(d, axis=1)
        history.append(float(d[np.arange(len(X)), labels].sum()))
        new = np.empty_like(C)
        counts = np.bincount(labels, minlength=len(C))
        for j in range(len(C)):
            if counts[j]:
                new[j] = X[labels == j].mean(axis=0)
            else:
                new[j] = C[j]
        # re-seed empty clusters at the point farthest from its own centroid
        dmine = d[np.arange(len(X)), labels].copy()
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(dmine))
            new[j] = X[far]
            dmine[far] = -1.0
        shift = float(np.sqrt(((new - C) ** 2).sum(axis=1)).max())
        C = new
        if shift < tol:
            break
    d = _sq_dist(X, C)
    labels = np.argmin(d, axis=1)
    inertia = float(d[np.arange(len(X)), labels].sum())
    history.append(inertia)
    return C, labels, inertia, n_iter, history


def kmeans_fit(points, k: int, seed: int, n_restarts: int = 10, max_iter: int = 300, tol: float = 1e-6) -> KMeansModel:
    X = np.asarray(points, dtype=float)
    if X.ndim != 2:
        raise ClusterError("points must be a 2-D array")
    n = len(X)
    if k < 1:
        raise ClusterError("k must be at least 1")
    if k > n:
        raise ClusterError(f"k={k} exceeds number of points {n}")
    order = _canonical_order(X)
    Xs = X[order]
    best = None
    for r in range(n_restarts):
        g = stream(seed, "kmeans", k, r)
        res = _lloyd(Xs, _kmeanspp(Xs, k, g), max_iter, tol)
        if best is None or res[2] < best[2]:
            best = res
    C, _, _, n_iter, history = best
    C = C[np.lexsort(C.T[::-1])]  # canonical centroid order
    d = _sq_dist(X, C)
    labels = np.argmin(d, axis=1)
    # exact sum, so the reported inertia does not depend on row order
    inertia = math.fsum(d[np.arange(n), labels].tolist())
    return KMeansModel(k, C, inertia, seed, n_restarts, labels, n_iter, history)


# ---------------------------------------------------------------- silhouette


def pairwise_distances(X: np.ndarray) -> np.ndarray:
    """Euclidean distances with coordinates summed in index order."""
    X = np.asarray(X, dtype=float)
    acc = np.zeros((len(X), len(X)))
    for j in range(X.shape[1]):
        acc += (X[:, j, None] - X[None, :, j]) ** 2
    return np.sqrt(acc)


def silhouette_samples(points, assignments) -> np.ndarray:
    X = np.asarray(points, dtype=float)
    lab = np.asarray(assignments)
    if len(X) < 2:
        raise ClusterError("silhouette needs at least 2 points")
    clusters = np.unique(lab)
    if len(clusters) < 2:
        raise ClusterError("silhouette needs at least 2 clusters")
    D = pairwise_distances(X)
    members = {c: np.flatnonzero(lab == c) for c in clusters}
    out = np.zeros(len(X))
    for i in range(len(X)):
        own = members[lab[i]]
        if len(own) == 1:
            continue
        a = math.fsum(D[i, own].tolist()) / (len(own) - 1)
        b = min(math.fsum(D[i, m].tolist()) / len(m) for c, m in members.items() if c != lab[i])
        top = max(a, b)
        out[i] = 0.0 if top == 0 else (b - a) / top
    return out


def silhouette_score(points, assignments) -> float:
    """Mean silhouette; singleton clusters score 0.

    >>> silhouette_score([[0, 0], [0, 1], [100, 0], [100, 1]], [0, 0, 1, 1]) > 0.97
    True
    """
    s = silhouette_samples(points, assignments)
    return math.fsum(s.tolist()) / len(s)


@dataclass
class KSelection:
    k: int
    table: list[dict]
    models: dict[int, KMeansModel]

    @property
    def model(self) -> KMeansModel:
        return self.models[self.k]


def choose_k(table: list[dict]) -> int:
    """Silhouette argmax; the smaller k wins a tie."""
    best = None
    for row in sorted(table, key=lambda r: r["k"]):
        if best is None or row["silhouette"] > best["silhouette"]:
            best = row
    return int(best["k"])


def select_k(points, k_range=range(2, 11), seed: int = 0, n_restarts: int = 10) -> KSelection:
    X = np.asarray(points, dtype=float)
    ks = sorted(set(int(k) for k in k_range))
    if not ks or ks[0] < 2 or ks[-1] > len(X):
        raise ClusterError(f"k range must lie within [2, {len(X)}]")
    table, models = [], {}
    for k in ks:
        m = kmeans_fit(X, k, seed, n_restarts=n_restarts)
        sil = silhouette_score(X, m.labels) if len(np.unique(m.labels)) > 1 else 0.0
        models[k] = m
        table.append({"k": k, "inertia": m.inertia, "silhouette": sil})
    return KSelection(choose_k(table), table, models)


# ---------------------------------------------------------------- profiling


def _quartiles(v: np.ndarray) -> dict:
    q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
    return {"min": float(q[0]), "q1": float(q[1]), "median": float(q[2]), "q3": float(q[3]), "max": float(q[4])}


@dataclass
class ClusterProfile:
    names: list[str]
    means: list[dict]  # one row per descriptor, one column per cluster
    agent_counts: list[dict]
    survival: list[dict]
    error_types: list[dict]
    chi_square: ChiSquareResult | None
    agents: tuple[str, ...]

    def chi_square_table(self) -> list[dict]:
        if self.chi_square is None:
            return [{"statistic": "", "dof": "", "p_value": "", "log10_p": ""}]
        return [self.chi_square.as_row()]


def profile_clusters(rows, assignments, names=None, agents=AGENTS) -> ClusterProfile:
    rows = list(rows)
    lab = np.asarray(assignments, dtype=int)
    if len(rows) != len(lab):
        raise ClusterError("one assignment per row is required")
    ids = sorted(set(lab.tolist()))
    names = list(names) if names is not None else [f"cluster_{i}" for i in ids]
    if len(names) < len(ids):
        raise ClusterError("fewer cluster names than clusters")
    label_name = {c: names[i] for i, c in enumerate(ids)}
    X = np.array([r.descriptors() for r in rows]).reshape(len(rows), len(CLUSTER_COLUMNS))

    means = []
    for j, col in enumerate(CLUSTER_COLUMNS):
        row = {"variable": col}
        for c in ids:
            row[label_name[c]] = float(X[lab == c, j].mean())
        means.append(row)

    extra = sorted({r.agent for r in rows} - set(agents))
    agent_list = tuple(agents) + tuple(extra)
    counts = np.zeros((len(ids), len(agent_list)), dtype=int)
    pos = {a: i for i, a in enumerate(agent_list)}
    for r, c in zip(rows, lab):
        counts[ids.index(c), pos[r.agent]] += 1
    col_tot = counts.sum(axis=0)
    agent_rows = []
    for i, c in enumerate(ids):
        row = {"cluster": label_name[c]}
        for a, ai in pos.items():
            row[f"{a}_count"] = int(counts[i, ai])
        for a, ai in pos.items():
            row[f"{a}_pct"] = 100.0 * counts[i, ai] / col_tot[ai] if col_tot[ai] else 0.0
        agent_rows.append(row)
    live = counts[:, col_tot > 0]
    live = live[live.sum(axis=1) > 0]
    chi = chi_square_independence(live) if live.shape[0] >= 2 and live.shape[1] >= 2 else None

    survival = []
    t = np.array([r.t_survived for r in rows], dtype=float)
    for c in ids:
        v = t[lab == c]
        survival.append({"cluster": label_name[c], "n": int(v.size), **_quartiles(v), "mean": float(v.mean())})

    err = []
    kinds = [e.value for e in ErrorType]
    for c in ids:
        sel = [r.error_type for r, l in zip(rows, lab) if l == c]
        cnt = Counter(sel)
        row = {"cluster": label_name[c], "n": len(sel)}
        for k in kinds + sorted(set(cnt) - set(kinds)):
            row[f"{k}_pct"] = 100.0 * cnt.get(k, 0) / len(sel)
        err.append(row)
    return ClusterProfile([label_name[c] for c in ids], means, agent_rows, survival, err, chi, agent_list)


def cluster_coordinates(rows, assignments, names=None) -> list[dict]:
    """Per-failure coordinates for a 3-D scatter of generation change, disconnections and topology."""
    lab = list(np.asarray(assignments, dtype=int).tolist())
    ids = sorted(set(lab))
    names = list(names) if names is not None else [f"cluster_{i}" for i in ids]
    out = []
    for r, c in zip(rows, lab):
        out.append({
            "chronic_id": r.chronic_id,
            "agent": r.agent,
            "seed": r.seed,
            "cluster": names[ids.index(c)],
            "gen_p_mean": r.gen_p_mean,
            "n_lines_dis": r.n_lines_dis,
            "n_sub_changed": r.n_sub_changed,
        })
    return out
