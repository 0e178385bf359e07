"""Histogram gradient boosting (softmax) and a Gini random forest, written on numpy."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .rng import stream
from .store import read_json, write_json

log = logging.getLogger(__name__)

MODEL_FORMAT = "gridfail-model/1"


class TrainError(ValueError):
    pass


class Growth(str, Enum):
    LEAF_WISE = "leaf_wise"
    LEVEL_WISE = "level_wise"


class ModelKind(str, Enum):
    GBDT = "gbdt"
    RANDOM_FOREST = "random_forest"


@dataclass
class GbdtConfig:
    n_rounds: int = 100
    learning_rate: float = 0.1
    growth: Growth = Growth.LEAF_WISE
    max_leaves: int = 31
    max_depth: int = 6
    n_bins: int = 255
    l2_lambda: float = 1.0
    min_child_weight: float = 1e-3
    row_subsample: float = 1.0
    feature_subsample: float = 1.0
    seed: int = 0
    early_stopping_rounds: int = 0  # 0 disables

    def __post_init__(self):
        self.growth = Growth(self.growth)

    def validate(self) -> None:
        if not 2 <= self.n_bins <= 255:
            raise TrainError("n_bins must be in [2, 255]")
        if self.learning_rate <= 0:
            raise TrainError("learning_rate must be positive")
        for name in ("row_subsample", "feature_subsample"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise TrainError(f"{name} must be in (0, 1]")
        if self.n_rounds < 0 or self.max_leaves < 2 or self.max_depth < 1:
            raise TrainError("n_rounds >= 0, max_leaves >= 2 and max_depth >= 1 are required")
        if self.l2_lambda < 0 or self.min_child_weight < 0:
            raise TrainError("l2_lambda and min_child_weight must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["growth"] = self.growth.value
        return d


@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 12
    feature_subsample: float = 0.0  # 0 means sqrt(n_features)
    min_samples_leaf: int = 1
    n_bins: int = 255
    seed: int = 0

    def validate(self) -> None:
        if self.n_trees < 1 or self.max_depth < 0 or self.min_samples_leaf < 1:
            raise TrainError("n_trees >= 1, max_depth >= 0 and min_samples_leaf >= 1 are required")
        if not 0 <= self.feature_subsample <= 1:
            raise TrainError("feature_subsample must be in [0, 1]")
        if not 2 <= self.n_bins <= 255:
            raise TrainError("n_bins must be in [2, 255]")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- binning


def bin_edges(column: np.ndarray, n_bins: int) -> np.ndarray:
    """Cut points between distinct values, placed at count quantiles.

    Edges depend only on value ranks, so a strictly increasing transform of
    the column leaves every sample's bin unchanged.

    >>> bin_edges(np.array([0.0, 0.0, 1.0, 1.0]), 255)
    array([0.5])
    """
    u, counts = np.unique(column, return_counts=True)
    if len(u) <= 1:
        return np.zeros(0)
    if len(u) <= n_bins:
        cut = np.arange(len(u) - 1)
    else:
        cum = np.cumsum(counts)
        targets = cum[-1] * np.arange(1, n_bins) / n_bins
        cut = np.unique(np.minimum(np.searchsorted(cum, targets, side="left"), len(u) - 2))
    lo, hi = u[cut], u[cut + 1]
    mid = lo + (hi - lo) / 2
    return np.where(mid < hi, mid, lo)


def apply_bins(X: np.ndarray, edges) -> np.ndarray:
    out = np.empty(X.shape, dtype=np.uint8)
    for j, e in enumerate(edges):
        out[:, j] = np.searchsorted(e, X[:, j], side="left")
    return out


# ---------------------------------------------------------------- trees


@dataclass
class Tree:
    feature: np.ndarray  # -1 at leaves
    bin: np.ndarray
    threshold: np.ndarray  # go left when x <= threshold
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # leaf score (GBDT) or class index (forest)
    gain: np.ndarray

    @classmethod
    def from_nodes(cls, nodes: list[dict], edges) -> "Tree":
        f = np.array([n["feature"] for n in nodes], dtype=np.int64)
        b = np.array([n["bin"] for n in nodes], dtype=np.int64)
        thr = np.array([float(edges[fi][bi]) if fi >= 0 else 0.0 for fi, bi in zip(f, b)])
        return cls(
            f,
            b,
            thr,
            np.array([n["left"] for n in nodes], dtype=np.int64),
            np.array([n["right"] for n in nodes], dtype=np.int64),
            np.array([n["value"] for n in nodes], dtype=float),
            np.array([n["gain"] for n in nodes], dtype=float),
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "bin", "threshold", "left", "right", "value", "gain")}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        ints = ("feature", "bin", "left", "right")
        return cls(**{k: np.array(v, dtype=np.int64 if k in ints else float) for k, v in d.items()})

    def apply(self, X: np.ndarray, binned: bool = False) -> np.ndarray:
        """Leaf index reached by every row."""
        node = np.zeros(len(X), dtype=np.int64)
        active = np.arange(len(X))
        cut = self.bin if binned else self.threshold
        while active.size:
            f = self.feature[node[active]]
            inner = f >= 0
            active, f = active[inner], f[inner]
            if not active.size:
                break
            cur = node[active]
            go_left = X[active, f] <= cut[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
        return node

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())


def _leaf(value=0.0) -> dict:
    return {"feature": -1, "bin": 0, "left": -1, "right": -1, "value": value, "gain": 0.0}


# ---------------------------------------------------------------- softmax objective


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(scores: np.ndarray, y: np.ndarray) -> float:
    z = scores - scores.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(y)), y]))


def softmax_grad_hess(scores: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample gradient p - y and diagonal hessian p (1 - p) of the summed cross-entropy."""
    p = softmax(scores)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(y)), y] = 1.0
    return p - onehot, p * (1.0 - p)


# ---------------------------------------------------------------- model


@dataclass
class TreeEnsembleModel:
    kind: ModelKind
    n_classes: int
    feature_names: list[str]
    edges: list[np.ndarray]
    trees: list[Tree]
    tree_class: list[int]
    base_score: np.ndarray
    feature_gain: np.ndarray
    config: dict
    train_log: list[dict] = field(default_factory=list)

    def raw_scores(self, X: np.ndarray) -> np.ndarray:
        scores = np.tile(self.base_score, (len(X), 1))
        for t, k in zip(self.trees, self.tree_class):
            scores[:, k] += t.value[t.apply(X)]
        return scores

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "kind": self.kind.value,
            "n_classes": self.n_classes,
            "feature_names": list(self.feature_names),
            "edges": [e.tolist() for e in self.edges],
            "base_score": self.base_score.tolist(),
            "feature_gain": self.feature_gain.tolist(),
            "config": self.config,
            "train_log": self.train_log,
            "trees": [{"class": k, **t.to_dict()} for t, k in zip(self.trees, self.tree_class)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeEnsembleModel":
        if d.get("format") != MODEL_FORMAT:
            raise TrainError(f"unknown model format {d.get('format')!r}")
        trees, classes = [], []
        for t in d["trees"]:
            t = dict(t)
            classes.append(int(t.pop("class")))
            trees.append(Tree.from_dict(t))
        return cls(
            ModelKind(d["kind"]),
            int(d["n_classes"]),
            list(d["feature_names"]),
            [np.array(e, dtype=float) for e in d["edges"]],
            trees,
            classes,
            np.array(d["base_score"], dtype=float),
            np.array(d["feature_gain"], dtype=float),
            dict(d["config"]),
            list(d.get("train_log", [])),
        )


def save_model(m: TreeEnsembleModel, destination) -> int:
    return write_json(m.to_dict(), destination)


def load_model(source) -> TreeEnsembleModel:
    return TreeEnsembleModel.from_dict(read_json(source))


def predict_proba(m: TreeEnsembleModel, X, feature_names=None) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != len(m.feature_names):
        raise TrainError(f"expected {len(m.feature_names)} features, got shape {X.shape}")
    if feature_names is not None and list(feature_names) != list(m.feature_names):
        raise TrainError("feature schema does not match the trained model")
    if m.kind == ModelKind.GBDT:
        return softmax(m.raw_scores(X))
    votes = np.zeros((len(X), m.n_classes))
    rows = np.arange(len(X))
    for t in m.trees:
        votes[rows, t.value[t.apply(X)].astype(np.int64)] += 1.0
    return votes / len(m.trees)


def predict(m: TreeEnsembleModel, X, feature_names=None) -> np.ndarray:
    return np.argmax(predict_proba(m, X, feature_names), axis=1)


def feature_importance(m: TreeEnsembleModel, top_k: int | None = None) -> list[tuple[str, float]]:
    """(feature, cumulative gain), descending; ties keep feature order."""
    gain = m.feature_gain
    order = np.lexsort((np.arange(len(gain)), -gain))
    if top_k is not None:
        order = order[:top_k]
    return [(m.feature_names[i], float(gain[i])) for i in order]


# ---------------------------------------------------------------- histograms


class _Hist:
    """Ragged flat histograms: feature f owns cells [start_f, start_f + n_bins_f)."""

    def __init__(self, Xb: np.ndarray, edges, K: int = 1, y=None):
        n, F = Xb.shape
        self.F = F
        self.nb = np.array([len(e) + 1 for e in edges], dtype=np.int64)
        self.start = np.concatenate([[0], np.cumsum(self.nb)[:-1]])
        self.cells = int(self.nb.sum())
        self.feature_of = np.repeat(np.arange(F), self.nb)
        self.bin_of = np.arange(self.cells) - self.start[self.feature_of]
        self.last = self.bin_of == self.nb[self.feature_of] - 1
        flat = Xb.astype(np.int64) + self.start[None, :]
        if K > 1:
            flat = flat * K + np.asarray(y, dtype=np.int64)[:, None]
        self.flat = flat.astype(np.int32)
        self.K = K

    def build(self, rows: np.ndarray, *weights, counts: bool = True) -> list[np.ndarray]:
        idx = self.flat[rows].ravel()
        size = self.cells * self.K
        out = [np.bincount(idx, minlength=size).astype(float)] if counts else []
        for w in weights:
            out.append(np.bincount(idx, weights=np.repeat(w[rows], self.F), minlength=size))
        return [o.reshape(self.cells, self.K) if self.K > 1 else o for o in out]

    def segment_cumsum(self, v: np.ndarray) -> np.ndarray:
        """Cumulative sum restarting at every feature boundary (axis 0)."""
        cs = np.cumsum(v, axis=0)
        before = np.concatenate([np.zeros((1,) + v.shape[1:]), cs])[self.start]
        return cs - np.repeat(before, self.nb, axis=0)

    def locate(self, cell: int) -> tuple[int, int]:
        return int(self.feature_of[cell]), int(self.bin_of[cell])


def _n_sub(ratio: float, n: int) -> int:
    return max(1, int(round(ratio * n)))


# ---------------------------------------------------------------- GBDT


def _best_gbdt_split(hist: _Hist, C, G, H, lam, mcw, cell_ok):
    n0 = hist.nb[0]
    Ct, Gt, Ht = C[:n0].sum(), G[:n0].sum(), H[:n0].sum()
    CL = hist.segment_cumsum(C)
    GL = hist.segment_cumsum(G)
    HL = hist.segment_cumsum(H)
    CR, GR, HR = Ct - CL, Gt - GL, Ht - HL
    valid = cell_ok & (CL > 0) & (CR > 0) & (HL >= mcw) & (HR >= mcw)
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = 0.5 * (GL**2 / (HL + lam) + GR**2 / (HR + lam) - Gt**2 / (Ht + lam))
    gain = np.where(valid, gain, -np.inf)
    i = int(np.argmax(gain))  # lowest feature, then lowest bin
    g = float(gain[i])
    if not g > 0:
        return None
    return (g, *hist.locate(i))


def _grow_gbdt_tree(hist, Xb, rows, g, h, cfg: GbdtConfig, cell_ok):
    lam, mcw = cfg.l2_lambda, cfg.min_child_weight
    nodes = [_leaf()]
    C, G, H = hist.build(rows, g, h)
    frontier = {0: {"rows": rows, "hist": (C, G, H), "depth": 0, "split": _best_gbdt_split(hist, C, G, H, lam, mcw, cell_ok)}}
    n_leaves = 1
    leaf_rows = {}

    def close(nid):
        info = frontier.pop(nid)
        r = info["rows"]
        nodes[nid]["value"] = -float(g[r].sum()) / (float(h[r].sum()) + lam) * cfg.learning_rate
        leaf_rows[nid] = r

    def expand(nid):
        info = frontier.pop(nid)
        gain, f, b = info["split"]
        r = info["rows"]
        mask = Xb[r, f] <= b
        lr_rows = (r[mask], r[~mask])
        small = 0 if len(lr_rows[0]) <= len(lr_rows[1]) else 1
        hs = hist.build(lr_rows[small], g, h)
        hl = tuple(p - s for p, s in zip(info["hist"], hs))
        child_hist = (hs, hl) if small == 0 else (hl, hs)
        ids = []
        for side in (0, 1):
            cid = len(nodes)
            nodes.append(_leaf())
            ids.append(cid)
            Cc, Gc, Hc = child_hist[side]
            depth = info["depth"] + 1
            split = None
            if cfg.growth == Growth.LEAF_WISE or depth < cfg.max_depth:
                split = _best_gbdt_split(hist, Cc, Gc, Hc, lam, mcw, cell_ok)
            frontier[cid] = {"rows": lr_rows[side], "hist": child_hist[side], "depth": depth, "split": split}
        nodes[nid].update(feature=int(f), bin=int(b), left=ids[0], right=ids[1], gain=gain)

    if cfg.growth == Growth.LEAF_WISE:
        while n_leaves < cfg.max_leaves:
            cands = [(info["split"][0], -nid, nid) for nid, info in frontier.items() if info["split"] is not None]
            if not cands:
                break
            nid = max(cands)[2]
            expand(nid)
            n_leaves += 1
    else:
        depth = 0
        while depth < cfg.max_depth:
            level = sorted(nid for nid, info in frontier.items() if info["depth"] == depth and info["split"] is not None)
            if not level:
                break
            for nid in level:
                expand(nid)
            depth += 1
    for nid in sorted(frontier):
        close(nid)
    return nodes, leaf_rows


def fit_gbdt(X, y, cfg: GbdtConfig | None = None, n_classes: int | None = None, X_val=None, y_val=None, feature_names=None) -> TreeEnsembleModel:
    """Softmax gradient boosting with one tree per class and round."""
    cfg = cfg or GbdtConfig()
    cfg.validate()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise TrainError("empty training set")
    K = int(n_classes if n_classes is not None else y.max() + 1)
    if len(np.unique(y)) < 2:
        raise TrainError("training labels contain a single class")
    n, F = X.shape
    names = list(feature_names) if feature_names is not None else [f"f{j}" for j in range(F)]
    edges = [bin_edges(X[:, j], cfg.n_bins) for j in range(F)]
    Xb = apply_bins(X, edges)
    hist = _Hist(Xb, edges)

    prior = np.bincount(y, minlength=K) / n
    base = np.log(np.maximum(prior, 1e-300))
    scores = np.tile(base, (n, 1))
    use_val = X_val is not None and y_val is not None and len(y_val) > 0
    if use_val:
        Xv = np.asarray(X_val, dtype=float)
        yv = np.asarray(y_val, dtype=np.int64)
        Xvb = apply_bins(Xv, edges)
        vscores = np.tile(base, (len(yv), 1))
    trees, tree_class, gains = [], [], np.zeros(F)
    train_log = []
    best_loss, best_round = math.inf, 0
    all_rows = np.arange(n)
    for rnd in range(cfg.n_rounds):
        g, h = softmax_grad_hess(scores, y)
        h = np.maximum(h, 1e-16)
        if cfg.row_subsample < 1:
            rows = np.sort(stream(cfg.seed, "gbdt-rows", rnd).choice(n, _n_sub(cfg.row_subsample, n), replace=False))
        else:
            rows = all_rows
        new_scores = scores.copy()
        for k in range(K):
            cell_ok = ~hist.last
            if cfg.feature_subsample < 1:
                feat_ok = np.zeros(F, dtype=bool)
                feat_ok[stream(cfg.seed, "gbdt-features", rnd, k).choice(F, _n_sub(cfg.feature_subsample, F), replace=False)] = True
                cell_ok = cell_ok & feat_ok[hist.feature_of]
            nodes, leaf_rows = _grow_gbdt_tree(hist, Xb, rows, g[:, k], h[:, k], cfg, cell_ok)
            tree = Tree.from_nodes(nodes, edges)
            if rows is all_rows:
                for nid, r in leaf_rows.items():
                    new_scores[r, k] += tree.value[nid]
            else:
                new_scores[:, k] += tree.value[tree.apply(Xb, binned=True)]
            np.add.at(gains, tree.feature[tree.feature >= 0], tree.gain[tree.feature >= 0])
            trees.append(tree)
            tree_class.append(k)
            if use_val:
                vscores[:, k] += tree.value[tree.apply(Xvb, binned=True)]
        scores = new_scores
        entry = {"round": rnd + 1, "train_loss": cross_entropy(scores, y)}
        if use_val:
            entry["val_loss"] = cross_entropy(vscores, yv)
            if entry["val_loss"] < best_loss:
                best_loss, best_round = entry["val_loss"], rnd + 1
        train_log.append(entry)
        if use_val and cfg.early_stopping_rounds and rnd + 1 - best_round >= cfg.early_stopping_rounds:
            log.info("early stop at round %d (best %d)", rnd + 1, best_round)
            break
    if use_val and cfg.early_stopping_rounds and best_round < len(train_log):
        trees, tree_class = trees[: best_round * K], tree_class[: best_round * K]
        gains = np.zeros(F)
        for t in trees:
            np.add.at(gains, t.feature[t.feature >= 0], t.gain[t.feature >= 0])
    config = {**cfg.to_dict(), "best_round": best_round if use_val else len(train_log)}
    return TreeEnsembleModel(ModelKind.GBDT, K, names, edges, trees, tree_class, base, gains, config, train_log)


# ---------------------------------------------------------------- random forest


def _best_gini_split(hist: _Hist, CH, cell_ok, min_leaf):
    # CH: (cells, K) weighted class counts
    tot = CH[: hist.nb[0]].sum(axis=0)
    N = tot.sum()
    CL = hist.segment_cumsum(CH)
    NL = CL.sum(axis=1)
    CR = tot - CL
    NR = N - NL
    valid = cell_ok & (NL >= min_leaf) & (NR >= min_leaf)
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = (CL**2).sum(axis=1) / NL + (CR**2).sum(axis=1) / NR - (tot**2).sum() / N
    gain = np.where(valid, gain, -np.inf)
    i = int(np.argmax(gain))
    gv = float(gain[i])
    if not gv > 1e-12:
        return None
    return (gv, *hist.locate(i))


def _grow_forest_tree(hist, Xb, rows, w, cfg: ForestConfig, g, n_feat):
    F = Xb.shape[1]
    nodes = [_leaf()]
    (CH,) = hist.build(rows, w, counts=False)
    frontier = [(0, rows, CH, 0)]
    while frontier:
        nxt = []
        for nid, r, CH, depth in frontier:
            counts = CH[: hist.nb[0]].sum(axis=0)
            nodes[nid]["value"] = float(np.argmax(counts))
            if depth >= cfg.max_depth or (counts > 0).sum() < 2:
                continue
            valid_f = np.zeros(F, dtype=bool)
            valid_f[g.choice(F, n_feat, replace=False)] = True
            split = _best_gini_split(hist, CH, ~hist.last & valid_f[hist.feature_of], cfg.min_samples_leaf)
            if split is None:
                continue
            gain, f, b = split
            mask = Xb[r, f] <= b
            parts = (r[mask], r[~mask])
            small = 0 if len(parts[0]) <= len(parts[1]) else 1
            (hs,) = hist.build(parts[small], w, counts=False)
            hl = CH - hs
            hists = (hs, hl) if small == 0 else (hl, hs)
            ids = [len(nodes), len(nodes) + 1]
            nodes += [_leaf(), _leaf()]
            nodes[nid].update(feature=int(f), bin=int(b), left=ids[0], right=ids[1], gain=gain)
            for side in (0, 1):
                nxt.append((ids[side], parts[side], hists[side], depth + 1))
        frontier = nxt
    return nodes


def fit_random_forest(X, y, cfg: ForestConfig | None = None, n_classes: int | None = None, feature_names=None) -> TreeEnsembleModel:
    """Bootstrap Gini forest; probabilities are vote fractions."""
    cfg = cfg or ForestConfig()
    cfg.validate()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise TrainError("empty training set")
    if len(np.unique(y)) < 2:
        raise TrainError("training labels contain a single class")
    K = int(n_classes if n_classes is not None else y.max() + 1)
    n, F = X.shape
    names = list(feature_names) if feature_names is not None else [f"f{j}" for j in range(F)]
    edges = [bin_edges(X[:, j], cfg.n_bins) for j in range(F)]
    Xb = apply_bins(X, edges)
    hist = _Hist(Xb, edges, K, y)
    n_feat = _n_sub(cfg.feature_subsample, F) if cfg.feature_subsample > 0 else max(1, int(math.sqrt(F)))
    trees, gains = [], np.zeros(F)
    for t in range(cfg.n_trees):
        g = stream(cfg.seed, "forest", t)
        w = np.bincount(g.integers(0, n, n), minlength=n).astype(float)
        rows = np.flatnonzero(w > 0)
        tree = Tree.from_nodes(_grow_forest_tree(hist, Xb, rows, w, cfg, g, n_feat), edges)
        np.add.at(gains, tree.feature[tree.feature >= 0], tree.gain[tree.feature >= 0])
        trees.append(tree)
    return TreeEnsembleModel(
        ModelKind.RANDOM_FOREST, K, names, edges, trees, [0] * len(trees), np.zeros(K), gains, cfg.to_dict(), []
    )
