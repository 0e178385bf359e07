"""Independent reference implementations used as test oracles."""
from __future__ import annotations

import itertools
import math

import numpy as np


def silhouette_reference(points, labels) -> float:
    """Plain-loop silhouette: mean over points of (b - a) / max(a, b)."""
    pts = [list(map(float, p)) for p in points]
    lab = list(labels)
    n = len(pts)

    def dist(p, q):
        acc = 0.0
        for x, y in zip(p, q):
            acc += (x - y) ** 2
        return math.sqrt(acc)

    scores = []
    for i in range(n):
        same = [dist(pts[i], pts[j]) for j in range(n) if lab[j] == lab[i] and j != i]
        if not same:
            scores.append(0.0)
            continue
        a = math.fsum(same) / len(same)
        b = math.inf
        for c in set(lab) - {lab[i]}:
            ds = [dist(pts[i], pts[j]) for j in range(n) if lab[j] == c]
            b = min(b, math.fsum(ds) / len(ds))
        top = max(a, b)
        scores.append(0.0 if top == 0 else (b - a) / top)
    return math.fsum(scores) / n


def optimal_inertia(X: np.ndarray, k: int) -> float:
    """Smallest k-means objective over every assignment of the points to k labels."""
    X = np.asarray(X, dtype=float)
    n = len(X)
    labels = np.array(list(itertools.product(range(k), repeat=n)), dtype=np.int8)
    total = float((X**2).sum())
    explained = np.zeros(len(labels))
    for c in range(k):
        mask = (labels == c).astype(float)
        cnt = mask.sum(axis=1)
        S = mask @ X
        with np.errstate(invalid="ignore", divide="ignore"):
            explained += np.where(cnt > 0, (S**2).sum(axis=1) / cnt, 0.0)
    return max(0.0, total - float(explained.max()))


def softmax_ce_central_differences(scores, label: int, h: str = "1e-12", dps: int = 60):
    """Central-difference gradient and diagonal hessian of one sample's cross-entropy.

    Evaluated in extended precision so truncation and rounding error sit far
    below the double-precision values being checked.
    """
    import mpmath

    with mpmath.workdps(dps):
        s = [mpmath.mpf(float(v)) for v in scores]
        step = mpmath.mpf(h)

        def loss(vec):
            return mpmath.log(mpmath.fsum(mpmath.exp(v) for v in vec)) - vec[label]

        base = loss(s)
        g, H = [], []
        for k in range(len(s)):
            up = list(s)
            dn = list(s)
            up[k] += step
            dn[k] -= step
            fu, fd = loss(up), loss(dn)
            g.append(float((fu - fd) / (2 * step)))
            H.append(float((fu - 2 * base + fd) / step**2))
    return np.array(g), np.array(H)
