"""Chi-square independence test with a self-contained regularized incomplete gamma."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_EPS = 1e-17
_TINY = 1e-300
_MAX_ITER = 100_000


def _log_prefactor(a: float, x: float) -> float:
    return a * math.log(x) - x - math.lgamma(a)


def _series_p(a: float, x: float) -> float:
    """Lower regularized gamma P(a, x) by its power series (use for x < a + 1)."""
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return math.exp(_log_prefactor(a, x)) * total


def _log_cf_q(a: float, x: float) -> float:
    """log Q(a, x) by the modified-Lentz continued fraction (use for x >= a + 1)."""
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return _log_prefactor(a, x) + math.log(h)


def log_gammaincc(a: float, x: float) -> float:
    """Natural log of the upper regularized incomplete gamma Q(a, x)."""
    if a <= 0:
        raise ValueError("shape a must be positive")
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0:
        return 0.0
    if x < a + 1.0:
        p = _series_p(a, x)
        return math.log1p(-p) if p < 1.0 else -math.inf
    return _log_cf_q(a, x)


def gammaincc(a: float, x: float) -> float:
    """Upper regularized incomplete gamma Q(a, x) = Gamma(a, x) / Gamma(a).

    >>> round(gammaincc(0.5, 20.0), 12)  # chi-square p of 40 with 1 dof
    2.54e-10
    """
    return math.exp(log_gammaincc(a, x))


def chi2_sf(statistic: float, dof: int) -> float:
    return gammaincc(dof / 2.0, statistic / 2.0)


@dataclass(frozen=True)
class ChiSquareResult:
    statistic: float
    dof: int
    p_value: float
    log10_p: float  # finite even when p underflows to 0.0

    def as_row(self) -> dict:
        return {"statistic": self.statistic, "dof": self.dof, "p_value": self.p_value, "log10_p": self.log10_p}


def chi_square_independence(table) -> ChiSquareResult:
    """Pearson chi-square test of independence on an r x c count table."""
    obs = np.asarray(table, dtype=float)
    if obs.ndim != 2 or obs.shape[0] < 2 or obs.shape[1] < 2:
        raise ValueError("contingency table must be at least 2 x 2")
    if (obs < 0).any():
        raise ValueError("counts must be non-negative")
    rows = obs.sum(axis=1)
    cols = obs.sum(axis=0)
    if (rows == 0).any() or (cols == 0).any():
        raise ValueError("contingency table has a zero marginal")
    total = obs.sum()
    expected = np.outer(rows, cols) / total
    stat = math.fsum(((obs - expected) ** 2 / expected).ravel().tolist())
    dof = (obs.shape[0] - 1) * (obs.shape[1] - 1)
    log_q = log_gammaincc(dof / 2.0, stat / 2.0)
    return ChiSquareResult(stat, dof, math.exp(log_q), log_q / math.log(10.0))
