"""Tree-structured Parzen estimator search over hyperparameter spaces."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import stream

log = logging.getLogger(__name__)


class SpaceError(ValueError):
    pass


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float
    log: bool = False

    def __post_init__(self):
        if not self.low < self.high:
            raise SpaceError(f"degenerate interval [{self.low}, {self.high}]")
        if self.log and self.low <= 0:
            raise SpaceError("log-uniform bounds must be positive")

    def _to(self, v):
        return np.log(v) if self.log else np.asarray(v, dtype=float)

    def _from(self, u):
        v = float(np.exp(u)) if self.log else float(u)
        return min(max(v, self.low), self.high)  # exp(log(hi)) may overshoot by an ulp

    @property
    def bounds(self):
        return (math.log(self.low), math.log(self.high)) if self.log else (self.low, self.high)

    def contains(self, v) -> bool:
        return self.low <= v <= self.high


@dataclass(frozen=True)
class IntRange:
    low: int
    high: int  # inclusive

    def __post_init__(self):
        if not self.low < self.high:
            raise SpaceError(f"degenerate integer range [{self.low}, {self.high}]")

    def _to(self, v):
        return np.asarray(v, dtype=float)

    def _from(self, u):
        return int(min(max(round(float(u)), self.low), self.high))

    @property
    def bounds(self):
        return (self.low - 0.5, self.high + 0.5)

    def contains(self, v) -> bool:
        return isinstance(v, int) and self.low <= v <= self.high


@dataclass(frozen=True)
class Categorical:
    choices: tuple

    def __post_init__(self):
        if not len(self.choices):
            raise SpaceError("categorical choice set is empty")

    def contains(self, v) -> bool:
        return v in self.choices


def parse_domain(spec) -> Uniform | IntRange | Categorical:
    """Domain from a config mapping such as ``{"uniform": [0, 1]}`` or ``{"choice": [...]}``."""
    if not isinstance(spec, dict) or len(spec) != 1:
        raise SpaceError(f"domain must be a single-key mapping, got {spec!r}")
    (kind, arg), = spec.items()
    if kind == "uniform":
        return Uniform(float(arg[0]), float(arg[1]))
    if kind == "loguniform":
        return Uniform(float(arg[0]), float(arg[1]), log=True)
    if kind == "int":
        return IntRange(int(arg[0]), int(arg[1]))
    if kind == "choice":
        return Categorical(tuple(arg))
    raise SpaceError(f"unknown domain kind {kind!r}")


@dataclass
class TrialRecord:
    index: int
    config: dict
    objective: float | None
    status: str  # "ok" or "failed"
    seed: int
    error: str = ""


@dataclass
class TuneResult:
    best_config: dict | None
    best_objective: float | None
    history: list[TrialRecord] = field(default_factory=list)

    def table(self, names) -> list[dict]:
        rows, best = [], -math.inf
        for t in self.history:
            if t.status == "ok":
                best = max(best, t.objective)
            row = {"trial": t.index, "status": t.status, "objective": "" if t.objective is None else t.objective}
            row["best_so_far"] = "" if best == -math.inf else best
            row.update({n: t.config.get(n, "") for n in names})
            row["error"] = t.error
            rows.append(row)
        return rows


def _sample_prior(space: dict, g: np.random.Generator) -> dict:
    out = {}
    for name, dom in space.items():
        if isinstance(dom, Categorical):
            out[name] = dom.choices[int(g.integers(len(dom.choices)))]
        else:
            lo, hi = dom.bounds
            out[name] = dom._from(g.uniform(lo, hi))
    return out


def _silverman(x: np.ndarray, lo: float, hi: float) -> float:
    sd = float(np.std(x)) if len(x) > 1 else 0.0
    bw = 1.06 * sd * len(x) ** -0.2
    # floor keeps a clustered good set from collapsing the search
    return max(bw, (hi - lo) / min(100.0, len(x) + 1.0))


def _mixture_logpdf(u: np.ndarray, centers: np.ndarray, bw: float, lo: float, hi: float) -> np.ndarray:
    """Equal-weight Gaussian kernels at ``centers`` plus one wide prior kernel."""
    mu = np.append(centers, (lo + hi) / 2)
    sig = np.append(np.full(len(centers), bw), hi - lo)
    z = (u[:, None] - mu[None, :]) / sig[None, :]
    ll = -0.5 * z**2 - np.log(sig * math.sqrt(2 * math.pi))[None, :]
    m = ll.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(ll - m).mean(axis=1, keepdims=True))).ravel()


def _suggest(space: dict, good: list[dict], everyone: list[dict], g: np.random.Generator, n_candidates: int) -> dict:
    score = np.zeros(n_candidates)
    cands = [dict() for _ in range(n_candidates)]
    for name, dom in space.items():
        if isinstance(dom, Categorical):
            k = len(dom.choices)
            pos = {c: i for i, c in enumerate(dom.choices)}
            pg = np.ones(k)
            pa = np.ones(k)
            for t in good:
                pg[pos[t[name]]] += 1
            for t in everyone:
                pa[pos[t[name]]] += 1
            pg /= pg.sum()
            pa /= pa.sum()
            idx = g.choice(k, size=n_candidates, p=pg)
            score += np.log(pg[idx]) - np.log(pa[idx])
            for c, i in zip(cands, idx):
                c[name] = dom.choices[int(i)]
            continue
        lo, hi = dom.bounds
        xg = np.array([float(dom._to(t[name])) for t in good])
        xa = np.array([float(dom._to(t[name])) for t in everyone])
        bg, ba = _silverman(xg, lo, hi), _silverman(xa, lo, hi)
        comp = g.integers(len(xg) + 1, size=n_candidates)
        prior = comp == len(xg)
        u = np.where(prior, g.uniform(lo, hi, n_candidates), xg[np.minimum(comp, len(xg) - 1)] + bg * g.standard_normal(n_candidates))
        u = np.clip(u, lo, hi)
        if isinstance(dom, IntRange):
            u = np.clip(np.round(u), dom.low, dom.high)
        score += _mixture_logpdf(u, xg, bg, lo, hi) - _mixture_logpdf(u, xa, ba, lo, hi)
        for c, v in zip(cands, u):
            c[name] = dom._from(v)
    return cands[int(np.argmax(score))]


def tpe_optimize(
    space: dict,
    objective,
    n_trials: int,
    seed: int = 0,
    n_startup: int = 10,
    gamma: float = 0.25,
    n_candidates: int = 24,
) -> TuneResult:
    """Maximize ``objective(config)``; failing calls are recorded and ignored.

    >>> res = tpe_optimize({"x": Uniform(0.0, 10.0)}, lambda c: -(c["x"] - 3) ** 2, 30, seed=1)
    >>> abs(res.best_config["x"] - 3) < 1.0
    True
    """
    if n_trials < 1:
        raise SpaceError("n_trials must be at least 1")
    if not space:
        raise SpaceError("search space is empty")
    history: list[TrialRecord] = []
    for i in range(n_trials):
        g = stream(seed, "tpe", i)
        done = [t for t in history if t.status == "ok"]
        if len(done) < max(n_startup, 2):
            cfg = _sample_prior(space, g)
        else:
            ranked = sorted(done, key=lambda t: (-t.objective, t.index))
            n_good = max(1, math.ceil(gamma * len(ranked)))
            cfg = _suggest(space, [t.config for t in ranked[:n_good]], [t.config for t in ranked], g, n_candidates)
        try:
            value = float(objective(cfg))
            if not math.isfinite(value):
                raise ValueError(f"non-finite objective {value}")
            history.append(TrialRecord(i, cfg, value, "ok", seed))
        except Exception as exc:  # a failed trial must not end the search
            log.warning("trial %d failed: %s", i, exc)
            history.append(TrialRecord(i, cfg, None, "failed", seed, f"{type(exc).__name__}: {exc}"))
    ok = [t for t in history if t.status == "ok"]
    if not ok:
        return TuneResult(None, None, history)
    best = min(ok, key=lambda t: (-t.objective, t.index))
    return TuneResult(dict(best.config), best.objective, history)


def random_search(space: dict, objective, n_trials: int, seed: int = 0) -> TuneResult:
    """Baseline: every trial drawn from the prior."""
    return tpe_optimize(space, objective, n_trials, seed=seed, n_startup=n_trials + 1)
