"""Seeded toy cascade simulator.

Flows come from a DC power-flow style redistribution (PTDF of the active
line set), which is cheap and deterministic. Injections are built from
daily load/wind profiles; the planted failure modes shape the terminal
window so that the failure descriptors land in a recognisable region.

Grid rules implemented here:

* a connected line with ``rho >= 1`` for ``overflow_disconnect_after``
  consecutive steps is disconnected at the next step;
* an attacked line is disconnected at its scheduled step and stays out
  for ``attack_duration`` steps (only an agent can reconnect it);
* the episode fails at step ``n`` when the grid splits into islands,
  dispatchable generation cannot balance the load, or a line reaches
  ``rho_diverge``; the last observation is then ``n - 1``.
"""
from __future__ import annotations

import functools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.signal import lfilter

from . import rng
from .episode import (
    DEFAULT_HORIZON,
    Episode,
    ErrorType,
    GridSchema,
    TerminationInfo,
    Trajectory,
)

log = logging.getLogger(__name__)


class AgentProfile(str, Enum):
    PASSIVE = "PASSIVE"
    RECONNECTOR = "RECONNECTOR"
    TOPOLOGY_FIXER = "TOPOLOGY_FIXER"


class FailureMode(str, Enum):
    TOPO_DRIFT = "TOPO_DRIFT"
    LOAD_DROP = "LOAD_DROP"
    LINE_CASCADE = "LINE_CASCADE"
    GEN_SURGE = "GEN_SURGE"
    FLOW_SURGE = "FLOW_SURGE"
    NONE = "NONE"


AGENT_PROFILES = {
    "DO_NOTHING": AgentProfile.PASSIVE,
    "SENIOR": AgentProfile.RECONNECTOR,
    "TOPOLOGY": AgentProfile.TOPOLOGY_FIXER,
}
PROFILE_AGENTS = {v: k for k, v in AGENT_PROFILES.items()}

# Typical onset step (median) per planted mode; spread is log-normal.
ONSET_MEDIAN = {
    FailureMode.TOPO_DRIFT: 480,
    FailureMode.LOAD_DROP: 260,
    FailureMode.LINE_CASCADE: 380,
    FailureMode.GEN_SURGE: 140,
    FailureMode.FLOW_SURGE: 380,
}

STEPS_PER_HOUR = 12
STEPS_PER_DAY = 288


# IEEE 14-bus branch list (from bus, to bus, reactance p.u.), buses 1-based.
_IEEE14_BRANCHES = (
    (1, 2, 0.05917), (1, 5, 0.22304), (2, 3, 0.19797), (2, 4, 0.17632),
    (2, 5, 0.17388), (3, 4, 0.17103), (4, 5, 0.04211), (4, 7, 0.20912),
    (4, 9, 0.55618), (5, 6, 0.25202), (6, 11, 0.19890), (6, 12, 0.25581),
    (6, 13, 0.13027), (7, 8, 0.17615), (7, 9, 0.11001), (9, 10, 0.08450),
    (9, 14, 0.27038), (10, 11, 0.19207), (12, 13, 0.19988), (13, 14, 0.34802),
)
_IEEE14_LOADS = (
    (2, 21.7), (3, 94.2), (4, 47.8), (5, 7.6), (6, 11.2), (9, 29.5),
    (10, 25.0), (11, 3.5), (12, 3.0), (13, 13.5), (14, 25.0),
)
# (bus, kind, capacity MW)
_IEEE14_GENS = (
    (1, "dispatch", 300.0), (2, "dispatch", 120.0), (3, "wind", 60.0),
    (6, "wind", 45.0), (8, "reserve", 60.0),
)


def ieee14_schema() -> GridSchema:
    """Built-in 14-substation test grid."""
    return GridSchema(
        name="ieee14-toy",
        n_substations=14,
        line_endpoints=tuple((a - 1, b - 1) for a, b, _ in _IEEE14_BRANCHES),
        gen_substation=tuple(b - 1 for b, _, _ in _IEEE14_GENS),
        load_substation=tuple(b - 1 for b, _ in _IEEE14_LOADS),
        attackable_line_ids=frozenset({1, 4, 6, 7, 9, 11, 12, 14, 16, 17}),
        sub_grid_id=("A", "A", "A", "A", "A", "B", "C", "C", "C", "C", "B", "B", "B", "C"),
    )


@dataclass(frozen=True)
class GridPhysics:
    """Electrical parameters the simulator needs beyond the schema."""

    reactance: tuple[float, ...]
    line_limit: tuple[float, ...]
    load_base: tuple[float, ...]
    gen_kind: tuple[str, ...]
    gen_capacity: tuple[float, ...]
    dispatch_min_fraction: float = 0.15


@functools.lru_cache(maxsize=32)
def default_physics(schema: GridSchema) -> GridPhysics:
    """Physics for the built-in grid, or a seeded derivation for any other schema."""
    if schema.name == "ieee14-toy":
        reactance = tuple(x for _, _, x in _IEEE14_BRANCHES)
        load_base = tuple(v for _, v in _IEEE14_LOADS)
        kinds = tuple(k for _, k, _ in _IEEE14_GENS)
        caps = tuple(c for _, _, c in _IEEE14_GENS)
    else:
        g = rng.stream(0, "physics", schema.name)
        reactance = tuple(float(v) for v in 0.05 + 0.25 * g.random(schema.n_lines))
        load_base = tuple(float(v) for v in 5.0 + 55.0 * g.random(schema.n_loads))
        n = schema.n_generators
        if n < 2:
            raise ValueError("the simulator needs at least two generators")
        kinds = ["dispatch"] * min(2, n) + ["wind"] * max(0, n - 3) + (["reserve"] if n > 2 else [])
        kinds = tuple(kinds[:n])
        total = sum(load_base)
        caps = tuple(
            {"dispatch": 0.9 * total, "wind": 0.15 * total, "reserve": 0.2 * total}[k] for k in kinds
        )
    phys = GridPhysics(reactance, (), load_base, kinds, caps)
    limits = _derive_limits(schema, phys)
    return replace(phys, line_limit=tuple(float(v) for v in limits))


@functools.lru_cache(maxsize=32)
def _network(schema: GridSchema, phys: GridPhysics) -> "_Network":
    # shared per process so flow factors are reused across episodes
    return _Network(schema, phys)


def _derive_limits(schema: GridSchema, phys: GridPhysics) -> np.ndarray:
    # Size lines so that peak load survives any single attackable-line outage.
    net = _Network(schema, phys)
    full = np.ones(schema.n_lines, dtype=bool)
    cases = [full]
    for l in sorted(schema.attackable_line_ids):
        act = full.copy()
        act[l] = False
        if net.connected(act):
            cases.append(act)
    peak = np.zeros(schema.n_lines)
    load = np.array(phys.load_base)
    for wind_level in (0.1, 0.5, 0.9):
        inj = _injection_vector(schema, _dispatch_single(phys, load.sum(), wind_level), load)
        base = np.abs(net.ptdf(full) @ inj)
        peak = np.maximum(peak, base / 0.7)
        for act in cases[1:]:
            peak = np.maximum(peak, np.abs(net.ptdf(act) @ inj) / 0.95)
    return np.maximum(peak, 12.0)


def _dispatch_single(phys: GridPhysics, total_load: float, wind_level: float) -> np.ndarray:
    gen = np.zeros(len(phys.gen_kind))
    caps = np.array(phys.gen_capacity)
    kinds = np.array(phys.gen_kind)
    wind = kinds == "wind"
    gen[wind] = caps[wind] * wind_level
    gen[kinds == "reserve"] = 0.5
    disp = kinds == "dispatch"
    residual = total_load - gen.sum()
    gen[disp] = residual * caps[disp] / caps[disp].sum()
    return gen


def _injection_vector(schema: GridSchema, gen, load) -> np.ndarray:
    inj = np.zeros(schema.n_substations)
    np.add.at(inj, np.array(schema.gen_substation, dtype=int), gen)
    np.subtract.at(inj, np.array(schema.load_substation, dtype=int), load)
    return inj


class _Network:
    """Topology-dependent flow factors with a per-instance cache."""

    def __init__(self, schema: GridSchema, phys: GridPhysics):
        self.schema = schema
        self.n_sub = schema.n_substations
        self.ends = np.array(schema.line_endpoints, dtype=int).reshape(-1, 2)
        self.susceptance = 1.0 / np.array(phys.reactance)
        self.element_subs = sorted(set(schema.gen_substation) | set(schema.load_substation))
        self.lines_at = [schema.lines_at(s) for s in range(self.n_sub)]
        self._cache: dict[bytes, np.ndarray | None] = {}
        self._connected: dict[bytes, bool] = {}

    def active_lines(self, status: np.ndarray, topology: np.ndarray) -> np.ndarray:
        """Lines that carry flow: connected and not isolated by a bus split."""
        active = status.copy()
        for s in np.flatnonzero(topology):
            lines = self.lines_at[s]
            if lines:
                active[lines[(topology[s] - 1) % len(lines)]] = False
        return active

    def components(self, active: np.ndarray) -> np.ndarray:
        parent = list(range(self.n_sub))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for (a, b) in self.ends[active]:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        return np.array([find(a) for a in range(self.n_sub)])

    def connected(self, active: np.ndarray) -> bool:
        key = active.tobytes()
        hit = self._connected.get(key)
        if hit is None:
            comp = self.components(active)
            hit = self._connected[key] = len({comp[s] for s in self.element_subs}) == 1
        return hit

    def ptdf(self, active: np.ndarray) -> np.ndarray | None:
        """Line-flow sensitivities to nodal injections; None if the grid is split."""
        key = active.tobytes()
        if key in self._cache:
            return self._cache[key]
        if not self.connected(active):
            self._cache[key] = None
            return None
        comp = self.components(active)
        main = comp[self.element_subs[0]]
        nodes = np.flatnonzero(comp == main)
        ref, keep = nodes[0], nodes[1:]
        n_lines = len(self.ends)
        A = np.zeros((n_lines, self.n_sub))
        idx = np.arange(n_lines)
        A[idx, self.ends[:, 0]] = 1.0
        A[idx, self.ends[:, 1]] = -1.0
        bA = (self.susceptance * active)[:, None] * A
        B = A.T @ bA
        inv = np.zeros((self.n_sub, self.n_sub))
        if len(keep):
            inv[np.ix_(keep, keep)] = np.linalg.inv(B[np.ix_(keep, keep)])
        out = bA @ inv
        out.setflags(write=False)
        self._cache[key] = out
        return out


@dataclass(frozen=True)
class SynthConfig:
    """Everything that determines one simulated episode.

    ``chronic_salt`` keys the chronic-level data (load/wind profiles,
    calendar), so the same ``chronic_id`` under a different salt is a
    different scenario; out-of-distribution corpora use their own salt.
    """

    schema: GridSchema = field(default_factory=ieee14_schema)
    horizon: int = DEFAULT_HORIZON
    seed: int = 0
    chronic_id: str = "chronic_0000"
    chronic_salt: str = "train"
    agent_profile: AgentProfile = AgentProfile.PASSIVE
    attack_schedule: tuple[tuple[int, int], ...] = ()
    attacks_per_day: float = 0.0
    planted_failure_mode: FailureMode = FailureMode.NONE
    failure_onset: int | None = None
    # daily profile parameters
    load_scale: float = 1.0
    load_night_level: float = 0.62
    load_noise: float = 0.015
    wind_mean: float = 0.45
    wind_volatility: float = 0.01
    maintenance_per_week: float = 1.0
    overflow_disconnect_after: int = 3
    attack_duration: int = 48
    line_cooldown: int = 12
    sub_cooldown: int = 3
    reconnect_cooldown: int = 3
    rho_diverge: float = 2.0
    physics: GridPhysics | None = None

    def __post_init__(self):
        object.__setattr__(self, "agent_profile", AgentProfile(self.agent_profile))
        object.__setattr__(self, "planted_failure_mode", FailureMode(self.planted_failure_mode))
        object.__setattr__(
            self, "attack_schedule", tuple((int(t), int(l)) for t, l in self.attack_schedule)
        )
        problems = self.problems()
        if problems:
            raise ValueError("invalid synth config: " + "; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.horizon < 1:
            out.append("horizon must be positive")
        if self.overflow_disconnect_after < 1:
            out.append("overflow_disconnect_after must be >= 1")
        for t, l in self.attack_schedule:
            if not 0 <= t < self.horizon:
                out.append(f"attack step {t} outside horizon")
            if l not in self.schema.attackable_line_ids:
                out.append(f"attacked line {l} is not attackable")
        if self.failure_onset is not None and not 1 <= self.failure_onset < self.horizon:
            out.append("failure_onset must lie inside the horizon")
        if self.schema.n_generators < 2:
            out.append("schema needs at least two generators")
        return out

    @property
    def agent(self) -> str:
        return PROFILE_AGENTS[self.agent_profile]

    def resolved_physics(self) -> GridPhysics:
        return self.physics if self.physics is not None else default_physics(self.schema)


@dataclass
class _Scenario:
    """Precomputed exogenous inputs for one episode."""

    load: np.ndarray  # (T, n_loads)
    gen: np.ndarray  # (T, n_gens), after dispatch
    feasible_dispatch: np.ndarray  # (T,)
    attacks: dict[int, list[int]]
    maintenance: list[tuple[int, int, int]]  # (line, start, duration)
    forced_topology: dict[int, tuple[int, int]]  # step -> (sub, config)
    start_dow: int
    onset: int | None


def _calendar(step: np.ndarray, start_dow: int):
    minutes = step * 5
    return (
        minutes % 60,
        (minutes // 60) % 24,
        (start_dow + minutes // 1440) % 7,
    )


def _daily_shape(hour_float: np.ndarray) -> np.ndarray:
    # 0 at 03:00, 1 at 15:00
    return 0.5 - 0.5 * np.cos(2 * np.pi * (hour_float - 3.0) / 24.0)


def _onset(cfg: SynthConfig, g: np.random.Generator) -> int | None:
    mode = cfg.planted_failure_mode
    if mode == FailureMode.NONE:
        return None
    if cfg.failure_onset is not None:
        return cfg.failure_onset
    median = ONSET_MEDIAN[mode]
    t = int(round(median * math.exp(0.55 * g.standard_normal())))
    return int(np.clip(t, 12, max(13, cfg.horizon - 60)))


def _build_scenario(cfg: SynthConfig, phys: GridPhysics, net: _Network) -> _Scenario:
    schema = cfg.schema
    T = cfg.horizon
    steps = np.arange(T)
    chron = rng.stream(0, cfg.chronic_salt, cfg.chronic_id, "chronic")
    start_dow = int(chron.integers(0, 7))
    load_scale = cfg.load_scale * (0.9 + 0.2 * chron.random())
    load_shares = 1.0 + 0.04 * chron.standard_normal(schema.n_loads)
    # chronics start at night with little wind
    wind_start = 0.1 + 0.2 * chron.random()

    hours = (steps * 5.0 / 60.0) % 24.0
    days = (start_dow + (steps * 5) // 1440) % 7
    weekly = np.where(days >= 5, 0.9, 1.0)
    level = cfg.load_night_level + (1.0 - cfg.load_night_level) * _daily_shape(hours)
    noise = _ar1(rng.step_block(0, cfg.chronic_salt, cfg.chronic_id, "load-noise", steps=T, width=schema.n_loads), 0.97)
    load = (
        np.array(phys.load_base)[None, :]
        * load_shares[None, :]
        * load_scale
        * (level * weekly)[:, None]
        * (1.0 + cfg.load_noise * noise)
    )

    kinds = np.array(phys.gen_kind)
    caps = np.array(phys.gen_capacity)
    wind_idx = np.flatnonzero(kinds == "wind")
    reserve_idx = np.flatnonzero(kinds == "reserve")
    disp_idx = np.flatnonzero(kinds == "dispatch")
    wnoise = rng.step_block(0, cfg.chronic_salt, cfg.chronic_id, "wind", steps=T, width=len(wind_idx))
    wind = wind_start + (cfg.wind_mean - wind_start) * (1 - 0.995 ** steps)[:, None]
    wpath = _ar1(wnoise, 0.995)
    wind = np.clip(wind + cfg.wind_volatility * 10 * (wpath - wpath[:1]), 0.08, 0.95)
    gen = np.zeros((T, schema.n_generators))
    gen[:, wind_idx] = wind * caps[wind_idx]
    reserve_base = 0.45 + 0.1 * chron.random(len(reserve_idx))
    rnoise = rng.step_block(0, cfg.chronic_salt, cfg.chronic_id, "reserve", steps=T, width=len(reserve_idx))
    gen[:, reserve_idx] = reserve_base[None, :] * (1.0 + 0.05 * np.tanh(rnoise))

    ep = rng.stream(cfg.seed, cfg.chronic_id, cfg.agent, "episode")
    onset = _onset(cfg, ep)
    attacks: dict[int, list[int]] = {}
    for t, l in cfg.attack_schedule:
        attacks.setdefault(t, []).append(l)
    attackable = sorted(schema.attackable_line_ids)
    if cfg.attacks_per_day > 0 and attackable:
        opp = rng.stream(cfg.seed, cfg.chronic_id, "opponent")
        n_att = opp.poisson(cfg.attacks_per_day * T / STEPS_PER_DAY)
        for _ in range(n_att):
            t = int(opp.integers(1, T))
            attacks.setdefault(t, []).append(int(opp.choice(attackable)))
    maintenance = []
    n_maint = chron.poisson(cfg.maintenance_per_week * T / (7 * STEPS_PER_DAY))
    for _ in range(n_maint):
        if not attackable:
            break
        line = int(chron.choice(attackable))
        start = int(chron.integers(STEPS_PER_HOUR, max(STEPS_PER_HOUR + 1, T)))
        maintenance.append((line, start, int(chron.integers(12, 37))))
    forced: dict[int, tuple[int, int]] = {}

    mode = cfg.planted_failure_mode
    if onset is not None:
        mg = rng.stream(cfg.seed, cfg.chronic_id, cfg.agent, "mode", mode.value)
        # keep the terminal window clean of unrelated exogenous events
        for t in [t for t in attacks if t >= onset - 30]:
            del attacks[t]
        maintenance = [m for m in maintenance if m[1] + m[2] < onset - 30 or m[1] > T]
        _plant(mode, cfg, mg, onset, load, gen, wind_idx, reserve_idx, caps, attacks, forced, net)

    feasible = np.ones(T, dtype=bool)
    residual = load.sum(axis=1) - gen[:, np.concatenate([wind_idx, reserve_idx])].sum(axis=1)
    dcap = caps[disp_idx]
    pmin = phys.dispatch_min_fraction * dcap
    share = dcap / dcap.sum()
    disp = residual[:, None] * share[None, :]
    feasible &= (residual >= pmin.sum()) & (residual <= dcap.sum())
    gen[:, disp_idx] = disp
    return _Scenario(load, gen, feasible, attacks, maintenance, forced, start_dow, onset)


def _ar1(shocks: np.ndarray, phi: float) -> np.ndarray:
    """Unit-variance AR(1) paths driven by standard-normal shocks (one column per element)."""
    scaled = shocks * math.sqrt(1.0 - phi * phi)
    scaled[0] = shocks[0]
    return lfilter([1.0], [1.0, -phi], scaled, axis=0)


def _plant(mode, cfg, g, onset, load, gen, wind_idx, reserve_idx, caps, attacks, forced, net):
    """Apply the planted failure mode from ``onset`` on (mutates inputs)."""
    T = len(load)
    schema = cfg.schema
    tail = np.arange(T - onset)
    if mode == FailureMode.LOAD_DROP:
        rate = 0.05 + 0.03 * g.random()
        factor = np.maximum(0.05, 1.0 - rate * (tail + 1))
        hit = g.random(schema.n_loads) < 0.8
        hit[int(np.argmax(load[onset]))] = True
        load[onset:, hit] *= factor[:, None]
        gen[onset:, wind_idx] *= (1.0 + 0.04 * (tail + 1))[:, None].clip(max=1.6)
    elif mode == FailureMode.GEN_SURGE:
        target = caps[reserve_idx] * (0.35 + 0.05 * g.random(len(reserve_idx)))
        growth = 1.6 + 0.2 * g.random()
        base = gen[onset, reserve_idx]
        surged = base[None, :] * growth ** np.minimum(tail[:, None] + 1, 60)
        gen[onset:, reserve_idx] = np.minimum(surged, target[None, :])
    elif mode == FailureMode.FLOW_SURGE:
        rate = 0.18 + 0.04 * g.random()
        ramp = 1.0 + rate * (tail + 1)
        load[onset:] *= ramp[:, None]
        gen[onset:, wind_idx] *= np.minimum(ramp, 2.0)[:, None]
    elif mode == FailureMode.LINE_CASCADE:
        attackable = sorted(schema.attackable_line_ids)
        # three outages that leave the grid whole; the overloads do the rest
        full = np.ones(schema.n_lines, dtype=bool)
        for _ in range(50):
            targets = [int(v) for v in g.choice(attackable, size=3, replace=False)]
            act = full.copy()
            act[targets] = False
            if net.connected(act):
                break
        t = onset
        for line in targets:
            if t >= T:
                break
            attacks.setdefault(t, []).append(line)
            t += int(g.integers(2, 6))
        rate = 0.01 + 0.01 * g.random()
        load[onset:] *= np.minimum(1.0 + rate * (tail + 1), 1.3)[:, None]
    elif mode == FailureMode.TOPO_DRIFT:
        n_changes = int(g.integers(5, 10))
        t = onset
        for i in range(n_changes + 1):
            forced[t] = (-1, i)  # resolved at run time against the live topology
            t += int(g.integers(1, 3))
            if t >= T:
                break


@dataclass
class _State:
    status: np.ndarray
    topology: np.ndarray
    overflow: np.ndarray
    cooldown_line: np.ndarray
    cooldown_sub: np.ndarray
    pending_trip: np.ndarray
    out_until: np.ndarray  # step at which an outage (attack/maintenance) ends; -1 none
    auto_reconnect: np.ndarray  # maintenance lines come back on their own


class _Recorder:
    def __init__(self, T: int, schema: GridSchema):
        L, G, D, S = schema.n_lines, schema.n_generators, schema.n_loads, schema.n_substations
        self.cols = {
            "rho": np.zeros((T, L)),
            "line_status": np.zeros((T, L), dtype=bool),
            "ts_overflow_line": np.zeros((T, L), dtype=np.int64),
            "cooldown_line": np.zeros((T, L), dtype=np.int64),
            "cooldown_sub": np.zeros((T, S), dtype=np.int64),
            "maintenance_time": np.zeros((T, L), dtype=np.int64),
            "p_or": np.zeros((T, L)),
            "p_ex": np.zeros((T, L)),
            "gen_p": np.zeros((T, G)),
            "load_p": np.zeros((T, D)),
            "sub_topology": np.zeros((T, S), dtype=np.int64),
        }

    def trajectory(self, n: int, start_dow: int) -> Trajectory:
        step = np.arange(n)
        minute, hour, dow = _calendar(step, start_dow)
        cols = {k: v[:n] for k, v in self.cols.items()}
        return Trajectory(step=step, minute_of_hour=minute, hour_of_day=hour, day_of_week=dow, **cols)


def _maintenance_countdown(maintenance, T, n_lines) -> np.ndarray:
    out = np.full((T, n_lines), -1, dtype=np.int64)
    for line, start, duration in sorted(maintenance, key=lambda m: -m[1]):
        lo, hi = 0, min(start + duration, T)
        for t in range(lo, min(start, T)):
            out[t, line] = start - t
        out[start:hi, line] = 0
    return out


def generate_episode(cfg: SynthConfig) -> Episode:
    """Simulate one episode; a pure function of ``cfg``."""
    schema = cfg.schema
    phys = cfg.resolved_physics()
    net = _network(schema, phys)
    sc = _build_scenario(cfg, phys, net)
    T, L, S = cfg.horizon, schema.n_lines, schema.n_substations
    limits = np.array(phys.line_limit)
    K = cfg.overflow_disconnect_after
    ep_rng = rng.stream(cfg.seed, cfg.chronic_id, cfg.agent, "termination")
    inj = np.zeros((T, S))
    gsub = np.array(schema.gen_substation, dtype=int)
    lsub = np.array(schema.load_substation, dtype=int)
    for i, s in enumerate(gsub):
        inj[:, s] += sc.gen[:, i]
    for i, s in enumerate(lsub):
        inj[:, s] -= sc.load[:, i]
    maint = _maintenance_countdown(sc.maintenance, T, L)
    maint_start = {}
    for line, start, duration in sc.maintenance:
        maint_start.setdefault(start, []).append((line, duration))

    st = _State(
        status=np.ones(L, dtype=bool),
        topology=np.zeros(S, dtype=np.int64),
        overflow=np.zeros(L, dtype=np.int64),
        cooldown_line=np.zeros(L, dtype=np.int64),
        cooldown_sub=np.zeros(S, dtype=np.int64),
        pending_trip=np.zeros(L, dtype=bool),
        out_until=np.full(L, -1, dtype=np.int64),
        auto_reconnect=np.zeros(L, dtype=bool),
    )
    rec = _Recorder(T, schema)
    agent = _Agent(cfg.agent_profile, net, limits, cfg)
    failure: ErrorType | None = None
    n = T
    prev_rho = np.zeros(L)
    gen_rec = np.round(sc.gen, 3)
    load_rec = np.round(sc.load, 3)
    static_events = np.array(
        sorted(set(sc.attacks) | set(maint_start) | set(sc.forced_topology) | {T}), dtype=np.int64
    )
    t = 0
    while t < T:
        if t > 0:
            t_next = _quiet_block(t, st, net, agent, prev_rho, inj, limits, sc, static_events, rec, maint, gen_rec, load_rec)
            if t_next > t:
                prev_rho = rec.cols["rho"][t_next - 1].copy()
                t = t_next
                continue
        if t > 0:
            st.cooldown_line = np.maximum(st.cooldown_line - 1, 0)
            st.cooldown_sub = np.maximum(st.cooldown_sub - 1, 0)
        # exogenous events
        if st.pending_trip.any():
            st.status[st.pending_trip] = False
            st.cooldown_line[st.pending_trip] = cfg.line_cooldown
            st.pending_trip[:] = False
        back = (st.out_until == t) & st.auto_reconnect
        if back.any():
            st.status[back] = True
            st.auto_reconnect[back] = False
        st.out_until[st.out_until == t] = -1
        for line in sc.attacks.get(t, ()):
            st.status[line] = False
            st.cooldown_line[line] = max(st.cooldown_line[line], cfg.attack_duration)
            st.out_until[line] = t + cfg.attack_duration
        for line, duration in maint_start.get(t, ()):
            st.status[line] = False
            st.cooldown_line[line] = max(st.cooldown_line[line], duration)
            st.out_until[line] = t + duration
            st.auto_reconnect[line] = True
        # agent acts on the previous observation
        if t > 0 and agent.active:
            agent.act(t, st, prev_rho, inj[t])
        if t in sc.forced_topology:
            _, index = sc.forced_topology[t]
            final = max(i for _, i in sc.forced_topology.values())
            _force_topology(
                net, st, ep_rng, fatal=index == final, cfg=cfg, inj_row=inj[t], limits=limits, stress=index == final - 1
            )

        active = net.active_lines(st.status, st.topology)
        ptdf = net.ptdf(active)
        if ptdf is None:
            failure = ErrorType.DC_INIT_SOLVER_FACTOR if ep_rng.random() < 0.85 else ErrorType.DC_INIT_SOLVER_SOLVE
            n = t
            break
        if not sc.feasible_dispatch[t]:
            failure = ErrorType.AC_TOO_MANY_ITERATIONS
            n = t
            break
        f = ptdf @ inj[t]
        f = np.where(active, f, 0.0)
        p_or = np.round(f, 3)
        rho = np.round(np.abs(f) / limits, 5)
        if (rho[active] >= cfg.rho_diverge).any():
            failure = ErrorType.AC_TOO_MANY_ITERATIONS
            n = t
            break
        p_ex = np.round(-(f - np.sign(f) * 0.01 * f * f / limits), 3)
        p_or = np.where(st.status, p_or, 0.0)
        p_ex = np.where(st.status, p_ex, 0.0) + 0.0
        rho = np.where(st.status, rho, 0.0)
        over = st.status & (rho >= 1.0)
        st.overflow = np.where(over, st.overflow + 1, 0)
        st.pending_trip = st.overflow >= K

        c = rec.cols
        c["rho"][t] = rho
        c["line_status"][t] = st.status
        c["ts_overflow_line"][t] = st.overflow
        c["cooldown_line"][t] = st.cooldown_line
        c["cooldown_sub"][t] = st.cooldown_sub
        c["maintenance_time"][t] = maint[t]
        c["p_or"][t] = p_or
        c["p_ex"][t] = p_ex
        c["gen_p"][t] = gen_rec[t]
        c["load_p"][t] = load_rec[t]
        c["sub_topology"][t] = st.topology
        prev_rho = rho
        # a tripped line releases its overflow counter
        st.overflow = np.where(st.pending_trip, 0, st.overflow)
        t += 1

    if failure is None:
        term = TerminationInfo.survived(cfg.horizon)
    else:
        if n == 0:
            raise RuntimeError(f"{cfg.chronic_id}: grid infeasible at the first step")
        term = TerminationInfo.failed(n, failure, cfg.horizon)
    traj = rec.trajectory(n, sc.start_dow)
    return Episode(cfg.chronic_id, cfg.agent, cfg.seed, schema.name, traj, term)


_BLOCK = 288


def _quiet_block(t, st, net, agent, prev_rho, inj, limits, sc, static_events, rec, maint, gen_rec, load_rec) -> int:
    """Record a run of uneventful steps in one vectorized pass; returns the next step to simulate.

    A step is uneventful when no exogenous event is due, no line is
    overloaded, dispatch is feasible and the agent would not act. The
    recorded values are the ones the step-by-step loop would produce.
    """
    if st.pending_trip.any() or st.overflow.any():
        return t
    nxt = int(static_events[np.searchsorted(static_events, t)])
    pending = st.out_until[st.out_until >= t]
    if len(pending):
        nxt = min(nxt, int(pending.min()))
    if nxt <= t:
        return t
    rho_prev = float(prev_rho.max(initial=0.0))
    changed = bool(st.topology.any())
    if agent.active:
        if (~st.status & (st.out_until < 0)).any():
            return t
        if rho_prev >= agent.act_above or (changed and rho_prev < agent.revert_below):
            return t
    active = net.active_lines(st.status, st.topology)
    ptdf = net.ptdf(active)
    if ptdf is None:
        return t
    end = min(nxt, t + _BLOCK)
    f = inj[t:end] @ ptdf.T
    f = np.where(active[None, :], f, 0.0)
    rho = np.round(np.abs(f) / limits, 5)
    rho = np.where(st.status[None, :], rho, 0.0)
    bad = (rho >= 1.0).any(axis=1) | ~sc.feasible_dispatch[t:end]
    stop = len(rho)
    if bad.any():
        stop = int(np.argmax(bad))
    if agent.active:
        rmax = rho.max(axis=1)
        trig = rmax >= agent.act_above
        if changed:
            trig |= rmax < agent.revert_below
        if trig.any():
            stop = min(stop, int(np.argmax(trig)) + 1)
    if stop == 0:
        return t
    f, rho = f[:stop], rho[:stop]
    rows = slice(t, t + stop)
    ramp = np.arange(1, stop + 1)[:, None]
    p_ex = np.round(-(f - np.sign(f) * 0.01 * f * f / limits), 3)
    c = rec.cols
    c["rho"][rows] = rho
    c["p_or"][rows] = np.where(st.status[None, :], np.round(f, 3), 0.0)
    c["p_ex"][rows] = np.where(st.status[None, :], p_ex, 0.0) + 0.0
    c["line_status"][rows] = st.status
    c["ts_overflow_line"][rows] = 0
    c["cooldown_line"][rows] = np.maximum(st.cooldown_line[None, :] - ramp, 0)
    c["cooldown_sub"][rows] = np.maximum(st.cooldown_sub[None, :] - ramp, 0)
    c["maintenance_time"][rows] = maint[rows]
    c["gen_p"][rows] = gen_rec[rows]
    c["load_p"][rows] = load_rec[rows]
    c["sub_topology"][rows] = st.topology
    st.cooldown_line = np.maximum(st.cooldown_line - stop, 0)
    st.cooldown_sub = np.maximum(st.cooldown_sub - stop, 0)
    return t + stop


def _force_topology(
    net: _Network, st: _State, g: np.random.Generator, fatal: bool, cfg: SynthConfig, inj_row, limits, stress: bool = False
):
    """One drifting reconfiguration: safe ones keep the grid whole, the fatal one splits it.

    Safe changes prefer configurations that keep every line below its limit;
    with ``stress`` (the change before the fatal one) they prefer a mild overload.
    """
    S = net.n_sub
    options, benign, stressed = [], [], []
    for s in range(S):
        deg = len(net.lines_at[s])
        if deg < 2 or st.topology[s] != 0:
            continue
        for c in range(1, deg + 1):
            topo = st.topology.copy()
            topo[s] = c
            active = net.active_lines(st.status, topo)
            ptdf = net.ptdf(active)
            ok = ptdf is not None
            if ok != fatal:
                options.append((s, c))
                if ok:
                    peak = np.max(np.abs(ptdf @ inj_row) / limits * active)
                    if 1.1 <= peak < 1.6:
                        stressed.append((s, c))
                    elif peak < 0.9:
                        benign.append((s, c))
    if stress and stressed:
        options = stressed
    elif benign:
        options = benign
    if not options:
        if fatal:
            # split the first element substation outright
            s = net.element_subs[0]
            for l in net.lines_at[s]:
                st.status[l] = False
        return
    s, c = options[int(g.integers(len(options)))]
    st.topology[s] = c
    # drifted substations stay locked for a while
    st.cooldown_sub[s] = max(cfg.sub_cooldown, 12)


class _Agent:
    """Rule-based stand-ins for the three agent families."""

    def __init__(self, profile: AgentProfile, net: _Network, limits: np.ndarray, cfg: SynthConfig):
        self.profile = profile
        self.net = net
        self.limits = limits
        self.cfg = cfg
        self.active = profile != AgentProfile.PASSIVE
        if profile == AgentProfile.RECONNECTOR:
            self.act_above, self.revert_below, self.scope = 0.95, 0.75, "local"
        else:
            self.act_above, self.revert_below, self.scope = 0.85, 0.6, "all"

    def _rho_max(self, status, topology, inj_row) -> float:
        active = self.net.active_lines(status, topology)
        ptdf = self.net.ptdf(active)
        if ptdf is None:
            return math.inf
        return float(np.max(np.abs(ptdf @ inj_row) / self.limits * active, initial=0.0))

    def act(self, t: int, st: _State, rho: np.ndarray, inj_row: np.ndarray):
        # reconnect at most one line per step
        cand = np.flatnonzero(~st.status & (st.cooldown_line == 0) & (st.out_until < 0))
        if len(cand):
            l = int(cand[0])
            trial = st.status.copy()
            trial[l] = True
            if self._rho_max(trial, st.topology, inj_row) < 1.0:
                st.status[l] = True
                st.cooldown_line[l] = self.cfg.reconnect_cooldown
                return
        rho_max = float(rho.max(initial=0.0))
        if rho_max >= self.act_above:
            worst = int(np.argmax(rho))
            if self.scope == "local":
                subs = sorted(set(self.net.ends[worst]))
            else:
                subs = range(self.net.n_sub)
            current = self._rho_max(st.status, st.topology, inj_row)
            best = (current - 0.02, None)
            for s in subs:
                if st.cooldown_sub[s] > 0:
                    continue
                deg = len(self.net.lines_at[s])
                if deg < 2:
                    continue
                for c in range(deg + 1):
                    if c == st.topology[s]:
                        continue
                    topo = st.topology.copy()
                    topo[s] = c
                    r = self._rho_max(st.status, topo, inj_row)
                    if r < best[0]:
                        best = (r, (s, c))
            if best[1] is not None:
                s, c = best[1]
                st.topology[s] = c
                st.cooldown_sub[s] = self.cfg.sub_cooldown
            return
        if rho_max < self.revert_below:
            for s in np.flatnonzero(st.topology):
                if st.cooldown_sub[s] == 0:
                    topo = st.topology.copy()
                    topo[s] = 0
                    if self._rho_max(st.status, topo, inj_row) < self.act_above:
                        st.topology[s] = 0
                        st.cooldown_sub[s] = self.cfg.sub_cooldown
                    break


# --------------------------------------------------------------------------
# corpus generation


@dataclass
class Corpus:
    episodes: list[Episode]
    manifest: list[dict]


def _allocate_modes(keys, mode_mix: dict, seed: int) -> dict:
    modes = sorted(mode_mix, key=lambda m: FailureMode(m).value)
    n = len(keys)
    raw = [mode_mix[m] * n for m in modes]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(modes)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    labels = [FailureMode(m) for m, c in zip(modes, counts) for _ in range(c)]
    perm = rng.stream(seed, "mode-allocation").permutation(n)
    ordered = sorted(keys)
    return {ordered[int(p)]: labels[i] for i, p in enumerate(perm)}


def corpus_seeds(base_seed: int, n_seeds: int) -> list[int]:
    g = rng.stream(base_seed, "corpus-seeds")
    seeds: list[int] = []
    while len(seeds) < n_seeds:
        s = int(g.integers(0, 2**31 - 1))
        if s not in seeds:
            seeds.append(s)
    return seeds


def corpus_configs(
    base: SynthConfig, n_chronics: int, n_seeds: int, agents, mode_mix: dict, chronic_prefix: str = "chronic"
) -> list[SynthConfig]:
    total = sum(mode_mix.values())
    if abs(total - 1.0) > 1e-9 or any(v < 0 for v in mode_mix.values()):
        raise ValueError(f"mode mix fractions must be non-negative and sum to 1, got {total}")
    agents = sorted(agents)
    for a in agents:
        if a not in AGENT_PROFILES:
            raise ValueError(f"unknown agent {a!r}")
    seeds = corpus_seeds(base.seed, n_seeds)
    keys = [
        (f"{chronic_prefix}_{c:04d}", a, s)
        for c in range(n_chronics)
        for s in seeds
        for a in agents
    ]
    modes = _allocate_modes(keys, mode_mix, base.seed)
    return [
        replace(
            base,
            chronic_id=chronic,
            agent_profile=AGENT_PROFILES[agent],
            seed=seed,
            planted_failure_mode=modes[(chronic, agent, seed)],
        )
        for chronic, agent, seed in keys
    ]


def generate_corpus(
    base: SynthConfig,
    n_chronics: int,
    n_seeds: int,
    agents,
    mode_mix: dict,
    workers: int = 1,
    chronic_prefix: str = "chronic",
) -> Corpus:
    """Generate ``n_chronics * n_seeds * len(agents)`` episodes plus a manifest.

    Output order and content do not depend on ``workers``.
    """
    cfgs = corpus_configs(base, n_chronics, n_seeds, agents, mode_mix, chronic_prefix)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            episodes = list(pool.map(generate_episode, cfgs, chunksize=8))
    else:
        episodes = [generate_episode(c) for c in cfgs]
    manifest = [
        {
            "chronic_id": e.chronic_id,
            "agent": e.agent,
            "seed": e.seed,
            "planted_mode": c.planted_failure_mode.value,
            "outcome": e.termination.outcome.value,
            "failed_step": e.termination.failed_step if e.failed else -1,
            "error_type": e.termination.error_type.value,
        }
        for c, e in zip(cfgs, episodes)
    ]
    return Corpus(episodes, manifest)
