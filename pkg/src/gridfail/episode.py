"""Grid schema, observation, and episode data model.

Per-step observations are stored column-wise in a :class:`Trajectory` (one
array per field with a leading time axis) because every downstream stage
scans whole episodes. :class:`Observation` is the row view of one step.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

DEFAULT_HORIZON = 2016

AGENTS = ("DO_NOTHING", "SENIOR", "TOPOLOGY")


class Outcome(str, Enum):
    SURVIVED = "SURVIVED"
    FAILED = "FAILED"


class ErrorType(str, Enum):
    DC_INIT_SOLVER_FACTOR = "DC_INIT_SOLVER_FACTOR"
    AC_TOO_MANY_ITERATIONS = "AC_TOO_MANY_ITERATIONS"
    DC_INIT_SOLVER_SOLVE = "DC_INIT_SOLVER_SOLVE"
    NONE = "NONE"


# Solver messages as emitted by the power-flow backend.
ERROR_MESSAGES = {
    ErrorType.DC_INIT_SOLVER_FACTOR: (
        'Grid2OpException Divergingpower flow "Divergence of DC power flow (non connected grid) '
        'at the initialization of AC power flow. Detailed error: ErrorType.SolverFactor"'
    ),
    ErrorType.AC_TOO_MANY_ITERATIONS: (
        'Grid2OpException Divergingpower flow "Divergence of AC power flow. '
        'Detailed error: ErrorType.TooManyIterations"'
    ),
    ErrorType.DC_INIT_SOLVER_SOLVE: (
        'Grid2OpException Divergingpower flow "Divergence of DC power flow (non connected grid) '
        'at the initialization of AC power flow. Detailed error: ErrorType.SolverSolve"'
    ),
}


def parse_error_type(text: str) -> ErrorType | str:
    """Map an enum name or a raw solver message to :class:`ErrorType`.

    Unrecognised strings are returned unchanged so that validation can
    report them instead of the reader crashing.
    """
    if text in ErrorType.__members__:
        return ErrorType[text]
    if "TooManyIterations" in text:
        return ErrorType.AC_TOO_MANY_ITERATIONS
    if "SolverFactor" in text:
        return ErrorType.DC_INIT_SOLVER_FACTOR
    if "SolverSolve" in text:
        return ErrorType.DC_INIT_SOLVER_SOLVE
    return text


@dataclass(frozen=True)
class GridSchema:
    """Static structure of a grid: element counts and where elements attach."""

    name: str
    n_substations: int
    line_endpoints: tuple[tuple[int, int], ...]
    gen_substation: tuple[int, ...]
    load_substation: tuple[int, ...]
    attackable_line_ids: frozenset[int] = frozenset()
    sub_grid_id: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "line_endpoints", tuple(tuple(int(v) for v in e) for e in self.line_endpoints))
        object.__setattr__(self, "gen_substation", tuple(int(v) for v in self.gen_substation))
        object.__setattr__(self, "load_substation", tuple(int(v) for v in self.load_substation))
        object.__setattr__(self, "attackable_line_ids", frozenset(int(v) for v in self.attackable_line_ids))
        if self.sub_grid_id is not None:
            object.__setattr__(self, "sub_grid_id", tuple(str(v) for v in self.sub_grid_id))
        problems = self.problems()
        if problems:
            raise ValueError(f"invalid grid schema {self.name!r}: " + "; ".join(problems))

    @property
    def n_lines(self) -> int:
        return len(self.line_endpoints)

    @property
    def n_generators(self) -> int:
        return len(self.gen_substation)

    @property
    def n_loads(self) -> int:
        return len(self.load_substation)

    def problems(self) -> list[str]:
        out = []
        if self.n_substations < 1:
            out.append("n_substations must be positive")
        for i, ends in enumerate(self.line_endpoints):
            if len(ends) != 2:
                out.append(f"line {i} needs exactly two endpoints")
                continue
            for s in ends:
                if not 0 <= s < self.n_substations:
                    out.append(f"line {i} endpoint {s} out of range")
        for kind, subs in (("gen", self.gen_substation), ("load", self.load_substation)):
            for i, s in enumerate(subs):
                if not 0 <= s < self.n_substations:
                    out.append(f"{kind} {i} substation {s} out of range")
        for l in sorted(self.attackable_line_ids):
            if not 0 <= l < self.n_lines:
                out.append(f"attackable line {l} out of range")
        if self.sub_grid_id is not None and len(self.sub_grid_id) != self.n_substations:
            out.append("sub_grid_id length must equal n_substations")
        return out

    def lines_at(self, sub: int) -> list[int]:
        return [i for i, (a, b) in enumerate(self.line_endpoints) if sub in (a, b)]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_substations": self.n_substations,
            "line_endpoints": [list(e) for e in self.line_endpoints],
            "gen_substation": list(self.gen_substation),
            "load_substation": list(self.load_substation),
            "attackable_line_ids": sorted(self.attackable_line_ids),
            "sub_grid_id": list(self.sub_grid_id) if self.sub_grid_id is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSchema":
        return cls(
            name=d["name"],
            n_substations=int(d["n_substations"]),
            line_endpoints=tuple(tuple(e) for e in d["line_endpoints"]),
            gen_substation=tuple(d["gen_substation"]),
            load_substation=tuple(d["load_substation"]),
            attackable_line_ids=frozenset(d.get("attackable_line_ids", ())),
            sub_grid_id=tuple(d["sub_grid_id"]) if d.get("sub_grid_id") is not None else None,
        )


# Field name -> (dtype, element kind). Kind None marks a scalar field.
OBS_FIELDS: dict[str, tuple[type, str | None]] = {
    "step": (np.int64, None),
    "minute_of_hour": (np.int64, None),
    "hour_of_day": (np.int64, None),
    "day_of_week": (np.int64, None),
    "rho": (np.float64, "line"),
    "line_status": (np.bool_, "line"),
    "ts_overflow_line": (np.int64, "line"),
    "cooldown_line": (np.int64, "line"),
    "cooldown_sub": (np.int64, "sub"),
    "maintenance_time": (np.int64, "line"),
    "p_or": (np.float64, "line"),
    "p_ex": (np.float64, "line"),
    "gen_p": (np.float64, "gen"),
    "load_p": (np.float64, "load"),
    "sub_topology": (np.int64, "sub"),
}


def element_count(schema: GridSchema, kind: str) -> int:
    return {
        "line": schema.n_lines,
        "gen": schema.n_generators,
        "load": schema.n_loads,
        "sub": schema.n_substations,
    }[kind]


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Observation:
    """One grid snapshot.

    ``sub_topology`` holds one bus-configuration id per substation
    (0 is the reference configuration). ``maintenance_time`` is the number
    of steps until the next planned outage of a line, -1 when none.
    """

    step: int
    minute_of_hour: int
    hour_of_day: int
    day_of_week: int
    rho: np.ndarray
    line_status: np.ndarray
    ts_overflow_line: np.ndarray
    cooldown_line: np.ndarray
    cooldown_sub: np.ndarray
    maintenance_time: np.ndarray
    p_or: np.ndarray
    p_ex: np.ndarray
    gen_p: np.ndarray
    load_p: np.ndarray
    sub_topology: np.ndarray

    def __post_init__(self):
        for name, (dtype, kind) in OBS_FIELDS.items():
            value = getattr(self, name)
            if kind is None:
                object.__setattr__(self, name, int(value))
            else:
                object.__setattr__(self, name, _frozen(value, dtype))

    def __eq__(self, other):
        if not isinstance(other, Observation):
            return NotImplemented
        for name in OBS_FIELDS:
            a, b = getattr(self, name), getattr(other, name)
            if isinstance(a, np.ndarray):
                if a.shape != b.shape or not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Column-wise store of consecutive observations.

    Scalar fields are 1-D arrays of length T, per-element fields are
    ``(T, n_elements)`` arrays.
    """

    step: np.ndarray
    minute_of_hour: np.ndarray
    hour_of_day: np.ndarray
    day_of_week: np.ndarray
    rho: np.ndarray
    line_status: np.ndarray
    ts_overflow_line: np.ndarray
    cooldown_line: np.ndarray
    cooldown_sub: np.ndarray
    maintenance_time: np.ndarray
    p_or: np.ndarray
    p_ex: np.ndarray
    gen_p: np.ndarray
    load_p: np.ndarray
    sub_topology: np.ndarray

    def __post_init__(self):
        for name, (dtype, kind) in OBS_FIELDS.items():
            arr = np.array(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.step)

    def at(self, t: int) -> Observation:
        return Observation(**{name: getattr(self, name)[t] for name in OBS_FIELDS})

    def __iter__(self):
        for t in range(len(self)):
            yield self.at(t)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return all(
            getattr(self, n).shape == getattr(other, n).shape
            and np.array_equal(getattr(self, n), getattr(other, n))
            for n in OBS_FIELDS
        )

    __hash__ = None

    @classmethod
    def from_observations(cls, observations: Sequence[Observation]) -> "Trajectory":
        if not observations:
            raise ValueError("a trajectory needs at least one observation")
        cols = {}
        for name, (dtype, kind) in OBS_FIELDS.items():
            values = [getattr(o, name) for o in observations]
            cols[name] = np.stack(values) if kind is not None else np.array(values, dtype=dtype)
        return cls(**cols)


@dataclass(frozen=True)
class TerminationInfo:
    outcome: Outcome
    failed_step: int | None = None
    error_type: ErrorType | str = ErrorType.NONE
    horizon: int = DEFAULT_HORIZON

    @classmethod
    def survived(cls, horizon: int = DEFAULT_HORIZON) -> "TerminationInfo":
        return cls(Outcome.SURVIVED, None, ErrorType.NONE, horizon)

    @classmethod
    def failed(cls, step: int, error: ErrorType, horizon: int = DEFAULT_HORIZON) -> "TerminationInfo":
        return cls(Outcome.FAILED, int(step), error, horizon)


@dataclass(frozen=True, eq=False)
class Episode:
    """One chronic played by one agent under one seed."""

    chronic_id: str
    agent: str
    seed: int
    schema_id: str
    trajectory: Trajectory
    termination: TerminationInfo

    def __len__(self) -> int:
        return len(self.trajectory)

    @property
    def observations(self) -> list[Observation]:
        return list(self.trajectory)

    @property
    def failed(self) -> bool:
        return self.termination.outcome == Outcome.FAILED

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.chronic_id, self.agent, self.seed)

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        return (
            self.chronic_id == other.chronic_id
            and self.agent == other.agent
            and self.seed == other.seed
            and self.schema_id == other.schema_id
            and self.termination == other.termination
            and self.trajectory == other.trajectory
        )

    __hash__ = None

    @classmethod
    def from_observations(cls, chronic_id, agent, seed, schema_id, observations, termination) -> "Episode":
        return cls(chronic_id, agent, int(seed), schema_id, Trajectory.from_observations(observations), termination)


@dataclass(frozen=True)
class Violation:
    message: str
    element: int | None = None
    step: int | None = None

    def __str__(self):
        return self.message


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, message: str, element: int | None = None, step: int | None = None):
        self.violations.append(Violation(message, element, step))

    def messages(self) -> list[str]:
        return [v.message for v in self.violations]


def validate_episode(e: Episode, s: GridSchema) -> ValidationReport:
    """Check every model invariant; never raises on malformed content."""
    report = ValidationReport()
    try:
        _validate(e, s, report)
    except Exception as exc:  # malformed content is reported, not raised
        report.add(f"unreadable episode content: {exc!r}")
    return report


def _validate(e: Episode, s: GridSchema, report: ValidationReport) -> None:
    if e.schema_id != s.name:
        report.add(f"schema mismatch: episode uses {e.schema_id!r}, expected {s.name!r}")
    traj = e.trajectory
    T = len(traj)
    if T == 0:
        report.add("observations must be non-empty")
    steps = traj.step
    for t in range(T):
        if steps[t] != t:
            report.add(f"step values must increase by 1 from 0, got {int(steps[t])} at position {t}", step=t)
            break

    shapes_ok = True
    for name, (_, kind) in OBS_FIELDS.items():
        if kind is None:
            continue
        arr = getattr(traj, name)
        want = element_count(s, kind)
        if T and (arr.ndim != 2 or arr.shape[1] != want or arr.shape[0] != T):
            report.add(f"{name} length mismatch: expected {want} {kind} values per step")
            shapes_ok = False

    if shapes_ok and T:
        rho, status = traj.rho, traj.line_status
        bad = ~np.isfinite(rho)
        for t, l in zip(*np.nonzero(bad)):
            report.add(f"rho not finite, line {l}, step {t}", int(l), int(t))
        for t, l in zip(*np.nonzero(rho < 0)):
            report.add(f"rho negative, line {l}, step {t}", int(l), int(t))
        off = ~status
        dirty = off & ((rho != 0) | (traj.p_or != 0) | (traj.p_ex != 0))
        for t, l in zip(*np.nonzero(dirty)):
            report.add(f"disconnected line carries flow, line {l}, step {t}", int(l), int(t))
        stale = status & (rho < 1.0) & (traj.ts_overflow_line != 0)
        for t, l in zip(*np.nonzero(stale)):
            report.add(f"overflow counter set below rho 1.0, line {l}, step {t}", int(l), int(t))
        for name in ("p_or", "p_ex", "gen_p", "load_p"):
            arr = getattr(traj, name)
            for t, i in zip(*np.nonzero(~np.isfinite(arr))):
                report.add(f"{name} not finite, element {i}, step {t}", int(i), int(t))

    term = e.termination
    if not isinstance(term.error_type, ErrorType):
        report.add(f"unknown error type {term.error_type!r}")
    if not isinstance(term.outcome, Outcome):
        report.add(f"unknown outcome {term.outcome!r}")
        return
    if term.outcome == Outcome.SURVIVED:
        if term.error_type != ErrorType.NONE:
            report.add("survived episode must have error type NONE")
        if term.failed_step is not None:
            report.add("survived episode must not have a failed step")
    else:
        if term.error_type == ErrorType.NONE:
            report.add("failed episode needs an error type")
        if term.failed_step is None:
            report.add("failed episode needs a failed step")
        else:
            n = term.failed_step
            if n > term.horizon:
                report.add(f"failed step {n} exceeds horizon {term.horizon}")
            if T and int(steps[-1]) != n - 1:
                report.add("last observation must be n-1", step=int(steps[-1]))


def schema_mismatch(e: Episode, s: GridSchema) -> str | None:
    """Return a description of the first shape mismatch, if any."""
    if e.schema_id != s.name:
        return f"episode schema {e.schema_id!r} != {s.name!r}"
    for name, (_, kind) in OBS_FIELDS.items():
        if kind is None:
            continue
        arr = getattr(e.trajectory, name)
        if arr.ndim != 2 or arr.shape[1] != element_count(s, kind):
            return f"{name} has {arr.shape[-1] if arr.ndim else 0} columns, schema expects {element_count(s, kind)}"
    return None


def observation_from_dict(d: dict) -> Observation:
    return Observation(**{name: d[name] for name in OBS_FIELDS})

