"""Shared fixtures: a hand-built two-line grid and a small synthetic corpus."""
from __future__ import annotations

import numpy as np
import pytest

from gridfail.config import DEFAULT_MODE_MIX
from gridfail.episode import AGENTS, Episode, ErrorType, GridSchema, Observation, TerminationInfo
from gridfail.synth import SynthConfig, generate_corpus, ieee14_schema


def tiny_schema() -> GridSchema:
    # 3 substations, 2 lines, 2 generators, 1 load
    return GridSchema(
        name="tiny",
        n_substations=3,
        line_endpoints=((0, 1), (1, 2)),
        gen_substation=(0, 2),
        load_substation=(1,),
        attackable_line_ids=frozenset({1}),
    )


def make_obs(step: int, **over) -> Observation:
    base = dict(
        step=step,
        minute_of_hour=(5 * step) % 60,
        hour_of_day=(step // 12) % 24,
        day_of_week=0,
        rho=[0.5, 0.4],
        line_status=[True, True],
        ts_overflow_line=[0, 0],
        cooldown_line=[0, 0],
        cooldown_sub=[0, 0, 0],
        maintenance_time=[-1, -1],
        p_or=[10.0, 8.0],
        p_ex=[-9.9, -7.9],
        gen_p=[12.0, 6.0],
        load_p=[18.0],
        sub_topology=[0, 0, 0],
    )
    base.update(over)
    return Observation(**base)


def make_episode(n_obs: int = 3, failed_step: int | None = None, agent: str = "DO_NOTHING", chronic: str = "c0", per_step=None) -> Episode:
    """Episode on :func:`tiny_schema`; ``per_step(t)`` returns field overrides for step t."""
    obs = [make_obs(t, **(per_step(t) if per_step else {})) for t in range(n_obs)]
    if failed_step is None:
        term = TerminationInfo.survived(horizon=n_obs)
    else:
        term = TerminationInfo.failed(failed_step, ErrorType.AC_TOO_MANY_ITERATIONS, horizon=max(failed_step, 10))
    return Episode.from_observations(chronic, agent, 0, "tiny", obs, term)


@pytest.fixture
def schema():
    return tiny_schema()


@pytest.fixture(scope="session")
def grid():
    return ieee14_schema()


@pytest.fixture(scope="session")
def small_corpus():
    """12 chronics x 3 agents on the built-in grid; about a third fail."""
    return generate_corpus(SynthConfig(seed=3), 12, 1, AGENTS, DEFAULT_MODE_MIX)


@pytest.fixture(scope="session")
def blobs():
    g = np.random.default_rng(11)
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0], [5.0, 20.0]])
    X = np.concatenate([c + 0.4 * g.standard_normal((30, 2)) for c in centers])
    y = np.repeat(np.arange(5), 30)
    return X, y


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion; shown in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def report(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines.append(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines):
            terminalreporter.write_line(line)
