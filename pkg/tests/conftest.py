import warnings

import numpy as np
import pytest

from rfloer import free_time as ft
from rfloer.geometry import FourierField, ManifoldModel
from rfloer.loops import DiscreteLoop


def pendulum_model(eps: float) -> ManifoldModel:
    return ManifoldModel(U=FourierField([[0, 1, eps, 0.0]]))


def generic_model() -> ManifoldModel:
    """Nonflat metric, potential and exact magnetic part, all small."""
    return ManifoldModel(
        phi=FourierField([[1, 1, 0.1, 0.05]]),
        U=FourierField([[0, 1, 0.02, 0.01]]),
        theta_x=FourierField([[0, 1, 0.03, 0.0]]),
        theta_y=FourierField([[1, 0, 0.02, 0.01]]),
    )


def orbit_at(eps: float, y0: float, n: int = 64, k: float = 0.5, with_chi: bool = True):
    cfg = ft.FreeTimeConfig(pendulum_model(eps), k, N=n)
    seed = (DiscreteLoop.straight((1, 0), n, (0.0, y0)), 1.0)
    return cfg, ft.find_critical(cfg, seed, with_chi=with_chi)


_ORBITS = {}


@pytest.fixture(scope="session")
def pendulum_orbits():
    """Both class-(1,0) orbits at k = 1/2 for eps in {0.01, 0.05}, cached."""

    def get(eps, y0):
        key = (eps, y0)
        if key not in _ORBITS:
            _ORBITS[key] = orbit_at(eps, y0)
        return _ORBITS[key]

    return get


@pytest.fixture(autouse=True)
def _quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict = {}


@pytest.fixture
def acceptance():
    """Record one criterion verdict; printed in the terminal summary."""

    def record(number: int, title: str, passed: bool, detail: str = ""):
        ACCEPTANCE[number] = (title, bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  [{n:2d}] {title}  {detail}")
