import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfloer import mane
from rfloer.geometry import FourierField, ManifoldModel
from rfloer.loops import DiscreteLoop, resample

from conftest import pendulum_model


def test_e0_examples():
    assert mane.e0(ManifoldModel()) == 0.0
    assert np.isclose(mane.e0(pendulum_model(0.01)), 0.01, atol=1e-12)
    m = ManifoldModel(U=FourierField([[0, 1, 0.01, 0.0], [1, 0, 0.02, 0.0]]))
    assert np.isclose(mane.e0(m), 0.03, atol=1e-12)


def test_c_upper_examples():
    assert mane.c_upper(ManifoldModel(), budget=10)[0] == 0.0
    assert np.isclose(mane.c_upper(pendulum_model(0.01), budget=10)[0], 0.01, atol=1e-12)
    val, fam = mane.c_upper(ManifoldModel(B=1.0))
    assert val == np.inf and fam is None


def test_c_lower_flat_converges_to_zero():
    lo, probes, wits = mane.c_lower(ManifoldModel(), budget=25, upper=0.0)
    assert lo == 0.0
    assert len(probes) == 25


def test_c_lower_constant_loop_witness():
    eps = 0.01
    lo, _, wits = mane.c_lower(pendulum_model(eps), budget=30, upper=eps)
    assert lo >= eps - 1e-6
    w = wits[-1]
    assert np.allclose(w.loop.samples, w.loop.samples[0])
    assert np.isclose(w.action, w.T * (w.k - eps), rtol=1e-10)


def test_magnetic_circle_witness_formula():
    k, r = 10.0, 32.0
    m = ManifoldModel(B=1.0)
    n = mane._grid_size_for(m, r)
    q = DiscreteLoop.circle((0.0, 0.0), r, n, clockwise=True)
    val, T = mane.min_action_over_T(m, q, k)
    assert np.isclose(val, 2 * np.pi * r * np.sqrt(2 * k) - np.pi * r * r, rtol=1e-10)
    assert val < 0


def test_magnetic_estimate_reports_infinity():
    est = mane.estimate(ManifoldModel(B=1.0))
    assert est["c_upper"] == np.inf and est["reason"] == "no bounded primitive"
    assert sorted(w.k for w in est["witnesses"]) == [0.5, 1.0, 2.0, 5.0, 10.0]
    assert all(w.action < 0 for w in est["witnesses"])


def test_scaling_law():
    eps = 0.01
    rep = mane.scaling_check(pendulum_model(eps), gauge_budget=20)
    for row in rep["rows"]:
        assert row["error"] < 1e-6
    half = [r for r in rep["rows"] if r["s"] == 0.5][0]
    assert np.isclose(half["upper"], eps / 4, atol=1e-9)


def test_scaling_zero_and_identity():
    m = pendulum_model(0.02)
    _, fam = mane.c_upper(m, budget=10)
    assert fam.transported(0.0).sup_value() == 0.0
    assert fam.transported(1.0).sup_value() == fam.sup_value()


def test_stabilized_check_brackets():
    rep = mane.stabilized_check(pendulum_model(0.01), gauge_budget=10, budget=20)
    assert rep["lower"] <= rep["upper"] + 1e-12
    assert np.isclose(rep["upper"], rep["base_upper"], atol=1e-12)


amps = st.floats(0.0, 0.05)


@settings(max_examples=10, deadline=None)
@given(amps, amps, amps)
def test_bracket_ordering(a, b, c):
    m = ManifoldModel(
        U=FourierField([[0, 1, a, 0.0], [1, 0, b, 0.0]]),
        theta_x=FourierField([[0, 1, c, 0.0]]),
    )
    up, _ = mane.c_upper(m, budget=15)
    lo, _, wits = mane.c_lower(m, budget=15, upper=up)
    e = mane.e0(m)
    assert e - 1e-9 <= lo <= up + 1e-12
    for w in wits:
        st2 = mane.LoopStats.of(m, resample(w.loop, 2 * w.loop.N))
        assert st2.action(w.k, w.T) < 0


@pytest.mark.parametrize("k", [0.5, 2.0, 10.0])
def test_magnetic_witnesses_survive_grid_doubling(k):
    m = ManifoldModel(B=1.0)
    w = mane.find_witness(m, k, mane.witness_loops(m))
    assert w is not None and w.action < 0
    st2 = mane.LoopStats.of(m, resample(w.loop, 2 * w.loop.N))
    assert st2.action(k, w.T) < 0
