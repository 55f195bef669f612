import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfloer import cli
from rfloer import leafwise as lw
from rfloer import rabinowitz as rb
from rfloer.loops import DiscreteLoop

from conftest import pendulum_model

K = 0.5
EPS = 0.01
BUNDLED_F = [{"amp": 1e-3, "center": [0.3, 0.0, 1.01, 0.01], "radius": [None, None, 0.25, 0.25], "t_window": [0.55, 0.95]}]


@pytest.fixture(scope="module")
def orbit(pendulum_orbits):
    _, cp = pendulum_orbits(EPS, 0.0)
    return rb.z_lift(cp, pendulum_model(EPS))


def test_chi_unit_integral():
    chi = lw.ChiProfile()
    assert abs(chi.integral() - 1.0) < 1e-12
    assert np.isclose(chi.cumulative(0.5)[0], 1.0)
    assert chi.value(np.array([0.0, 0.5, 0.75])).max() == 0.0


def test_profile_support_rules():
    with pytest.raises(ValueError):
        lw.ChiProfile(0.1, 0.6)
    with pytest.raises(ValueError):
        lw.FBump(1.0, [0, 0, 0, 0], 0.2, (0.3, 0.9))
    with pytest.raises(ValueError):
        lw.FBump(1.0, [0, 0, 0, 0], [0.2, 0.2, None, 0.2])


def test_G0_matches_H_on_level():
    m = pendulum_model(EPS)
    pair = lw.build_moser_pair(m, K)
    rep = lw.check_pair_on_level(pair, lw.level_points(m, K, 64))
    assert rep["vf_error"] < 1e-10 and rep["G0_max"] < 1e-10


def test_beta_window_collision_rejected(orbit):
    x = np.concatenate([orbit.base.samples, orbit.momenta], axis=1)
    with pytest.raises(ValueError, match="beta window"):
        lw.build_moser_pair(pendulum_model(EPS), K + 0.2, samples=x)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4), st.floats(0.6, 0.9))
def test_fbump_gradient_fd(x, t):
    b = lw.FBump(0.3, [0.1, 0.2, 0.3, -0.1], [None, 0.7, 0.9, 0.8], (0.55, 0.95))
    x = np.array(x)
    g = b.grad(t, x)
    h = 1e-6
    fd = np.array([(b.value(t, x + h * e) - b.value(t, x - h * e)) / (2 * h) for e in np.eye(4)])
    assert np.allclose(g, fd, atol=1e-7)


def test_perturbed_action_constant_loop():
    m = pendulum_model(EPS)
    pair = lw.build_moser_pair(m, K, BUNDLED_F)
    n = 32
    q = np.tile([0.3, 0.2], (n, 1))
    p = np.tile([0.0, 0.0], (n, 1))
    u = rb.PhaseLoop(DiscreteLoop(q, (0, 0)), p, 0.0)
    assert lw.perturbed_action(m, K, pair, u) == 0.0


def test_perturbed_action_reparametrization(orbit):
    m = pendulum_model(EPS)
    pair = lw.build_moser_pair(m, K)
    v = lw.reparametrize_into_window(orbit, pair.chi, 512)
    assert abs(lw.perturbed_action(m, K, pair, v) - rb.action(m, K, orbit)) < 1e-6


def test_perturbed_action_F_term(orbit):
    m = pendulum_model(EPS)
    p0 = lw.build_moser_pair(m, K)
    p1 = lw.build_moser_pair(m, K, BUNDLED_F)
    v = lw.reparametrize_into_window(orbit, p0.chi, 128)
    x = np.concatenate([v.base.samples, v.momenta], axis=1)
    f = np.mean([p1.F_value(ti, xi[None, :])[0] for ti, xi in zip(v.base.t, x)])
    assert f > 0
    assert np.isclose(lw.perturbed_action(m, K, p0, v) - lw.perturbed_action(m, K, p1, v), f, rtol=1e-12)


def test_perturbed_differential_fd(orbit):
    m = pendulum_model(EPS)
    pair = lw.build_moser_pair(m, K, BUNDLED_F)
    u = lw.reparametrize_into_window(orbit, pair.chi, 32)
    g = lw.perturbed_differential(m, K, pair, u)
    rng = np.random.default_rng(3)
    z = u.flat()
    for _ in range(3):
        d = rng.standard_normal(z.size)
        h = 1e-6
        a = lw.perturbed_action(m, K, pair, rb.PhaseLoop.from_flat(z + h * d, u.winding))
        b = lw.perturbed_action(m, K, pair, rb.PhaseLoop.from_flat(z - h * d, u.winding))
        assert abs((a - b) / (2 * h) - g @ d) < 1e-6 * max(1.0, abs(g @ d))


def test_zero_F_gives_trivial_witness(orbit):
    m = pendulum_model(EPS)
    x = np.concatenate([orbit.base.samples, orbit.momenta], axis=1)
    pair = lw.build_moser_pair(m, K, samples=x)
    assert np.array_equal(lw.psi_map(pair, x[0]), x[0])
    res = lw.search_leafwise(m, K, pair, orbit, n_starts=2)
    assert res.displacement == 0.0
    assert res.verification_distance < 1e-8
    assert np.isclose(res.eta, orbit.eta, rtol=1e-8)


def test_bundled_F_witness():
    rc = cli.RunConfig.load(cli.bundled_config("leafwise_small_F"))
    res = cli._leafwise_run(rc)
    assert res.displacement > 1e-5
    assert res.verification_distance < 1e-5
    assert res.periodicity_error < 1e-8
    assert res.energy_defect < 1e-6
