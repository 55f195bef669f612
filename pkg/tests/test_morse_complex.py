import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rfloer import free_time as ft
from rfloer import morse_complex as mc
from rfloer.geometry import ManifoldModel

from conftest import pendulum_model


def test_trivial_class_points_at_infinity():
    cfg = ft.FreeTimeConfig(pendulum_model(0.01), 0.5, N=32)
    betti, cx = mc.homology(cfg, (0, 0), action_cap=1.0)
    assert [g.degree for g in cx.generators] == [0, 1, 1, 2]
    assert betti == [1, 2, 1]
    assert not cx.d_squared().any()
    # each torus edge bounds two flow lines, so every raw count is even
    assert all(v % 2 == 0 for v in cx.raw_counts.values())


def test_torus_morse_critical_points():
    for p, d in mc.TORUS_CRITICAL:
        assert np.allclose(mc.torus_morse_grad(p), 0, atol=1e-12)
        assert np.isclose(mc.torus_morse(p), d)


def test_flat_config_not_regular():
    cfg = ft.FreeTimeConfig(ManifoldModel(), 0.5, N=32)
    with pytest.raises(ft.DegenerateError, match="not in O_reg"):
        mc.enumerate_critical(cfg, (1, 0), action_cap=2.0, n_seeds=2)


def test_cascade_shortcuts():
    g0 = mc.Generator("a", 1, 1.0, 0, 0, 0.5)
    g1 = mc.Generator("b", 0, 0.5, 0, 1, 0.5)
    up = mc.Generator("c", 0, 2.0, 0, 1, 0.5)
    assert mc.cascade_connections(None, [], g0, g0)[0] == 0
    assert mc.cascade_connections(None, [], g0, up)[0] == 0
    with pytest.raises(ValueError):
        mc.cascade_connections(None, [], g1, g0)


def test_same_circle_pair_cancels():
    gmax = mc.Generator("c0_max", 2, 1.0, 1, 0, 0.0)
    gmin = mc.Generator("c0_min", 1, 1.0, 0, 0, 0.5)
    c, det = mc.cascade_connections(None, [], gmax, gmin)
    assert c == 0 and det["raw"] == 2


def test_rank_mod2_examples():
    assert mc.rank_mod2(np.eye(3, dtype=int)) == 3
    assert mc.rank_mod2(np.array([[1, 1], [1, 1]])) == 1
    assert mc.rank_mod2(np.array([[2, 0], [0, 2]])) == 0
    assert mc.rank_mod2(np.zeros((2, 3), dtype=int)) == 0


@settings(max_examples=50, deadline=None)
@given(arrays(np.int64, (5, 4), elements=st.integers(0, 1)))
def test_rank_mod2_bounds(m):
    r = mc.rank_mod2(m)
    assert 0 <= r <= min(m.shape)
    assert mc.rank_mod2(m.T) == r


def test_empty_generator_list():
    cx = mc.ChainComplexData([], np.zeros((0, 0), dtype=int), None, 1.0, True)
    assert cx.betti() == [0, 0, 0]


def test_circle_generators_degrees():
    class Rep:
        action, i = 1.2, 1

    gens = mc.circle_generators([mc.CriticalCircle(Rep())])
    assert [(g.degree, g.i_f, g.phase) for g in gens] == [(1, 0, 0.5), (2, 1, 0.0)]
    assert np.isclose(mc.aux_f(0.5), -1) and np.isclose(mc.aux_f(0.0), 1)
