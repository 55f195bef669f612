import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfloer.geometry import (
    FourierField,
    ManifoldModel,
    UnboundedPrimitiveError,
    bounded_primitive_exists,
    cap_flux,
    holonomy_constant,
    lorentz_at,
    metric_at,
    primitive_at,
)
from rfloer.loops import DiscreteLoop

from conftest import generic_model

coords = st.floats(-3.0, 3.0, allow_nan=False)
points = st.tuples(coords, coords).map(np.array)


def test_fourier_field_convention():
    f = FourierField([[1, 0, 2.0, 3.0]])
    q = np.array([0.125, 0.7])
    a = 2 * np.pi * 0.125
    assert np.isclose(f.value(q), 2 * np.cos(a) + 3 * np.sin(a))


def test_fourier_field_rejects_bad_rows():
    with pytest.raises(ValueError):
        FourierField([[1, 0, 2.0]])


def test_flat_metric_is_identity():
    m = ManifoldModel()
    g, gam = metric_at(m, np.array([0.3, 0.4]), christoffel=True)
    assert np.array_equal(g, np.eye(2))
    assert np.all(gam == 0)


def test_conformal_metric_closed_form():
    m = ManifoldModel(phi=FourierField([[1, 0, 0.1, 0.0]]))
    assert np.allclose(metric_at(m, np.zeros(2)), np.exp(0.2) * np.eye(2), rtol=1e-14)


def test_christoffel_against_finite_differences():
    m = generic_model()
    q = np.array([0.21, 0.67])
    h = 1e-6
    dg = np.stack([(m.metric_at(q + h * e) - m.metric_at(q - h * e)) / (2 * h) for e in np.eye(2)])
    ginv = np.linalg.inv(m.metric_at(q))
    # Gamma^k_ij = 1/2 g^kl (d_i g_lj + d_j g_li - d_l g_ij)
    gam = 0.5 * np.einsum("kl,ijl->kij", ginv, np.einsum("ilj->ijl", dg) + np.einsum("jli->ijl", dg) - dg.transpose(1, 2, 0))
    assert np.allclose(m.christoffel_at(q), gam, atol=1e-8)


@pytest.mark.parametrize("B", [1.0, 2.0])
def test_lorentz_flat_constant_field(B):
    Y = lorentz_at(ManifoldModel(B=B), np.array([0.2, 0.9]))
    assert np.allclose(Y, [[0, -B], [B, 0]])


def test_lorentz_zero_form():
    assert np.all(lorentz_at(ManifoldModel(), np.array([0.1, 0.2])) == 0)


def test_primitive_examples():
    assert np.all(primitive_at(ManifoldModel(), np.array([0.3, 0.1])) == 0)
    assert bounded_primitive_exists(ManifoldModel())
    m = ManifoldModel(B=1.0)
    assert np.allclose(primitive_at(m, np.array([3.5, 0.0])), [0.0, 3.5])
    assert not bounded_primitive_exists(m)
    A = 0.3
    m = ManifoldModel(theta_x=FourierField([[0, 1, 0.0, A]]))
    q = np.array([0.4, 0.1])
    assert np.allclose(primitive_at(m, q), [A * np.sin(2 * np.pi * 0.1), 0.0])
    assert bounded_primitive_exists(m)


def test_holonomy_examples():
    A = 0.3
    m = ManifoldModel(theta_x=FourierField([[0, 1, 0.0, A]]))
    assert holonomy_constant(m, (0, 0)) == 0.0
    assert holonomy_constant(ManifoldModel(), (1, 0)) == 0.0
    assert abs(holonomy_constant(m, (1, 0))) < 1e-15
    m.ref_point = np.array([0.0, 0.25])
    assert np.isclose(holonomy_constant(m, (1, 0)), -A, atol=1e-14)


def test_holonomy_needs_bounded_primitive():
    with pytest.raises(UnboundedPrimitiveError):
        holonomy_constant(ManifoldModel(B=1.0), (1, 0))


@pytest.mark.parametrize("r", [0.1, 0.3])
def test_cap_flux_disk(r):
    m = ManifoldModel(B=1.0)
    q = DiscreteLoop.circle((0.0, 0.0), r, 128)
    assert np.isclose(cap_flux(m, q), np.pi * r * r, rtol=1e-12)
    assert np.isclose(cap_flux(m, q.reversed()), -np.pi * r * r, rtol=1e-12)


def test_cap_flux_zero_form():
    q = DiscreteLoop.circle((0.2, 0.2), 0.2, 64)
    assert cap_flux(ManifoldModel(), q) == 0.0


def test_reference_loop_has_zero_flux():
    m = ManifoldModel(theta_x=FourierField([[0, 1, 0.1, 0.3]]), ref_point=np.array([0.0, 0.25]))
    q = DiscreteLoop.straight((1, 0), 64, (0.0, 0.25))
    assert abs(cap_flux(m, q)) < 1e-14


@settings(max_examples=40, deadline=None)
@given(points, st.tuples(coords, coords), st.tuples(coords, coords))
def test_lorentz_is_metric_antisymmetric(q, v, w):
    m = generic_model()
    m.B = 0.7
    g = m.metric_at(q)
    Y = m.lorentz_at(q)
    v, w = np.array(v), np.array(w)
    assert abs((Y @ v) @ g @ w + v @ g @ (Y @ w)) < 1e-12 * (1 + np.abs(v).max() * np.abs(w).max())


@settings(max_examples=40, deadline=None)
@given(points)
def test_metric_spd(q):
    ev = np.linalg.eigvalsh(generic_model().metric_at(q))
    assert np.all(ev > 0)


def test_finite_difference_dtheta_converges_to_sigma():
    m = generic_model()
    q = np.array([0.37, 0.81])
    errs = []
    for h in (1e-2, 5e-3, 2.5e-3):
        dy_tx = (m.primitive_at(q + [0, h])[0] - m.primitive_at(q - [0, h])[0]) / (2 * h)
        dx_ty = (m.primitive_at(q + [h, 0])[1] - m.primitive_at(q - [h, 0])[1]) / (2 * h)
        errs.append(abs(dx_ty - dy_tx - m.sigma_density(q)))
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


def _ease(t):
    # reparametrization with vanishing speed at the endpoints, so concatenations stay smooth
    return t - np.sin(2 * np.pi * t) / (2 * np.pi)


def _sampled(f, n, winding):
    t = np.arange(n) / n
    return DiscreteLoop(f(_ease(t)), winding)


def _concat(f, g, n, winding):
    t = np.arange(n) / n
    first = t < 0.5
    pts = np.empty((n, 2))
    pts[first] = f(_ease(2 * t[first]))
    pts[~first] = g(_ease(2 * t[~first] - 1)) + (f(np.array([1.0])) - g(np.array([0.0])))[0]
    return DiscreteLoop(pts, winding)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.05, 0.3), st.floats(0.05, 0.3), points)
def test_cap_flux_additive_under_concatenation(r1, r2, p0):
    m = generic_model()
    p0 = p0 % 1.0
    f = lambda s: p0 + r1 * np.stack([np.cos(2 * np.pi * s) - 1, np.sin(2 * np.pi * s)], 1)
    g = lambda s: p0 + r2 * np.stack([1 - np.cos(2 * np.pi * s), np.sin(2 * np.pi * s)], 1)
    a, b = _sampled(f, 256, (0, 0)), _sampled(g, 256, (0, 0))
    c = _concat(f, g, 512, (0, 0))
    assert np.isclose(cap_flux(m, c), cap_flux(m, a) + cap_flux(m, b), atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.floats(-0.2, 0.2), st.floats(-0.2, 0.2), st.floats(0, 1))
def test_cap_flux_additive_within_class(d1, d2, y0):
    m = generic_model()
    f = lambda s: np.stack([s, y0 + d1 * np.sin(2 * np.pi * s)], 1)
    g = lambda s: np.stack([s, y0 + d2 * np.sin(4 * np.pi * s)], 1)
    a, b = _sampled(f, 256, (1, 0)), _sampled(g, 256, (1, 0))
    c = _concat(f, g, 512, (2, 0))
    assert np.isclose(cap_flux(m, c), cap_flux(m, a) + cap_flux(m, b), atol=1e-10)
