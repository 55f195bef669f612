import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfloer.geometry import ManifoldModel
from rfloer.loops import (
    DiscreteLoop,
    align_shift,
    band_limit,
    derivative_matrix,
    loop_energy,
    resample,
    spectral_derivative,
    w12_inner,
    w12_matrix,
)

from conftest import generic_model

T64 = np.arange(64) / 64


def test_spectral_derivative_exact_on_trig():
    v = np.stack([np.sin(2 * np.pi * 3 * T64), np.cos(2 * np.pi * T64)], 1)
    d = spectral_derivative(v)
    expect = np.stack([6 * np.pi * np.cos(6 * np.pi * T64), -2 * np.pi * np.sin(2 * np.pi * T64)], 1)
    assert np.allclose(d, expect, atol=1e-11)
    assert np.allclose(derivative_matrix(64) @ v, d, atol=1e-11)


def test_w12_examples():
    m = ManifoldModel()
    q = DiscreteLoop.straight((1, 0), 64)
    z = np.zeros((64, 2))
    assert w12_inner(m, q, (z, 1.0), (z, 1.0)) == 1.0
    c = np.tile([1.0, 0.0], (64, 1))
    assert np.isclose(w12_inner(m, q, (c, 0.0), (c, 0.0)), 1.0)
    s = np.stack([np.sin(2 * np.pi * T64), 0 * T64], 1)
    assert np.isclose(w12_inner(m, q, (s, 0.0), (s, 0.0)), 0.5 + 2 * np.pi**2, rtol=1e-12)


def test_loop_energy_examples():
    m = ManifoldModel()
    assert loop_energy(m, DiscreteLoop.constant((0.3, 0.2), 32))[0] == 0.0
    assert np.isclose(loop_energy(m, DiscreteLoop.straight((1, 0), 64))[0], 1.0, rtol=1e-14)
    q = DiscreteLoop(np.stack([T64, 0.1 * np.sin(2 * np.pi * T64)], 1), (1, 0))
    assert np.isclose(loop_energy(m, q)[0], 1 + 0.01 * (2 * np.pi) ** 2 / 2, rtol=1e-12)


def test_resample_examples():
    c = resample(DiscreteLoop.constant((0.3, 0.2), 32), 48)
    assert np.allclose(c.samples, [0.3, 0.2])
    q = DiscreteLoop(np.stack([T64 + 0.05 * np.sin(6 * np.pi * T64), 0.2 * np.cos(4 * np.pi * T64)], 1), (1, 0))
    assert abs(loop_energy(None, resample(q, 128))[0] - loop_energy(None, q)[0]) < 1e-10
    s = DiscreteLoop.straight((1, 0), 64)
    h = resample(s, 32)
    assert np.allclose(h.samples, s.samples[::2], atol=1e-14)


def test_grid_validation():
    with pytest.raises(ValueError):
        DiscreteLoop(np.zeros((5, 3)), (0, 0))


def test_align_shift_recovers_phase():
    q = DiscreteLoop(np.stack([T64 + 0.05 * np.sin(2 * np.pi * T64), 0.1 * np.cos(2 * np.pi * T64)], 1), (1, 0))
    tau, dist = align_shift(q, q.shifted(0.3))
    assert dist < 1e-8
    assert np.isclose((tau + 0.3) % 1.0, 0.0, atol=1e-6) or np.isclose((tau - 0.3) % 1.0, 0.0, atol=1e-6)


def test_align_shift_modulo_lattice():
    q = DiscreteLoop.straight((1, 0), 32, (0.0, 0.2))
    assert align_shift(q, q.translated((0, 1)))[1] < 1e-10
    assert align_shift(q, DiscreteLoop.straight((0, 1), 32))[1] == np.inf


fields = st.integers(0, 2**31 - 1)


@settings(max_examples=30, deadline=None)
@given(fields)
def test_w12_positive_definite_and_bilinear(seed):
    rng = np.random.default_rng(seed)
    m = generic_model()
    q = DiscreteLoop(np.stack([T64, 0.1 * np.sin(2 * np.pi * T64)], 1) + 0.01 * rng.normal(size=(64, 2)), (1, 0))
    q = band_limit(q)
    fs = [rng.normal(size=(64, 2)) for _ in range(4)]
    gram = np.array([[w12_inner(m, q, (a, 0), (b, 0)) for b in fs] for a in fs])
    np.linalg.cholesky(gram)
    a, b, c = fs[:3]
    lhs = w12_inner(m, q, (2 * a + 3 * b, 0), (c, 0))
    assert np.isclose(lhs, 2 * w12_inner(m, q, (a, 0), (c, 0)) + 3 * w12_inner(m, q, (b, 0), (c, 0)), rtol=1e-10)
    mat = w12_matrix(m, q)
    assert np.isclose(a.ravel() @ mat @ b.ravel(), w12_inner(m, q, (a, 0), (b, 0)), rtol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(-3, 3), st.integers(-3, 3), fields)
def test_reversal_negates_winding_keeps_energy(m1, m2, seed):
    rng = np.random.default_rng(seed)
    base = DiscreteLoop.straight((m1, m2), 32)
    q = DiscreteLoop(base.samples + 0.05 * np.cos(2 * np.pi * np.arange(32) / 32)[:, None] * rng.normal(size=2), (m1, m2))
    r = q.reversed()
    assert (r.winding.m1, r.winding.m2) == (-m1, -m2)
    assert np.isclose(loop_energy(None, r)[0], loop_energy(None, q)[0], rtol=1e-12, atol=1e-14)
