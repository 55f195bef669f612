"""Sampled loops on the torus and the W^{1,2} loop-space inner product."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.fft import irfft, rfft

from .geometry import HomotopyClass, ManifoldModel


def _check_grid(n: int) -> None:
    if n < 16 or n % 2:
        raise ValueError(f"grid size must be even and >= 16, got {n}")


def spectral_derivative(values: np.ndarray) -> np.ndarray:
    """Derivative of periodic samples on [0, 1) along axis 0.

    The Nyquist coefficient is dropped, which keeps the operator
    antisymmetric.
    """
    n = values.shape[0]
    coef = rfft(values, axis=0)
    k = np.arange(coef.shape[0], dtype=float)
    k[-1] = 0.0 if n % 2 == 0 else k[-1]
    shape = (-1,) + (1,) * (values.ndim - 1)
    return irfft(coef * (2j * np.pi * k).reshape(shape), n=n, axis=0)


@lru_cache(maxsize=32)
def derivative_matrix(n: int) -> np.ndarray:
    """Dense matrix of :func:`spectral_derivative` acting on n samples."""
    d = spectral_derivative(np.eye(n))
    d.setflags(write=False)
    return d


@dataclass
class DiscreteLoop:
    """Closed curve sampled at t_i = i/N in cover coordinates.

    The closure condition is q(1) = q(0) + winding.
    """

    samples: np.ndarray
    winding: HomotopyClass

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        self.winding = HomotopyClass.of(self.winding)
        if self.samples.ndim != 2 or self.samples.shape[1] != 2:
            raise ValueError("samples must have shape (N, 2)")
        _check_grid(self.samples.shape[0])

    @property
    def N(self) -> int:
        return self.samples.shape[0]

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.N) / self.N

    def periodic_part(self) -> np.ndarray:
        return self.samples - self.t[:, None] * self.winding.vector[None, :]

    def velocity(self) -> np.ndarray:
        return spectral_derivative(self.periodic_part()) + self.winding.vector[None, :]

    def reversed(self) -> "DiscreteLoop":
        """q(-t): sample i of the result is sample -i of ``self``."""
        idx = (-np.arange(self.N)) % self.N
        s = self.samples[idx].copy()
        s[1:] -= self.winding.vector[None, :]
        return DiscreteLoop(s, -self.winding)

    def shifted(self, tau: float) -> "DiscreteLoop":
        """Time shift q(t + tau), evaluated by trigonometric interpolation."""
        per = self.periodic_part()
        coef = rfft(per, axis=0)
        k = np.arange(coef.shape[0])
        ph = np.exp(2j * np.pi * k * tau)
        if self.N % 2 == 0:
            ph[-1] = np.cos(np.pi * self.N * tau)
        per2 = irfft(coef * ph[:, None], n=self.N, axis=0)
        s = per2 + (self.t[:, None] + tau) * self.winding.vector[None, :]
        return DiscreteLoop(s, self.winding)

    def translated(self, d) -> "DiscreteLoop":
        return DiscreteLoop(self.samples + np.asarray(d, dtype=float)[None, :], self.winding)

    def copy(self) -> "DiscreteLoop":
        return DiscreteLoop(self.samples.copy(), self.winding)

    @classmethod
    def straight(cls, winding, n: int, start=(0.0, 0.0)) -> "DiscreteLoop":
        w = HomotopyClass.of(winding)
        t = np.arange(n) / n
        return cls(np.asarray(start, float)[None, :] + t[:, None] * w.vector[None, :], w)

    @classmethod
    def constant(cls, point, n: int) -> "DiscreteLoop":
        return cls(np.tile(np.asarray(point, float), (n, 1)), HomotopyClass(0, 0))

    @classmethod
    def circle(cls, center, radius: float, n: int, clockwise: bool = False) -> "DiscreteLoop":
        t = np.arange(n) / n
        sgn = -1.0 if clockwise else 1.0
        a = 2 * np.pi * t
        s = np.asarray(center, float)[None, :] + radius * np.stack(
            [np.cos(a), sgn * np.sin(a)], axis=1
        )
        return cls(s, HomotopyClass(0, 0))

    def to_csv(self) -> str:
        lines = [f"# class {self.winding.m1} {self.winding.m2}", "t,x,y"]
        for ti, (x, y) in zip(self.t, self.samples):
            lines.append(f"{ti:.17g},{x:.17g},{y:.17g}")
        return "\n".join(lines) + "\n"


def loop_energy(model: ManifoldModel | None, q: DiscreteLoop):
    """Return (integral of |qdot|_g^2, velocity samples)."""
    v = q.velocity()
    w = np.ones(q.N) if model is None else model.conformal(q.samples)
    return float(np.mean(w * np.sum(v * v, axis=1))), v


def resample(q: DiscreteLoop, n_new: int) -> DiscreteLoop:
    """Trigonometric interpolation of the periodic part onto a new grid."""
    _check_grid(n_new)
    per = q.periodic_part()
    n = q.N
    coef = rfft(per, axis=0) / n
    m = n_new // 2 + 1
    new = np.zeros((m, 2), dtype=complex)
    keep = min(m, coef.shape[0])
    new[:keep] = coef[:keep]
    if n_new < n:
        # the aliased +-N'/2 pair collapses onto the real Nyquist slot
        new[-1] = 2.0 * new[-1].real
    elif n_new > n:
        # split the old Nyquist mode evenly between +-N/2
        new[n // 2] *= 0.5
    per_new = irfft(new * n_new, n=n_new, axis=0)
    t = np.arange(n_new) / n_new
    return DiscreteLoop(per_new + t[:, None] * q.winding.vector[None, :], q.winding)


def covariant_derivative(model: ManifoldModel, q: DiscreteLoop, zeta: np.ndarray) -> np.ndarray:
    """nabla_t zeta along q for a periodic vector field ``zeta`` of shape (N, 2)."""
    v = q.velocity()
    gam = model.christoffel_at(q.samples)
    return spectral_derivative(zeta) + np.einsum("nkij,ni,nj->nk", gam, v, zeta)


def covariant_derivative_matrix(model: ManifoldModel, q: DiscreteLoop) -> np.ndarray:
    """Matrix of nabla_t on flattened fields (sample-major, 2N entries)."""
    n = q.N
    d = np.kron(derivative_matrix(n), np.eye(2))
    v = q.velocity()
    gam = model.christoffel_at(q.samples)
    blocks = np.einsum("nkij,ni->nkj", gam, v)
    for i in range(n):
        d[2 * i : 2 * i + 2, 2 * i : 2 * i + 2] += blocks[i]
    return d


def w12_matrix(model: ManifoldModel, q: DiscreteLoop) -> np.ndarray:
    """Gram matrix of the W^{1,2} inner product on flattened fields."""
    n = q.N
    g = model.conformal(q.samples)
    gdiag = np.repeat(g, 2)
    dc = covariant_derivative_matrix(model, q)
    return (np.diag(gdiag) + dc.T @ (gdiag[:, None] * dc)) / n


def w12_inner(model: ManifoldModel, q: DiscreteLoop, a, b) -> float:
    """W^{1,2} inner product of (zeta, b) and (vartheta, e) along ``q``."""
    zeta, s1 = a
    theta, s2 = b
    zeta = np.asarray(zeta, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if zeta.shape != (q.N, 2) or theta.shape != (q.N, 2):
        raise ValueError("tangent fields must have shape (N, 2)")
    g = model.conformal(q.samples)
    dz = covariant_derivative(model, q, zeta)
    dt = covariant_derivative(model, q, theta)
    val = np.mean(g * (np.sum(zeta * theta, axis=1) + np.sum(dz * dt, axis=1)))
    return float(val + (s1 or 0.0) * (s2 or 0.0))


@dataclass
class TangentField:
    """Periodic field along a loop plus an optional scalar slot."""

    values: np.ndarray
    scalar: float = 0.0

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.values), [self.scalar]])


@lru_cache(maxsize=32)
def band_basis(n: int) -> np.ndarray:
    """Orthonormal basis (n, n-1) of sample vectors without a Nyquist mode.

    The spectral derivative annihilates the Nyquist mode, so the discrete
    loop space is the span of the lower modes only.
    """
    from scipy.linalg import null_space

    e = ((-1.0) ** np.arange(n))[None, :]
    b = null_space(e)
    b.setflags(write=False)
    return b


def band_limit(q: DiscreteLoop) -> DiscreteLoop:
    """Remove the Nyquist component of the periodic part."""
    per = q.periodic_part()
    e = (-1.0) ** np.arange(q.N)
    per = per - np.outer(e, e @ per) / q.N
    return DiscreteLoop(per + q.t[:, None] * q.winding.vector[None, :], q.winding)


def field_basis(n: int, components: int = 2, extra: int = 0) -> np.ndarray:
    """Basis for flattened sample-major fields without Nyquist modes.

    ``extra`` trailing scalar slots are appended unchanged.
    """
    b = np.kron(band_basis(n), np.eye(components))
    if extra:
        r, c = b.shape
        out = np.zeros((r + extra, c + extra))
        out[:r, :c] = b
        out[r:, c:] = np.eye(extra)
        return out
    return b


def _shift_distance(a: DiscreteLoop, b: DiscreteLoop, tau: float) -> float:
    d = a.shifted(tau).samples - b.samples
    d -= np.round(np.mean(d, axis=0))[None, :]
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def align_shift(a: DiscreteLoop, b: DiscreteLoop, n_coarse: int | None = None) -> tuple[float, float]:
    """Time shift tau in [0, 1) minimizing the RMS distance of a(. + tau) to b.

    The distance is taken modulo integer translations of the cover, so the
    loops are compared as loops on the torus.  Returns (tau, distance).  Loops in different classes are never aligned.
    """
    from scipy.optimize import minimize_scalar

    if a.winding != b.winding:
        return 0.0, np.inf
    if a.N != b.N:
        a = resample(a, b.N)
    n_coarse = n_coarse or 4 * b.N
    taus = np.arange(n_coarse) / n_coarse
    ds = np.array([_shift_distance(a, b, t) for t in taus])
    j = int(np.argmin(ds))
    h = 1.0 / n_coarse
    res = minimize_scalar(
        lambda t: _shift_distance(a, b, t),
        bounds=(taus[j] - h, taus[j] + h),
        method="bounded",
        options={"xatol": 1e-12},
    )
    tau, dist = float(res.x) % 1.0, float(res.fun)
    if ds[j] < dist:
        tau, dist = float(taus[j]), float(ds[j])
    return tau, dist
