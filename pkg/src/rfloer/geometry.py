"""Conformally flat 2-torus models with a magnetic two-form and a potential.

Every field on the torus is stored as a finite Fourier table whose rows are
``[kx, ky, re, im]`` and which evaluates to

    f(q) = sum re * cos(2 pi k.q) + im * sin(2 pi k.q).

Points are arrays whose last axis has length 2; all evaluators broadcast over
the leading axes.  Cover coordinates are plain points of R^2.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

TWO_PI = 2.0 * np.pi
_ROT = np.array([[0.0, -1.0], [1.0, 0.0]])


class UnboundedPrimitiveError(ValueError):
    """Raised when a quantity needs a bounded primitive but B != 0."""


class FourierField:
    """Real trigonometric polynomial on the torus R^2 / Z^2.

    Parameters
    ----------
    table : array_like, shape (m, 4)
        Rows ``[kx, ky, re, im]``.  An empty table is the zero function.
    """

    def __init__(self, table: Sequence[Sequence[float]] | np.ndarray | None = None):
        arr = np.zeros((0, 4)) if table is None else np.asarray(table, dtype=float)
        if arr.size == 0:
            arr = np.zeros((0, 4))
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise ValueError("Fourier table rows must be [kx, ky, re, im]")
        self.table = arr
        self.k = arr[:, :2]
        self.re = arr[:, 2]
        self.im = arr[:, 3]

    @property
    def is_zero(self) -> bool:
        return self.table.shape[0] == 0 or not (np.any(self.re) or np.any(self.im))

    def _phase(self, q):
        q = np.asarray(q, dtype=float)
        return TWO_PI * (q @ self.k.T)

    def value(self, q):
        q = np.asarray(q, dtype=float)
        if self.is_zero:
            return np.zeros(q.shape[:-1])
        a = self._phase(q)
        return np.cos(a) @ self.re + np.sin(a) @ self.im

    def grad(self, q):
        q = np.asarray(q, dtype=float)
        if self.is_zero:
            return np.zeros(q.shape)
        a = self._phase(q)
        c = -np.sin(a) * self.re + np.cos(a) * self.im
        return TWO_PI * (c @ self.k)

    def hess(self, q):
        q = np.asarray(q, dtype=float)
        if self.is_zero:
            return np.zeros(q.shape + (2,))
        a = self._phase(q)
        c = np.cos(a) * self.re + np.sin(a) * self.im
        kk = self.k[:, :, None] * self.k[:, None, :]
        return -(TWO_PI**2) * np.einsum("...m,mij->...ij", c, kk)

    def sup_bound(self) -> float:
        """Triangle-inequality bound on sup |f|."""
        return float(np.sum(np.hypot(self.re, self.im)))

    def scaled(self, s: float) -> "FourierField":
        t = self.table.copy()
        t[:, 2:] *= s
        return FourierField(t)

    def tolist(self) -> list:
        return self.table.tolist()


@dataclass(frozen=True)
class HomotopyClass:
    """Free homotopy class of a torus loop, recorded by its winding vector."""

    m1: int = 0
    m2: int = 0

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.m1, self.m2], dtype=float)

    @property
    def trivial(self) -> bool:
        return self.m1 == 0 and self.m2 == 0

    def __neg__(self) -> "HomotopyClass":
        return HomotopyClass(-self.m1, -self.m2)

    @classmethod
    def of(cls, w) -> "HomotopyClass":
        if isinstance(w, HomotopyClass):
            return w
        a, b = (int(round(v)) for v in w)
        return cls(a, b)


@dataclass
class ManifoldModel:
    """Metric e^{2 phi}(dx^2+dy^2), potential U and sigma = B dx^dy + d theta_ex.

    Attributes
    ----------
    phi, U, theta_x, theta_y : FourierField
        Conformal factor, potential and the two components of theta_ex.
    B : float
        Flux of sigma through the torus.
    ref_point : ndarray, shape (2,)
        Base point of the straight reference loops.
    """

    phi: FourierField = field(default_factory=FourierField)
    U: FourierField = field(default_factory=FourierField)
    B: float = 0.0
    theta_x: FourierField = field(default_factory=FourierField)
    theta_y: FourierField = field(default_factory=FourierField)
    ref_point: np.ndarray = field(default_factory=lambda: np.zeros(2))
    dimension: int = 2

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ManifoldModel":
        return cls(
            phi=FourierField(d.get("phi")),
            U=FourierField(d.get("U")),
            B=float(d.get("B", 0.0)),
            theta_x=FourierField(d.get("theta_ex_x")),
            theta_y=FourierField(d.get("theta_ex_y")),
            ref_point=np.asarray(d.get("ref_point", [0.0, 0.0]), dtype=float),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "phi": self.phi.tolist(),
            "U": self.U.tolist(),
            "B": self.B,
            "theta_ex_x": self.theta_x.tolist(),
            "theta_ex_y": self.theta_y.tolist(),
            "ref_point": [float(v) for v in self.ref_point],
        }

    def scaled(self, s: float) -> "ManifoldModel":
        """Model with (s sigma, s^2 U) and the same metric."""
        return ManifoldModel(
            phi=self.phi,
            U=self.U.scaled(s * s),
            B=s * self.B,
            theta_x=self.theta_x.scaled(s),
            theta_y=self.theta_y.scaled(s),
            ref_point=self.ref_point.copy(),
        )

    # metric -----------------------------------------------------------
    def conformal(self, q):
        return np.exp(2.0 * self.phi.value(q))

    def metric_at(self, q):
        q = np.asarray(q, dtype=float)
        return self.conformal(q)[..., None, None] * np.eye(2)

    def christoffel_at(self, q):
        """Christoffel symbols ``G[..., k, i, j]`` of the conformal metric."""
        q = np.asarray(q, dtype=float)
        d = self.phi.grad(q)
        eye = np.eye(2)
        return (
            np.einsum("ki,...j->...kij", eye, d)
            + np.einsum("kj,...i->...kij", eye, d)
            - np.einsum("ij,...k->...kij", eye, d)
        )

    # potential --------------------------------------------------------
    def potential(self, q):
        return self.U.value(q)

    # magnetic form ----------------------------------------------------
    @property
    def bounded_primitive(self) -> bool:
        return self.B == 0.0

    @property
    def sigma_is_zero(self) -> bool:
        return self.B == 0.0 and self.theta_x.is_zero and self.theta_y.is_zero

    def sigma_density(self, q):
        """Coefficient s of sigma = s dx^dy."""
        gx = self.theta_x.grad(q)
        gy = self.theta_y.grad(q)
        return self.B + gy[..., 0] - gx[..., 1]

    def sigma_density_grad(self, q):
        hx = self.theta_x.hess(q)
        hy = self.theta_y.hess(q)
        return hy[..., 0, :] - hx[..., 1, :]

    def lorentz_at(self, q):
        """Y_q with sigma_q(v, w) = <Y_q v, w>_g."""
        q = np.asarray(q, dtype=float)
        f = self.sigma_density(q) / self.conformal(q)
        return f[..., None, None] * _ROT

    def primitive_at(self, q):
        """theta(q) = B x dy + theta_ex(q) on the cover."""
        q = np.asarray(q, dtype=float)
        th = np.stack([self.theta_x.value(q), self.theta_y.value(q)], axis=-1)
        th[..., 1] += self.B * q[..., 0]
        return th

    def primitive_jac(self, q):
        """``J[..., i, j] = d theta_i / d q_j``."""
        q = np.asarray(q, dtype=float)
        jac = np.stack([self.theta_x.grad(q), self.theta_y.grad(q)], axis=-2)
        jac[..., 1, 0] += self.B
        return jac

    def primitive_hess(self, q):
        """``H[..., i, j, l] = d^2 theta_i / dq_j dq_l``."""
        q = np.asarray(q, dtype=float)
        return np.stack([self.theta_x.hess(q), self.theta_y.hess(q)], axis=-3)

    def primitive_sup(self) -> float:
        if not self.bounded_primitive:
            return np.inf
        return float(np.hypot(self.theta_x.sup_bound(), self.theta_y.sup_bound()))


def metric_at(model: ManifoldModel, q, christoffel: bool = False):
    """Metric matrix at ``q`` and optionally the Christoffel symbols."""
    g = model.metric_at(q)
    if christoffel:
        return g, model.christoffel_at(q)
    return g


def lorentz_at(model: ManifoldModel, q):
    return model.lorentz_at(q)


def primitive_at(model: ManifoldModel, q):
    return model.primitive_at(q)


def bounded_primitive_exists(model: ManifoldModel) -> bool:
    return model.bounded_primitive


def reference_loop(model: ManifoldModel, alpha: HomotopyClass, n: int) -> np.ndarray:
    """Samples of q_alpha(t) = q0 + t m on the grid t_i = i/n."""
    alpha = HomotopyClass.of(alpha)
    t = np.arange(n) / n
    return model.ref_point[None, :] + t[:, None] * alpha.vector[None, :]


def holonomy_constant(model: ManifoldModel, alpha, n: int = 256) -> float:
    """I(alpha, theta): integral of theta along the reversed reference loop."""
    alpha = HomotopyClass.of(alpha)
    if alpha.trivial:
        return 0.0
    if not model.bounded_primitive:
        raise UnboundedPrimitiveError("no bounded primitive for B != 0")
    if not np.all(np.isfinite(model.ref_point)):
        raise ValueError("non-finite reference point")
    t = np.arange(n) / n
    m = alpha.vector
    pts = model.ref_point[None, :] - t[:, None] * m[None, :]
    vals = model.primitive_at(pts) @ (-m)
    out = float(np.mean(vals))
    if not np.isfinite(out):
        raise ValueError("quadrature produced a non-finite value")
    return out


def cap_flux(model: ManifoldModel, loop) -> float:
    """Flux of sigma through a cylinder joining the reference loop to ``loop``."""
    alpha = loop.winding
    if not alpha.trivial and not model.bounded_primitive:
        raise UnboundedPrimitiveError("no bounded primitive for B != 0")
    v = loop.velocity()
    th = model.primitive_at(loop.samples)
    return float(np.mean(np.sum(th * v, axis=-1))) + holonomy_constant(model, alpha, loop.N)
