"""Linearized flow, Conley-Zehnder (Robbin-Salamon) index and the chi sign.

The linearized flow is expressed in the global trivialization (q, P) with
P = p + theta(q).  In these coordinates omega is the standard form with
matrix J0 = [[0, -I], [I, 0]], and the vertical directions are preserved.

The Robbin-Salamon index of a symplectic path Phi is computed from the
graph of Phi.  The map (z, w) -> ((z + w)/2, J0 (w - z)) sends the diagonal
to the horizontal Lagrangian and graph(Phi) to the frame
X = (I + Phi)/2, Y = J0 (Phi - I).  The unitary U = (X + iY)(X - iY)^{-1}
has eigenvalue 1 exactly at crossings.  With continuously tracked
eigen-angles the index is sum_j h(theta_j(end)) - h(theta_j(start)), where
h(a) = a / 2 pi on 2 pi Z and floor(a / 2 pi) + 1/2 elsewhere.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm
from scipy.optimize import linear_sum_assignment

from .free_time import DegenerateError, FreeTimeConfig, LagCriticalPoint, chi_by_continuation
from .geometry import ManifoldModel
from .rabinowitz import MechanicalHamiltonian, PhaseLoop, hamiltonian_vf, hamiltonian_vf_jacobian, z_lift

J0 = np.block([[np.zeros((2, 2)), -np.eye(2)], [np.eye(2), np.zeros((2, 2))]])
ANGLE_TOL = 1e-6


class SymplecticDefectError(RuntimeError):
    pass


class RefineError(RuntimeError):
    pass


@dataclass
class SymplecticPath:
    """Samples Phi(t_j) of a symplectic path in the (q, P) trivialization.

    ``times`` are normalized to [0, 1]; the physical time is ``eta * t``.
    """

    samples: np.ndarray
    times: np.ndarray
    eta: float
    orbit: PhaseLoop | None = None
    raw_end: np.ndarray | None = None
    defect: float = 0.0
    projection: float = 0.0
    closing_error: float = 0.0

    @property
    def period(self) -> float:
        return abs(self.eta)

    @property
    def end(self) -> np.ndarray:
        return self.samples[-1]


def _trivialization(model: ManifoldModel, q) -> np.ndarray:
    psi = np.zeros(np.shape(q)[:-1] + (4, 4))
    psi[..., :, :] = np.eye(4)
    psi[..., 2:, :2] = model.primitive_jac(q)
    return psi


def symplectic_defect(phi: np.ndarray) -> float:
    return float(np.max(np.abs(np.swapaxes(phi, -1, -2) @ J0 @ phi - J0)))


def _project(phi: np.ndarray) -> np.ndarray:
    e = -J0 @ (phi.T @ J0 @ phi) - np.eye(4)
    return phi @ (np.eye(4) - 0.5 * e)


def linearized_flow(
    model: ManifoldModel,
    orbit,
    n_samples: int = 2001,
    rtol: float = 1e-12,
    atol: float = 1e-12,
    max_residual: float = 1e-6,
) -> SymplecticPath:
    """Integrate x' = eta X_H(x), Phi' = eta DX_H(x) Phi over t in [0, 1].

    ``orbit`` is a PhaseLoop or a LagCriticalPoint (lifted by Z+).
    """
    if isinstance(orbit, LagCriticalPoint):
        if orbit.residual > max_residual:
            raise ValueError("input is not critical")
        orbit = z_lift(orbit, model)
    eta = float(orbit.eta)
    x0 = np.concatenate([orbit.base.samples[0], orbit.momenta[0]])

    def rhs(_t, y):
        x = y[:4]
        phi = y[4:].reshape(4, 4)
        qd, pd = hamiltonian_vf(model, x[:2], x[2:])
        a = hamiltonian_vf_jacobian(model, x[:2], x[2:])
        return np.concatenate([eta * qd, eta * pd, (eta * a @ phi).ravel()])

    y0 = np.concatenate([x0, np.eye(4).ravel()])
    times = np.linspace(0.0, 1.0, n_samples)
    if eta == 0.0:
        samples = np.tile(np.eye(4), (n_samples, 1, 1))
        return SymplecticPath(samples, times, 0.0, orbit, np.eye(4))
    sol = solve_ivp(rhs, (0.0, 1.0), y0, method="DOP853", rtol=rtol, atol=atol, dense_output=True)
    if not sol.success:
        raise RuntimeError(sol.message)
    ys = sol.sol(times)
    ys[:, -1] = sol.y[:, -1]
    xs = ys[:4].T
    phis = ys[4:].T.reshape(-1, 4, 4)
    psi = _trivialization(model, xs[:, :2])
    psi0inv = np.linalg.inv(psi[0])
    samples = psi @ phis @ psi0inv
    defects = np.max(np.abs(np.swapaxes(samples, -1, -2) @ J0 @ samples - J0), axis=(1, 2))
    defect = float(np.max(defects))
    if defect > 1e-6:
        raise SymplecticDefectError(f"symplectic defect {defect:.3e}")
    proj = 0.0
    if defect > 1e-8:
        fixed = np.array([_project(p) for p in samples])
        proj = float(np.max(np.abs(fixed - samples)))
        samples = fixed
    shift = np.concatenate([orbit.winding.vector, [0.0, 0.0]])
    closing = float(np.max(np.abs(xs[-1] - x0 - shift)))
    return SymplecticPath(samples, times, eta, orbit, phis[-1], defect, proj, closing)


# --------------------------------------------------------------------------
# Robbin-Salamon index


def _graph_unitary(phi: np.ndarray) -> np.ndarray:
    x = 0.5 * (np.eye(4) + phi)
    y = J0 @ (phi - np.eye(4))
    return (x + 1j * y) @ np.linalg.inv(x - 1j * y)


def _angles(u: np.ndarray) -> np.ndarray:
    return np.angle(np.linalg.eigvals(u))


def _track(samples: np.ndarray) -> np.ndarray:
    """Continuously tracked eigen-angles of the graph unitary along the path."""
    prev = _angles(_graph_unitary(samples[0]))
    out = [prev.copy()]
    for phi in samples[1:]:
        new = _angles(_graph_unitary(phi))
        d = np.angle(np.exp(1j * (new[None, :] - prev[None, :].T)))
        r, c = linear_sum_assignment(np.abs(d))
        step = np.empty_like(prev)
        step[r] = d[r, c]
        if np.max(np.abs(step)) > 0.5:
            raise RefineError("eigen-angle jump too large; refine the sampling")
        prev = prev + step
        out.append(prev.copy())
    return np.array(out)


def _h(a: np.ndarray, tol: float) -> np.ndarray:
    m = np.round(a / (2 * np.pi))
    on = np.abs(a - 2 * np.pi * m) < tol
    return np.where(on, m, np.floor(a / (2 * np.pi)) + 0.5)


def _raw_index(samples: np.ndarray, tol: float = ANGLE_TOL) -> float:
    th = _track(samples) * _ORIENTATION
    return float(np.sum(_h(th[-1], tol) - _h(th[0], tol)))


def _calibrate() -> float:
    s = 0.1 * np.eye(4)
    ts = np.linspace(0, 1, 51)
    path = np.array([expm(-t * J0 @ s) for t in ts])
    th = _track(path)
    return 1.0 if np.all(th[-1] > 0) else -1.0


_ORIENTATION = 1.0
_ORIENTATION = _calibrate()


def rs_index(path: SymplecticPath | np.ndarray, tol: float = ANGLE_TOL) -> float:
    """Robbin-Salamon index of the path of graphs against the diagonal.

    Normalized so that t -> exp(-t J0 S), t in [0, 1], with small S > 0
    has index +2.  Agreement of two sampling densities is required.
    """
    samples = path.samples if isinstance(path, SymplecticPath) else np.asarray(path)
    a = _raw_index(samples, tol)
    half = samples[::2] if len(samples) % 2 else np.concatenate([samples[::2], samples[-1:]])
    b = _raw_index(half, tol)
    if a != b:
        raise RefineError("index changed under sample halving")
    return a


def catenate(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    if not np.allclose(first[-1], second[0], atol=1e-10):
        raise ValueError("paths do not join")
    return np.concatenate([first, second[1:]])


def iterate_path(path: SymplecticPath, m: int) -> np.ndarray:
    """Samples of the m-fold iterate t -> Phi(t - j) Phi(1)^j."""
    end = path.end
    parts = [path.samples]
    acc = end.copy()
    for _ in range(m - 1):
        parts.append((path.samples @ acc)[1:])
        acc = end @ acc
    return np.concatenate(parts)


# --------------------------------------------------------------------------
# Floquet data and chi


def floquet_multipliers(path: SymplecticPath) -> np.ndarray:
    return np.linalg.eigvals(path.end)


def transverse_kernel_dim(path: SymplecticPath, tol: float = 1e-6) -> int:
    s = np.linalg.svd(path.end - np.eye(4), compute_uv=False)
    return int(np.sum(s < tol * max(1.0, s[0])))


def chi_block(model: ManifoldModel, path: SymplecticPath, unit_tol: float = 1e-4) -> int:
    """Sign of the shear in the generalized 1-eigenspace of d phi_T.

    For w in that block with dH(w) = 1, Phi w - w = c X_H and chi = sign(c).
    Everything is done in the (q, p) chart at x(0).
    """
    orbit = path.orbit
    phi = path.raw_end
    lam = np.linalg.eigvals(phi)
    near = np.abs(lam - 1) < unit_tol
    if int(np.sum(near)) != 2:
        raise DegenerateError(f"unit-eigenvalue block has dimension {int(np.sum(near))}")
    other = lam[~near]
    e = np.eye(4, dtype=complex)
    proj = (phi - other[0] * e) @ (phi - other[1] * e)
    u, s, _ = np.linalg.svd(proj)
    basis = np.real_if_close(u[:, :2], tol=1e6)
    basis = np.real(basis)
    q0 = orbit.base.samples[0]
    p0 = orbit.momenta[0]
    hq, hp = model_grad(model, q0, p0)
    dh = np.concatenate([hq, hp])
    xq, xp = hamiltonian_vf(model, q0, p0)
    xh = np.concatenate([xq, xp])
    coef = dh @ basis
    w = basis @ coef / float(coef @ coef)
    r = phi @ w - w
    c = float(r @ xh / (xh @ xh))
    perp = r - c * xh
    if np.linalg.norm(perp) > 1e-4 * max(1.0, np.linalg.norm(r)):
        raise DegenerateError("shear direction is not along X_H")
    if abs(c) < 1e-9:
        raise DegenerateError("vanishing shear coefficient")
    return 1 if c > 0 else -1


def model_grad(model: ManifoldModel, q, p):
    return MechanicalHamiltonian(model).grad(q, p)


def mu_cz(model: ManifoldModel, orbit) -> float:
    return rs_index(linearized_flow(model, orbit))


def mu_grading(model: ManifoldModel, z: PhaseLoop) -> float:
    """mu(x, eta) = mu_CZ - chi / 2 for eta != 0, and -n + 1 = -1 for eta = 0."""
    if z.eta == 0.0:
        return -1.0
    path = linearized_flow(model, z)
    return rs_index(path) - 0.5 * chi_block(model, path)


@dataclass
class IndexReport:
    mu_cz: float
    i_T: int
    i_free: int
    chi_block: int
    chi_continuation: int
    nullity: int
    mu_plus: float
    mu_minus: float
    agreement_flags: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "mu_cz": self.mu_cz,
            "i_T": self.i_T,
            "i_free": self.i_free,
            "chi_block": self.chi_block,
            "chi_continuation": self.chi_continuation,
            "nullity": self.nullity,
            "mu_plus": self.mu_plus,
            "mu_minus": self.mu_minus,
            "agreement_flags": dict(self.agreement_flags),
        }


def index_report(cfg: FreeTimeConfig, cp: LagCriticalPoint) -> IndexReport:
    """All index quantities of one orbit, each computed independently."""
    model = cfg.model
    zp = z_lift(cp, model, +1)
    zm = z_lift(cp, model, -1)
    pp = linearized_flow(model, zp)
    pm = linearized_flow(model, zm)
    mu_p_cz = rs_index(pp)
    mu_m_cz = rs_index(pm)
    chi_p = chi_block(model, pp)
    chi_m = chi_block(model, pm)
    chi_c = cp.chi if cp.chi is not None else chi_by_continuation(cfg, cp)
    nullity = transverse_kernel_dim(pp)
    mu_plus = mu_p_cz - 0.5 * chi_p
    mu_minus = mu_m_cz - 0.5 * chi_m
    flags = {
        "i_equals_iT_plus_half_minus_half_chi": cp.i == cp.i_T + 0.5 - 0.5 * chi_c,
        "mu_cz_minus_half_equals_iT": mu_p_cz - 0.5 == cp.i_T,
        "mu_plus_equals_i": mu_plus == cp.i,
        "mu_minus_equals_minus_i": mu_minus == -cp.i,
        "chi_agree": chi_p == chi_c,
        "chi_minus_flips": chi_m == -chi_p,
        "transverse_kernel_one": nullity == 1,
    }
    return IndexReport(mu_p_cz, cp.i_T, cp.i, chi_p, chi_c, nullity, mu_plus, mu_minus, flags)
