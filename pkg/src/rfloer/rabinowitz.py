"""Hamiltonian side: magnetic Hamiltonian flow and the Rabinowitz action.

Phase points are (q, p) with p a covector.  The twisted symplectic form is
omega = dp^dq + s(q) dx^dy.  With the action functional

    A(x, eta) = mean_i [(p_i + theta(q_i)).v_i - eta (H(x_i) - k)] + I(alpha)

critical points satisfy xdot = eta X_H(x), which fixes the Hamiltonian
vector field as qdot = dH/dp and pdot = -dH/dq + s (qdot_2, -qdot_1).
Phase loops are flattened sample-major as (q_x, q_y, p_x, p_y) per sample,
followed by eta.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.integrate import solve_ivp

from .free_time import LagCriticalPoint, NonConvergenceError
from .geometry import HomotopyClass, ManifoldModel, UnboundedPrimitiveError, holonomy_constant
from .loops import DiscreteLoop, band_limit, derivative_matrix, field_basis, spectral_derivative

_R = np.array([[0.0, 1.0], [-1.0, 0.0]])


# --------------------------------------------------------------------------
# Hamiltonians


class MechanicalHamiltonian:
    """H(q, p) = |p|^2_g / 2 + U(q) for the conformal metric."""

    def __init__(self, model: ManifoldModel):
        self.model = model

    def value(self, q, p):
        m = self.model
        return 0.5 * np.sum(p * p, axis=-1) / m.conformal(q) + m.potential(q)

    def grad(self, q, p):
        m = self.model
        ew = 1.0 / m.conformal(q)
        pp = np.sum(p * p, axis=-1)
        hq = -(ew * pp)[..., None] * m.phi.grad(q) + m.U.grad(q)
        hp = ew[..., None] * p
        return hq, hp

    def hess(self, q, p):
        """Return (H_qq, H_qp, H_pp) with ``H_qp[..., i, a] = d^2H/dq_i dp_a``."""
        m = self.model
        ew = 1.0 / m.conformal(q)
        pp = np.sum(p * p, axis=-1)
        d = m.phi.grad(q)
        hqq = (ew * pp)[..., None, None] * (2 * d[..., :, None] * d[..., None, :] - m.phi.hess(q))
        hqq = hqq + m.U.hess(q)
        hqp = -2 * ew[..., None, None] * d[..., :, None] * p[..., None, :]
        hpp = ew[..., None, None] * np.eye(2)
        return hqq, hqp, hpp


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)
        b = np.where(x < 1, np.exp(-1.0 / np.where(x < 1, 1 - x, 1.0)), 0.0)
    return a / (a + b)


def _smoothstep_deriv(x):
    x = np.asarray(x, dtype=float)
    inside = (x > 0) & (x < 1)
    out = np.zeros_like(x)
    xi = x[inside]
    a = np.exp(-1.0 / xi)
    b = np.exp(-1.0 / (1 - xi))
    da = a / xi**2
    db = -b / (1 - xi) ** 2
    out[inside] = (da * (a + b) - a * (da + db)) / (a + b) ** 2
    return out


class CutoffProfile:
    """rho(t) = t for t <= 1 - delta and rho(t) = 1 for t >= 1 + delta."""

    def __init__(self, delta: float = 0.25):
        if not 0 < delta < 1.0 / 3.0:
            raise ValueError("delta must lie in (0, 1/3)")
        self.delta = delta
        self._nodes, self._weights = np.polynomial.legendre.leggauss(48)

    def deriv(self, t):
        d = self.delta
        return 1.0 - _smoothstep((np.asarray(t, float) - (1 - d)) / (2 * d))

    def deriv2(self, t):
        d = self.delta
        return -_smoothstep_deriv((np.asarray(t, float) - (1 - d)) / (2 * d)) / (2 * d)

    def value(self, t):
        t = np.asarray(t, dtype=float)
        d = self.delta
        lo = 1 - d
        out = np.where(t <= lo, t, 1.0)
        mid = (t > lo) & (t < 1 + d)
        for idx in zip(*np.nonzero(mid)) if t.ndim else ([()] if mid else []):
            b = t[idx]
            xs = lo + (b - lo) * (self._nodes + 1) / 2
            out[idx] = lo + (b - lo) / 2 * np.sum(self._weights * self.deriv(xs))
        return out


class TruncatedHamiltonian:
    """H_R = R rho(H / R); equals H exactly where H <= (1 - delta) R."""

    def __init__(self, base: MechanicalHamiltonian, R: float, k: float, delta: float = 0.25):
        model = base.model
        if R <= 2 * k + model.U.sup_bound():
            raise ValueError("R too small: need R > 2k + sup|U|")
        self.base = base
        self.model = model
        self.R = float(R)
        self.rho = CutoffProfile(delta)

    def value(self, q, p):
        h = self.base.value(q, p)
        t = h / self.R
        out = np.array(h, dtype=float, copy=True)
        far = t > 1 - self.rho.delta
        if np.any(far):
            out[far] = self.R * self.rho.value(t[far])
        return out

    def grad(self, q, p):
        h = self.base.value(q, p)
        f = self.rho.deriv(h / self.R)
        hq, hp = self.base.grad(q, p)
        return f[..., None] * hq, f[..., None] * hp

    def hess(self, q, p):
        h = self.base.value(q, p)
        t = h / self.R
        f1 = self.rho.deriv(t)
        f2 = self.rho.deriv2(t) / self.R
        hq, hp = self.base.grad(q, p)
        bqq, bqp, bpp = self.base.hess(q, p)
        hqq = f1[..., None, None] * bqq + f2[..., None, None] * hq[..., :, None] * hq[..., None, :]
        hqp = f1[..., None, None] * bqp + f2[..., None, None] * hq[..., :, None] * hp[..., None, :]
        hpp = f1[..., None, None] * bpp + f2[..., None, None] * hp[..., :, None] * hp[..., None, :]
        return hqq, hqp, hpp


def truncated_hamiltonian(model: ManifoldModel, R: float, k: float = 0.5, delta: float = 0.25):
    return TruncatedHamiltonian(MechanicalHamiltonian(model), R, k, delta)


def _as_ham(model_or_ham):
    if isinstance(model_or_ham, ManifoldModel):
        return MechanicalHamiltonian(model_or_ham)
    return model_or_ham


def hamiltonian_vf(model_or_ham, q, p):
    """X_H at (q, p): returns (qdot, pdot)."""
    ham = _as_ham(model_or_ham)
    hq, hp = ham.grad(q, p)
    s = ham.model.sigma_density(q)
    pdot = -hq + s[..., None] * (hp @ _R.T)
    return hp, pdot


def hamiltonian_vf_jacobian(model_or_ham, q, p):
    """4x4 Jacobian of X_H in (q, p) coordinates."""
    ham = _as_ham(model_or_ham)
    hq, hp = ham.grad(q, p)
    hqq, hqp, hpp = ham.hess(q, p)
    m = ham.model
    s = m.sigma_density(q)
    ds = m.sigma_density_grad(q)
    shape = np.shape(q)[:-1] + (4, 4)
    out = np.zeros(shape)
    out[..., :2, :2] = np.swapaxes(hqp, -1, -2)
    out[..., :2, 2:] = hpp
    rhp = hp @ _R.T
    out[..., 2:, :2] = (
        -hqq
        + rhp[..., :, None] * ds[..., None, :]
        + s[..., None, None] * (_R @ np.swapaxes(hqp, -1, -2))
    )
    out[..., 2:, 2:] = -hqp + s[..., None, None] * (_R @ hpp)
    return out


def b0_constant(model: ManifoldModel, n_grid: int = 48, n_rad: int = 40, p_max: float = 20.0) -> float:
    """Grid estimate of the smallest b0 with |X_H| <= b0 (1 + |p|^2)."""
    s = np.arange(n_grid) / n_grid
    X, Y = np.meshgrid(s, s, indexing="ij")
    qs = np.stack([X.ravel(), Y.ravel()], axis=1)
    best = 0.0
    for r in np.linspace(0.0, p_max, n_rad):
        for a in np.linspace(0, 2 * np.pi, 16, endpoint=False):
            p = np.tile([r * np.cos(a), r * np.sin(a)], (len(qs), 1))
            qd, pd = hamiltonian_vf(model, qs, p)
            nrm = np.sqrt(np.sum(qd * qd + pd * pd, axis=1))
            best = max(best, float(np.max(nrm / (1 + r * r))))
    return best


# --------------------------------------------------------------------------
# phase loops


@dataclass
class PhaseLoop:
    base: DiscreteLoop
    momenta: np.ndarray
    eta: float

    def __post_init__(self):
        self.momenta = np.asarray(self.momenta, dtype=float)
        if self.momenta.shape != self.base.samples.shape:
            raise ValueError("momenta must match the base samples")

    @property
    def N(self) -> int:
        return self.base.N

    @property
    def winding(self) -> HomotopyClass:
        return self.base.winding

    def flat(self) -> np.ndarray:
        x = np.concatenate([self.base.samples, self.momenta], axis=1)
        return np.concatenate([x.ravel(), [self.eta]])

    @classmethod
    def from_flat(cls, z: np.ndarray, winding) -> "PhaseLoop":
        x = z[:-1].reshape(-1, 4)
        return cls(DiscreteLoop(x[:, :2], winding), x[:, 2:].copy(), float(z[-1]))

    def reversed(self) -> "PhaseLoop":
        idx = (-np.arange(self.N)) % self.N
        return PhaseLoop(self.base.reversed(), self.momenta[idx].copy(), -self.eta)

    def band_limited(self) -> "PhaseLoop":
        e = (-1.0) ** np.arange(self.N)
        p = self.momenta - np.outer(e, e @ self.momenta) / self.N
        return PhaseLoop(band_limit(self.base), p, self.eta)


def _flux_const(model: ManifoldModel, w: HomotopyClass, n: int) -> float:
    if not w.trivial and not model.bounded_primitive:
        raise UnboundedPrimitiveError("no bounded primitive for B != 0")
    return holonomy_constant(model, w, n)


def action(model: ManifoldModel, k: float, u: PhaseLoop, ham=None) -> float:
    ham = ham or MechanicalHamiltonian(model)
    q = u.base.samples
    v = u.base.velocity()
    lam = np.sum((u.momenta + model.primitive_at(q)) * v, axis=1)
    h = ham.value(q, u.momenta)
    return float(np.mean(lam - u.eta * (h - k))) + _flux_const(model, u.winding, u.N)


def differential(model: ManifoldModel, k: float, u: PhaseLoop, ham=None) -> np.ndarray:
    """Euclidean gradient of the discrete A in the flat variables."""
    ham = ham or MechanicalHamiltonian(model)
    n = u.N
    q = u.base.samples
    p = u.momenta
    v = u.base.velocity()
    hq, hp = ham.grad(q, p)
    jth = model.primitive_jac(q)
    big_p = p + model.primitive_at(q)
    d = derivative_matrix(n)
    gq = (np.einsum("nij,ni->nj", jth, v) - u.eta * hq + d.T @ big_p) / n
    gp = (v - u.eta * hp) / n
    ge = -float(np.mean(ham.value(q, p) - k))
    return np.concatenate([np.concatenate([gq, gp], axis=1).ravel(), [ge]])


def hessian(model: ManifoldModel, k: float, u: PhaseLoop, ham=None) -> np.ndarray:
    """Euclidean Hessian of the discrete A, shape (4N+1, 4N+1)."""
    ham = ham or MechanicalHamiltonian(model)
    n = u.N
    q = u.base.samples
    p = u.momenta
    eta = u.eta
    v = u.base.velocity()
    hq, hp = ham.grad(q, p)
    hqq, hqp, hpp = ham.hess(q, p)
    jth = model.primitive_jac(q)
    hth = model.primitive_hess(q)
    d = derivative_matrix(n)
    iq = (4 * np.arange(n)[:, None] + np.array([0, 1])[None, :]).ravel()
    ip = iq + 2
    dk = np.kron(d, np.eye(2))
    out = np.zeros((4 * n + 1, 4 * n + 1))
    a = sla.block_diag(*np.transpose(jth, (0, 2, 1))) @ dk
    qq = sla.block_diag(*(np.einsum("ni,nijl->njl", v, hth) - eta * hqq)) + a + a.T
    qp = dk.T - eta * sla.block_diag(*hqp)
    pp = -eta * sla.block_diag(*hpp)
    out[np.ix_(iq, iq)] = qq / n
    out[np.ix_(iq, ip)] = qp / n
    out[np.ix_(ip, iq)] = qp.T / n
    out[np.ix_(ip, ip)] = pp / n
    out[iq, -1] = -hq.ravel() / n
    out[-1, iq] = -hq.ravel() / n
    out[ip, -1] = -hp.ravel() / n
    out[-1, ip] = -hp.ravel() / n
    return 0.5 * (out + out.T)


# --------------------------------------------------------------------------
# almost complex structures and the L2 metric


def omega_matrix(model: ManifoldModel, q) -> np.ndarray:
    """Matrix W with omega(a, b) = a^T W b, omega = dp^dq + s dx^dy."""
    s = model.sigma_density(q)
    shape = np.shape(q)[:-1] + (4, 4)
    w = np.zeros(shape)
    eye = np.eye(2)
    w[..., 2:, :2] = eye
    w[..., :2, 2:] = -eye
    w[..., 0, 1] += s
    w[..., 1, 0] -= s
    return w


def _connection_matrix(model: ManifoldModel, q, p):
    gam = model.christoffel_at(q)
    return np.einsum("...kij,...k->...ij", gam, p)


def metric_acs(model: ManifoldModel, q, p) -> np.ndarray:
    """J_g: swaps horizontal and vertical parts through the metric.

    With h = dq and w = dp - K dq, J_g(h, w) = (-g^{-1} w, g h), so that
    dp^dq(J_g a, a) is the Sasaki norm of a.
    """
    c = np.asarray(model.conformal(q), dtype=float)
    K = _connection_matrix(model, q, p)
    shape = np.shape(q)[:-1]
    C = np.zeros(shape + (4, 4))
    C[..., :2, :2] = np.eye(2)
    C[..., 2:, 2:] = np.eye(2)
    C[..., 2:, :2] = -K
    Jhv = np.zeros(shape + (4, 4))
    Jhv[..., :2, 2:] = -np.eye(2) / c[..., None, None]
    Jhv[..., 2:, :2] = np.eye(2) * c[..., None, None]
    return np.linalg.solve(C, Jhv @ C)


def sasaki_metric(model: ManifoldModel, q, p) -> np.ndarray:
    J = metric_acs(model, q, p)
    w0 = omega_matrix(ManifoldModel(phi=model.phi), q)
    return np.swapaxes(J, -1, -2) @ w0


def compatible_acs(model: ManifoldModel, q, p) -> np.ndarray:
    """omega-compatible J from the polar decomposition against the Sasaki metric."""
    G = sasaki_metric(model, q, p)
    W = omega_matrix(model, q)
    A = -np.linalg.solve(G, W)
    L = np.linalg.cholesky(G)
    Lt = np.swapaxes(L, -1, -2)
    At = Lt @ A @ np.linalg.inv(Lt)
    At = 0.5 * (At - np.swapaxes(At, -1, -2))
    S = -At @ At
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    lam, vec = np.linalg.eigh(S)
    Pt = vec @ (vec.swapaxes(-1, -2) / np.sqrt(lam)[..., :, None])
    Jt = -At @ Pt
    return np.linalg.inv(Lt) @ Jt @ Lt


@dataclass
class AcsModel:
    mode: str = "metric_J"

    def __post_init__(self):
        if self.mode not in ("metric_J", "compatible_J"):
            raise ValueError(f"unknown almost complex structure mode {self.mode}")

    def J(self, model: ManifoldModel, q, p) -> np.ndarray:
        if self.mode == "metric_J":
            return metric_acs(model, q, p)
        return compatible_acs(model, q, p)

    def gram(self, model: ManifoldModel, q, p) -> np.ndarray:
        """Pointwise metric matrix for <a, b>_J."""
        J = self.J(model, q, p)
        if self.mode == "metric_J":
            W = omega_matrix(ManifoldModel(phi=model.phi), q)
        else:
            W = omega_matrix(model, q)
        G = np.swapaxes(J, -1, -2) @ W
        return 0.5 * (G + np.swapaxes(G, -1, -2))


def l2_metric_matrix(model: ManifoldModel, u: PhaseLoop, acs: AcsModel | None = None) -> np.ndarray:
    acs = acs or AcsModel()
    n = u.N
    G = acs.gram(model, u.base.samples, u.momenta)
    out = np.zeros((4 * n + 1, 4 * n + 1))
    out[:-1, :-1] = sla.block_diag(*G) / n
    out[-1, -1] = 1.0
    return out


def _restricted_solve(m: np.ndarray, g: np.ndarray, n: int) -> np.ndarray:
    b = field_basis(n, components=4, extra=1)
    return b @ sla.solve(b.T @ m @ b, b.T @ g, assume_a="pos")


def l2_gradient(model: ManifoldModel, k: float, u: PhaseLoop, acs: AcsModel | None = None, ham=None):
    """L2 gradient (phase field (N, 4), scalar) of the discrete A."""
    g = differential(model, k, u, ham)
    sol = _restricted_solve(l2_metric_matrix(model, u, acs), g, u.N)
    return sol[:-1].reshape(u.N, 4), float(sol[-1])


def gradient_norm(model: ManifoldModel, k: float, u: PhaseLoop, acs: AcsModel | None = None, ham=None) -> float:
    g = differential(model, k, u, ham)
    sol = _restricted_solve(l2_metric_matrix(model, u, acs), g, u.N)
    return float(np.sqrt(max(g @ sol, 0.0)))


def pointwise_defect(model: ManifoldModel, u: PhaseLoop, ham=None) -> np.ndarray:
    """Samples of xdot - eta X_H(x), shape (N, 4)."""
    ham = ham or MechanicalHamiltonian(model)
    qd = u.base.velocity()
    pd = spectral_derivative(u.momenta)
    xq, xp = hamiltonian_vf(ham, u.base.samples, u.momenta)
    return np.concatenate([qd - u.eta * xq, pd - u.eta * xp], axis=1)


def critical_check(model: ManifoldModel, k: float, u: PhaseLoop, ham=None) -> dict:
    ham = ham or MechanicalHamiltonian(model)
    dfc = pointwise_defect(model, u, ham)
    h = ham.value(u.base.samples, u.momenta)
    return {
        "flow_defect": float(np.max(np.abs(dfc))),
        "energy_defect": float(np.max(np.abs(h - k))),
    }


# --------------------------------------------------------------------------
# Lagrangian correspondence


def z_lift(cp: LagCriticalPoint, model: ManifoldModel, sign: int = +1, max_residual: float = 1e-6) -> PhaseLoop:
    """Z+(q, T) = ((q, g qdot / T), T); Z- is its time reversal with eta = -T."""
    if cp.residual > max_residual:
        raise NonConvergenceError("critical point residual too large for the lift")
    q = cp.loop
    p = model.conformal(q.samples)[:, None] * q.velocity() / cp.T
    u = PhaseLoop(q.copy(), p, cp.T)
    if sign > 0:
        return u
    return u.reversed()


def lagrangian_action(model: ManifoldModel, k: float, q: DiscreteLoop, T: float) -> float:
    from . import free_time

    return free_time.action(free_time.FreeTimeConfig(model, k, N=q.N), q, T)


def compare_actions(model: ManifoldModel, k: float, u: PhaseLoop, tol: float = 1e-8) -> dict:
    """Slacks of A(x, eta) <= S(q, eta) and A(x^-, -eta) >= -S(q, eta)."""
    if u.eta <= 0:
        raise ValueError("eta must be positive")
    s = lagrangian_action(model, k, u.base, u.eta)
    a_plus = action(model, k, u)
    a_minus = action(model, k, u.reversed())
    pv = model.conformal(u.base.samples)[:, None] * u.base.velocity() / u.eta
    mismatch = float(np.max(np.abs(u.momenta - pv)))
    return {
        "S": s,
        "A_plus": a_plus,
        "A_minus": a_minus,
        "slack_plus": s - a_plus,
        "slack_minus": a_minus + s,
        "equality": mismatch < tol,
        "momentum_mismatch": mismatch,
    }


def constant_hessian_kernel(
    model: ManifoldModel, k: float, x0, n: int = 32, rel_tol: float = 1e-8, return_spectrum: bool = False
):
    """Near-zero mode count of the Hessian of A at the constant loop (x0, 0)."""
    ham = MechanicalHamiltonian(model)
    x0 = np.asarray(x0, dtype=float)
    q0, p0 = x0[:2], x0[2:]
    if k < float(np.min(model.potential(_grid(64)))):
        raise ValueError("energy level is empty")
    hq, hp = ham.grad(q0, p0)
    if np.hypot(np.linalg.norm(hq), np.linalg.norm(hp)) < 1e-10:
        raise ValueError("k is not a regular value at x0")
    if abs(float(ham.value(q0, p0)) - k) > 1e-8:
        raise ValueError("x0 is not on the energy level")
    u = PhaseLoop(DiscreteLoop.constant(q0, n), np.tile(p0, (n, 1)), 0.0)
    b = field_basis(n, components=4, extra=1)
    h = b.T @ hessian(model, k, u) @ b
    m = b.T @ l2_metric_matrix(model, u) @ b
    lam = sla.eigh(h, m, eigvals_only=True)
    mags = np.sort(np.abs(lam))
    scale = mags[-1]
    count = int(np.sum(mags < rel_tol * scale))
    if return_spectrum:
        return count, mags
    return count


def _grid(n):
    s = np.arange(n) / n
    X, Y = np.meshgrid(s, s, indexing="ij")
    return np.stack([X.ravel(), Y.ravel()], axis=1)


# --------------------------------------------------------------------------
# Newton refinement of critical points of A


def refine_critical(model: ManifoldModel, k: float, u: PhaseLoop, tol: float = 1e-10, max_iter: int = 40) -> PhaseLoop:
    u = u.band_limited()
    b = field_basis(u.N, components=4, extra=1)
    for _ in range(max_iter):
        g = differential(model, k, u)
        m = l2_metric_matrix(model, u)
        r = float(np.sqrt(max(g @ _restricted_solve(m, g, u.N), 0)))
        if r < tol:
            return u
        h = b.T @ hessian(model, k, u) @ b
        dz = b @ sla.lstsq(h, -(b.T @ g), cond=1e-13)[0]
        u = PhaseLoop.from_flat(u.flat() + dz, u.winding)
    raise NonConvergenceError("Newton on the Rabinowitz action did not converge")


# --------------------------------------------------------------------------
# bound constants


def _band_samples(model: ManifoldModel, k: float, half_width: float, n_q=32, n_dir=24, n_lev=9):
    qs = _grid(n_q)
    c = model.conformal(qs)
    U = model.potential(qs)
    levels = np.linspace(k - half_width, k + half_width, n_lev)
    angs = np.linspace(0, 2 * np.pi, n_dir, endpoint=False)
    dirs = np.stack([np.cos(angs), np.sin(angs)], axis=1)
    Q, P = [], []
    for h in levels:
        r2 = 2 * (h - U) * c
        if np.any(r2 < 0):
            return None, None
        r = np.sqrt(r2)
        for d in dirs:
            Q.append(qs)
            P.append(r[:, None] * d[None, :])
    return np.concatenate(Q), np.concatenate(P)


def liouville_on_xh(model: ManifoldModel, q, p):
    """lambda(X_H) = |p|_g^2 + theta(p#) for lambda = p dq + theta."""
    qd, _ = hamiltonian_vf(model, q, p)
    return np.sum((p + model.primitive_at(q)) * qd, axis=-1)


@dataclass
class EtaBound:
    delta: float
    D: float
    rho0: float
    rho1: float
    C0: float
    I: float
    rho0_source: str = "input"


def band_delta(model: ManifoldModel, k: float) -> float:
    """Largest delta with lambda(X_H) >= 2 delta on H^{-1}([k-delta, k+delta])."""
    if not model.bounded_primitive:
        raise UnboundedPrimitiveError("sup of the primitive is infinite for B != 0")
    umax = float(np.max(model.potential(_grid(64))))
    lo, hi = 0.0, k - umax
    if hi <= 0:
        raise ValueError("energy level meets the zero section")

    def ok(dl):
        Q, P = _band_samples(model, k, dl)
        if Q is None:
            return False
        return 0.5 * float(np.min(liouville_on_xh(model, Q, P))) >= dl

    if not ok(1e-9):
        raise ValueError("level is not of virtual contact type for this primitive")
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def eta_bound_constants(model: ManifoldModel, k: float, alpha, a: float, b: float, rho0: float) -> EtaBound:
    alpha = HomotopyClass.of(alpha)
    delta = band_delta(model, k)
    if delta <= 0:
        raise ValueError("delta <= 0: try a different gauge")
    Q, P = _band_samples(model, k, delta)
    D = float(np.max(np.abs(np.sum((P + model.primitive_at(Q)) * (P / model.conformal(Q)[:, None]), axis=1))))
    # D bounds |lambda| on vectors of the band; use the covector norm bound
    lam_norm = np.sqrt(np.sum((P + model.primitive_at(Q)) ** 2, axis=1) / model.conformal(Q))
    D = max(D, float(np.max(lam_norm)))
    I = holonomy_constant(model, alpha)
    rho1 = max(1.0, D * rho0 + abs(I)) / delta
    C0 = rho1 * (max(abs(a), abs(b)) + 1) + (b - a) / rho0
    return EtaBound(delta, D, rho0, rho1, C0, I)


def estimate_rho0(
    model: ManifoldModel,
    k: float,
    seeds: list[PhaseLoop],
    delta: float,
    n_samples: int = 200,
    rng: np.random.Generator | None = None,
) -> float:
    """Empirical rho0: the smallest gradient norm seen on a loop leaving the band.

    Loops are random smooth perturbations of the given seeds at several
    amplitudes.  Every sampled loop with a smaller gradient norm stayed in
    H^{-1}([k - delta, k + delta]).  This is an estimate, not a bound.
    """
    rng = rng or np.random.default_rng(0)
    ham = MechanicalHamiltonian(model)
    best_out = np.inf
    largest_in = 0.0
    for j in range(n_samples):
        u = seeds[j % len(seeds)]
        amp = 10.0 ** rng.uniform(-4, 0)
        pert = _smooth_noise(rng, u.N, 4, modes=4) * amp
        v = PhaseLoop(
            DiscreteLoop(u.base.samples + pert[:, :2], u.winding),
            u.momenta + pert[:, 2:],
            u.eta * (1 + amp * rng.normal()),
        )
        gn = gradient_norm(model, k, v)
        h = ham.value(v.base.samples, v.momenta)
        inside = bool(np.all(np.abs(h - k) <= delta))
        if inside:
            largest_in = max(largest_in, gn)
        else:
            best_out = min(best_out, gn)
    if np.isfinite(best_out):
        return float(best_out)
    return float(largest_in)


def _smooth_noise(rng: np.random.Generator, n: int, comps: int, modes: int = 4) -> np.ndarray:
    t = np.arange(n) / n
    out = np.zeros((n, comps))
    for j in range(modes + 1):
        a = rng.normal(size=comps) / (1 + j) ** 2
        b = rng.normal(size=comps) / (1 + j) ** 2
        out += np.cos(2 * np.pi * j * t)[:, None] * a[None, :]
        if j:
            out += np.sin(2 * np.pi * j * t)[:, None] * b[None, :]
    return out


# --------------------------------------------------------------------------
# Rabinowitz gradient flow


@dataclass
class RFFlowResult:
    s: np.ndarray
    actions: np.ndarray
    etas: np.ndarray
    grad_norms: np.ndarray
    sup_p: np.ndarray
    energy: np.ndarray
    states: np.ndarray
    status: str
    monitors: dict = field(default_factory=dict)

    def final(self, winding) -> PhaseLoop:
        return PhaseLoop.from_flat(self.states[:-1, -1], winding)

    def to_csv(self) -> str:
        rows = ["s,A,eta,grad_norm,sup_p"]
        for r in zip(self.s, self.actions, self.etas, self.grad_norms, self.sup_p):
            rows.append(",".join(f"{v:.17g}" for v in r))
        return "\n".join(rows) + "\n"


def rabinowitz_flow(
    model: ManifoldModel,
    k: float,
    u0: PhaseLoop,
    s_max: float,
    acs: AcsModel | None = None,
    ham=None,
    window: tuple[float, float] | None = None,
    p_ceiling: float = 1e3,
    rtol: float = 1e-10,
    atol: float = 1e-12,
    stop_residual: float = 0.0,
    n_out: int = 41,
) -> RFFlowResult:
    """Integrate u' = -grad A with adaptive explicit Runge-Kutta stepping.

    The accumulated integral of |u'|^2 is carried as an extra state so the
    energy identity can be checked against the action drop.
    """
    acs = acs or AcsModel()
    ham = ham or MechanicalHamiltonian(model)
    u0 = u0.band_limited()
    w = u0.winding
    n = u0.N

    def split(y):
        return PhaseLoop.from_flat(y[:-1], w)

    def rhs(_s, y):
        u = split(y)
        g = differential(model, k, u, ham)
        sol = _restricted_solve(l2_metric_matrix(model, u, acs), g, n)
        return np.concatenate([-sol, [float(g @ sol)]])

    events = []

    def ev_ceiling(_s, y):
        u = split(y)
        return p_ceiling - float(np.max(np.abs(u.momenta)))

    ev_ceiling.terminal = True
    events.append(ev_ceiling)
    if window is not None:

        def ev_window(_s, y):
            a = action(model, k, split(y), ham)
            return min(a - window[0], window[1] - a)

        ev_window.terminal = True
        events.append(ev_window)
    if stop_residual > 0:

        def ev_conv(_s, y):
            return gradient_norm(model, k, split(y), acs, ham) - stop_residual

        ev_conv.terminal = True
        events.append(ev_conv)

    y0 = np.concatenate([u0.flat(), [0.0]])
    if stop_residual > 0 and gradient_norm(model, k, u0, acs, ham) < stop_residual:
        ts = np.array([0.0])
        ys = y0[:, None]
        status = "stationary"
    else:
        sol = solve_ivp(
            rhs,
            (0.0, s_max),
            y0,
            method="DOP853",
            rtol=rtol,
            atol=atol,
            events=events,
            dense_output=True,
        )
        if sol.status < 0:
            raise NonConvergenceError(sol.message)
        s_end = sol.t[-1]
        ts = np.linspace(0.0, s_end, n_out)
        ys = sol.sol(ts)
        ys[:, -1] = sol.y[:, -1]
        status = "s_max"
        if sol.status == 1:
            hit = [len(e) > 0 for e in sol.t_events]
            status = "ceiling" if hit[0] else ("window" if window is not None and hit[1] else "converged")
    acts, etas, gns, sups = [], [], [], []
    for j in range(ys.shape[1]):
        u = split(ys[:, j])
        acts.append(action(model, k, u, ham))
        etas.append(u.eta)
        gns.append(gradient_norm(model, k, u, acs, ham))
        sups.append(float(np.max(np.abs(u.momenta))))
    acts = np.array(acts)
    res = RFFlowResult(ts, acts, np.array(etas), np.array(gns), np.array(sups), ys[-1], ys, status)
    drop = acts[0] - acts[-1]
    res.monitors = {
        "monotone": bool(np.all(np.diff(acts) <= 1e-9 * max(1.0, np.max(np.abs(acts))))),
        "energy_identity_error": float(abs(drop - ys[-1, -1])),
        "action_drop": float(drop),
    }
    return res


def flow_bound_monitors(model: ManifoldModel, res: RFFlowResult, bound: EtaBound, a: float, b: float, acs=None) -> dict:
    """|eta| <= C0 along the flow and the L2 bound on x' by ||J|| sqrt(b - a)."""
    acs = acs or AcsModel()
    viol = int(np.sum(np.abs(res.etas) > bound.C0))
    n = (res.states.shape[0] - 2) // 4
    jn = 0.0
    for j in range(res.states.shape[1]):
        x = res.states[:-2, j].reshape(n, 4)
        J = acs.J(model, x[:, :2], x[:, 2:])
        G = acs.gram(model, x[:, :2], x[:, 2:])
        jn = max(jn, float(np.max(np.linalg.norm(J, ord=2, axis=(1, 2)))))
        jn = max(jn, float(np.max(np.sqrt(1.0 / np.linalg.eigvalsh(G)[:, 0]))))
    dx = np.diff(res.states[:-2], axis=1)
    ds = np.diff(res.s)
    # squared L2 norm of x' over the run, by the trapezoid-free difference quotient
    xprime_sq = float(np.sum(np.sum(dx**2, axis=0) / np.where(ds > 0, ds, np.inf)) / n)
    b1 = jn * np.sqrt(max(b - a, 0.0))
    return {
        "eta_violations": viol,
        "C0": bound.C0,
        "max_abs_eta": float(np.max(np.abs(res.etas))),
        "xprime_L2": float(np.sqrt(xprime_sq)),
        "b1": float(b1),
        "b1_ok": bool(np.sqrt(xprime_sq) <= b1),
    }


def flow_agreement_check(
    model: ManifoldModel,
    k: float,
    u0: PhaseLoop,
    R: float,
    s_max: float,
    delta: float = 0.25,
    **kw,
) -> dict:
    """Run the flows of H and H_R from u0 and report their sup-distance."""
    base = MechanicalHamiltonian(model)
    trunc = TruncatedHamiltonian(base, R, k, delta)
    r1 = rabinowitz_flow(model, k, u0, s_max, ham=base, **kw)
    r2 = rabinowitz_flow(model, k, u0, s_max, ham=trunc, **kw)
    n = (r1.states.shape[0] - 2) // 4
    hmax = 0.0
    for j in range(r1.states.shape[1]):
        x = r1.states[:-2, j].reshape(n, 4)
        hmax = max(hmax, float(np.max(base.value(x[:, :2], x[:, 2:]))))
    m = min(r1.states.shape[1], r2.states.shape[1])
    dist = float(np.max(np.abs(r1.states[:-1, :m] - r2.states[:-1, :m])))
    if r1.s.shape != r2.s.shape or not np.allclose(r1.s, r2.s):
        dist = max(dist, float("inf"))
    return {
        "sup_distance": dist,
        "sup_H": hmax,
        "threshold": (1 - delta) * R,
        "in_region": hmax < (1 - delta) * R,
    }
