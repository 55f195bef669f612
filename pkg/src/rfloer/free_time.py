"""Free-time action S(q, T) on loops times periods.

The discrete functional is

    S(q, T) = mean_i [ e^{2 phi} |v_i|^2 / (2T) - T U(q_i) + k T + theta(q_i).v_i ] + I(alpha)

with v = dq/dt from the spectral derivative.  Gradients are exact for this
discrete functional; the W^{1,2} gradient solves the Gram system of
:func:`rfloer.loops.w12_matrix` against the Euclidean differential.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
from scipy.integrate import solve_ivp

from .geometry import ManifoldModel, UnboundedPrimitiveError, holonomy_constant
from .loops import (
    DiscreteLoop,
    TangentField,
    band_limit,
    derivative_matrix,
    field_basis,
    w12_matrix,
)


class NonConvergenceError(RuntimeError):
    pass


class CollapseError(RuntimeError):
    """The flow reached T -> 0, a critical point at infinity."""


class DegenerateError(RuntimeError):
    pass


class RefineGridError(RuntimeError):
    pass


@dataclass
class FreeTimeConfig:
    model: ManifoldModel
    k: float
    N: int = 64
    grad_tol: float = 1e-10
    newton_tol: float = 1e-10
    descent_tol: float = 1e-3
    tau_step: float = 0.5
    max_steps: int = 2000
    max_newton: int = 60
    null_tol: float = 1e-7
    t_min: float = 1e-6

    def __post_init__(self):
        umax = float(np.max(self.model.potential(_torus_grid(64))))
        if self.k <= umax:
            warnings.warn(
                f"energy k={self.k} does not exceed max U={umax}; "
                "the level cannot be above the critical value",
                stacklevel=2,
            )


def _torus_grid(n: int) -> np.ndarray:
    s = np.arange(n) / n
    x, y = np.meshgrid(s, s, indexing="ij")
    return np.stack([x.ravel(), y.ravel()], axis=1)


@dataclass
class LagCriticalPoint:
    loop: DiscreteLoop
    T: float
    action: float
    i: int
    i_T: int
    nullity: int
    chi: int
    residual: float
    k: float = 0.0
    eigenvalues: np.ndarray = field(default=None, repr=False)

    def to_record(self) -> dict:
        w = self.loop.winding
        return {
            "class": [w.m1, w.m2],
            "T": self.T,
            "action": self.action,
            "i": self.i,
            "i_T": self.i_T,
            "nullity": self.nullity,
            "chi": self.chi,
            "residual": self.residual,
        }


# --------------------------------------------------------------------------
# pointwise Lagrangian pieces


def _pieces(cfg: FreeTimeConfig, q: DiscreteLoop, T: float):
    m = cfg.model
    x = q.samples
    v = q.velocity()
    w = m.conformal(x)
    vv = np.sum(v * v, axis=1)
    return m, x, v, w, vv


def _flux_term(cfg: FreeTimeConfig, q: DiscreteLoop):
    m = cfg.model
    if not q.winding.trivial and not m.bounded_primitive:
        raise UnboundedPrimitiveError("no bounded primitive for B != 0")
    return holonomy_constant(m, q.winding, q.N)


def action(cfg: FreeTimeConfig, q: DiscreteLoop, T: float) -> float:
    if T <= 0:
        raise ValueError("period must be positive")
    m, x, v, w, vv = _pieces(cfg, q, T)
    th = m.primitive_at(x)
    lag = w * vv / (2 * T) - T * m.potential(x) + cfg.k * T + np.sum(th * v, axis=1)
    return float(np.mean(lag)) + _flux_term(cfg, q)


def dT_action(cfg: FreeTimeConfig, q: DiscreteLoop, T: float) -> float:
    """k minus the mean energy of the reparametrized curve."""
    if T <= 0:
        raise ValueError("period must be positive")
    m, x, v, w, vv = _pieces(cfg, q, T)
    return float(cfg.k - np.mean(w * vv / (2 * T * T) + m.potential(x)))


def differential(cfg: FreeTimeConfig, q: DiscreteLoop, T: float) -> np.ndarray:
    """Euclidean gradient of the discrete S in the variables (q flat, T)."""
    m, x, v, w, vv = _pieces(cfg, q, T)
    n = q.N
    dphi = m.phi.grad(x)
    jth = m.primitive_jac(x)
    lq = (dphi * (w * vv / T)[:, None]) - T * m.U.grad(x) + np.einsum("nij,ni->nj", jth, v)
    lv = (w / T)[:, None] * v + m.primitive_at(x)
    d = derivative_matrix(n)
    gq = (lq + d.T @ lv) / n
    gT = dT_action(cfg, q, T)
    return np.concatenate([gq.ravel(), [gT]])


def hessian(cfg: FreeTimeConfig, q: DiscreteLoop, T: float) -> np.ndarray:
    """Euclidean Hessian of the discrete S, shape (2N+1, 2N+1)."""
    m, x, v, w, vv = _pieces(cfg, q, T)
    n = q.N
    dphi = m.phi.grad(x)
    hphi = m.phi.hess(x)
    hth = m.primitive_hess(x)
    jth = m.primitive_jac(x)
    c = (w * vv / (2 * T))[:, None, None]
    lqq = (
        c * (4 * dphi[:, :, None] * dphi[:, None, :] + 2 * hphi)
        - T * m.U.hess(x)
        + np.einsum("ni,nijl->njl", v, hth)
    )
    lqv = 2 * (w / T)[:, None, None] * dphi[:, :, None] * v[:, None, :] + np.transpose(
        jth, (0, 2, 1)
    )
    lvv = (w / T)[:, None, None] * np.eye(2)
    dk = np.kron(derivative_matrix(n), np.eye(2))
    bqq = sla.block_diag(*lqq)
    bqv = sla.block_diag(*lqv)
    bvv = sla.block_diag(*lvv)
    a = bqv @ dk
    hqq = (bqq + a + a.T + dk.T @ bvv @ dk) / n
    lqT = -dphi * (w * vv / T**2)[:, None] - m.U.grad(x)
    lvT = -(w / T**2)[:, None] * v
    hqT = (lqT.ravel() + dk.T @ lvT.ravel()) / n
    hTT = float(np.mean(w * vv / T**3))
    out = np.empty((2 * n + 1, 2 * n + 1))
    out[:-1, :-1] = 0.5 * (hqq + hqq.T)
    out[:-1, -1] = hqT
    out[-1, :-1] = hqT
    out[-1, -1] = hTT
    return out


def metric_matrix(cfg: FreeTimeConfig, q: DiscreteLoop) -> np.ndarray:
    """Gram matrix of the W^{1,2} metric extended by the period slot."""
    n = q.N
    out = np.zeros((2 * n + 1, 2 * n + 1))
    out[:-1, :-1] = w12_matrix(cfg.model, q)
    out[-1, -1] = 1.0
    return out


def _restricted_solve(cfg: FreeTimeConfig, q: DiscreteLoop, g: np.ndarray) -> np.ndarray:
    """Solve the Gram system on the band-limited subspace; returns a full vector."""
    p = field_basis(q.N, extra=1)
    a = p.T @ metric_matrix(cfg, q) @ p
    return p @ sla.solve(a, p.T @ g, assume_a="pos")


def gradient(cfg: FreeTimeConfig, q: DiscreteLoop, T: float) -> TangentField:
    """W^{1,2} gradient, defined by <<grad, (vt, e)>> = dS(vt, e).

    The identity holds for every band-limited direction vt.
    """
    sol = _restricted_solve(cfg, q, differential(cfg, q, T))
    return TangentField(sol[:-1].reshape(q.N, 2), float(sol[-1]))


def residual(cfg: FreeTimeConfig, q: DiscreteLoop, T: float) -> float:
    g = differential(cfg, q, T)
    sol = _restricted_solve(cfg, q, g)
    return float(np.sqrt(max(g @ sol, 0.0)))


def morse_indices(cfg: FreeTimeConfig, q: DiscreteLoop, T: float, return_eigs: bool = False):
    """Return (i, i_T, nullity) from the W^{1,2}-normalized Hessian spectrum."""
    p = field_basis(q.N, extra=1)
    h = p.T @ hessian(cfg, q, T) @ p
    g = p.T @ metric_matrix(cfg, q) @ p
    lam = sla.eigh(h, g, eigvals_only=True)
    lamT = sla.eigh(h[:-1, :-1], g[:-1, :-1], eigvals_only=True)
    scale = max(np.max(np.abs(lam)), 1.0)
    tol = cfg.null_tol * scale
    for vals in (lam, lamT):
        amb = (np.abs(vals) > tol) & (np.abs(vals) < 10 * tol)
        if np.any(amb):
            raise RefineGridError("eigenvalue too close to the nullity threshold; refine grid")
    i = int(np.sum(lam < -tol))
    i_T = int(np.sum(lamT < -tol))
    nullity = int(np.sum(np.abs(lam) <= tol))
    if return_eigs:
        return i, i_T, nullity, lam
    return i, i_T, nullity


# --------------------------------------------------------------------------
# critical point search


def _unflat(z: np.ndarray, w) -> tuple[DiscreteLoop, float]:
    return DiscreteLoop(z[:-1].reshape(-1, 2), w), float(z[-1])


def _descent_step(cfg, q, T, step):
    s0 = action(cfg, q, T)
    g = differential(cfg, q, T)
    d = -_restricted_solve(cfg, q, g)
    slope = g @ d
    z = np.concatenate([q.samples.ravel(), [T]])
    a = step
    for _ in range(40):
        zn = z + a * d
        if zn[-1] > 0:
            qn, Tn = _unflat(zn, q.winding)
            if action(cfg, qn, Tn) <= s0 + 1e-4 * a * slope:
                return qn, Tn, a
        a *= 0.5
    return q, T, 0.0


def _newton_step(cfg, q, T, r0):
    g = differential(cfg, q, T)
    p = field_basis(q.N, extra=1)
    h = p.T @ hessian(cfg, q, T) @ p
    dz = p @ sla.lstsq(h, -(p.T @ g), cond=1e-13, lapack_driver="gelsd")[0]
    z = np.concatenate([q.samples.ravel(), [T]])
    a = 1.0
    for _ in range(30):
        zn = z + a * dz
        if zn[-1] > 0:
            qn, Tn = _unflat(zn, q.winding)
            rn = residual(cfg, qn, Tn)
            if rn < r0:
                return qn, Tn, rn
        a *= 0.5
    return q, T, r0


def refine(cfg: FreeTimeConfig, q: DiscreteLoop, T: float):
    """Descend to ``descent_tol`` and then run damped Newton to ``grad_tol``.

    Returns the refined (loop, T, residual).
    """
    if q.N != cfg.N:
        cfg = replace(cfg, N=q.N)
    q = band_limit(q)
    r = residual(cfg, q, T)
    steps = 0
    while r > cfg.descent_tol and steps < cfg.max_steps:
        q, T, a = _descent_step(cfg, q, T, cfg.tau_step)
        steps += 1
        if T < cfg.t_min:
            raise CollapseError("flowed to a critical point at infinity (T -> 0)")
        if a == 0.0:
            break
        r = residual(cfg, q, T)
    for _ in range(cfg.max_newton):
        if r < cfg.grad_tol:
            break
        qn, Tn, rn = _newton_step(cfg, q, T, r)
        if rn >= r:
            # Newton stalled: take a descent step and retry
            qn, Tn, a = _descent_step(cfg, q, T, cfg.tau_step)
            if a == 0.0:
                break
            rn = residual(cfg, qn, Tn)
        q, T, r = qn, Tn, rn
        if T < cfg.t_min:
            raise CollapseError("flowed to a critical point at infinity (T -> 0)")
    if r >= cfg.grad_tol:
        raise NonConvergenceError(f"residual {r:.3e} above tolerance {cfg.grad_tol:.1e}")
    return q, T, r


def find_critical(
    cfg: FreeTimeConfig, seed: tuple[DiscreteLoop, float], with_chi: bool = True
) -> LagCriticalPoint:
    """Converge a seed (loop, T) to a critical point and classify it."""
    q, T = seed
    q, T, r = refine(cfg, q, T)
    i, i_T, nul, lam = morse_indices(cfg, q, T, return_eigs=True)
    cp = LagCriticalPoint(q, T, action(cfg, q, T), i, i_T, nul, 0, r, cfg.k, lam)
    if with_chi and nul == 1:
        cp.chi = chi_by_continuation(cfg, cp)
    return cp


def chi_by_continuation(cfg: FreeTimeConfig, cp: LagCriticalPoint, dk0: float | None = None) -> int:
    """sign(-dT_s/ds) from re-solving at energies k +- dk."""
    if cp.nullity != 1:
        raise DegenerateError(f"nullity {cp.nullity}: orbit cylinder not defined")
    dk = dk0 if dk0 is not None else 1e-3 * max(abs(cfg.k), 1e-3)
    signs = []
    for _ in range(12):
        Ts = []
        for s in (+1, -1):
            c2 = replace(cfg, k=cfg.k + s * dk, descent_tol=np.inf)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                _, T2, _ = refine(c2, cp.loop, cp.T)
            Ts.append(T2)
        slope = (Ts[0] - Ts[1]) / (2 * dk)
        signs.append(int(np.sign(-slope)))
        if len(signs) >= 3 and signs[-1] == signs[-2] == signs[-3] != 0:
            return signs[-1]
        dk *= 0.5
    raise DegenerateError("continuation sign did not stabilize")


# --------------------------------------------------------------------------
# negative gradient flow


def superlinear_constants(model: ManifoldModel) -> dict:
    """Constants e1, e2, f1, f2, g1, g2 for the mechanical Lagrangian.

    Norms are taken in the metric.  A nonzero primitive is absorbed with
    the split |theta||v| <= |v|^2 / 4 + |theta|^2.
    """
    umax = model.U.sup_bound()
    emin = float(np.exp(-2 * np.min(model.phi.value(_torus_grid(64)))))
    th = model.primitive_sup() * np.sqrt(emin)
    if th == 0.0:
        e1, e2, f1, f2 = 0.5, umax, 0.5, umax
    else:
        e1, e2, f1, f2 = 0.25, umax + th * th, 0.75, umax + th * th
    return {"e1": e1, "e2": e2, "f1": f1, "f2": f2, "g1": 0.5, "g2": umax}


def h0_constant(model: ManifoldModel, k: float) -> float:
    """h0 with S > h0 T implying dS/dT < 0 on contractible loops."""
    c = superlinear_constants(model)
    g1, g2, f1, f2 = c["g1"], c["g2"], c["f1"], c["f2"]
    return (g1 * f2 / f1 + g2 + (1 + g1 / f1) * k) * f1 / g1


@dataclass
class FlowResult:
    s: np.ndarray
    actions: np.ndarray
    periods: np.ndarray
    residuals: np.ndarray
    loop: DiscreteLoop
    T: float
    status: str
    monitors: dict


def descend_flow(
    cfg: FreeTimeConfig,
    w0: tuple[DiscreteLoop, float],
    tau_max: float,
    stop_residual: float = 1e-8,
    rtol: float = 1e-9,
    atol: float = 1e-11,
    max_step: float = 2.0,
) -> FlowResult:
    """Integrate the W^{1,2} negative gradient flow of S.

    Stops at ``tau_max``, when the residual drops below ``stop_residual``,
    or when T falls below ``cfg.t_min`` (collapse).
    """
    q0, T0 = w0
    q0 = band_limit(q0)
    wnd = q0.winding
    contractible = wnd.trivial
    h0 = h0_constant(cfg.model, cfg.k) if cfg.model.bounded_primitive else np.inf

    def rhs(_s, z):
        if z[-1] <= 0:
            return np.zeros_like(z)
        q, T = _unflat(z, wnd)
        return -_restricted_solve(cfg, q, differential(cfg, q, T))

    def ev_collapse(_s, z):
        return z[-1] - cfg.t_min

    ev_collapse.terminal = True

    def ev_conv(_s, z):
        q, T = _unflat(z, wnd)
        return residual(cfg, q, T) - stop_residual

    ev_conv.terminal = True

    z0 = np.concatenate([q0.samples.ravel(), [T0]])
    r0 = residual(cfg, q0, T0)
    if r0 < stop_residual:
        ss = np.array([0.0])
        zs = z0[:, None]
        status = "stationary"
    else:
        sol = solve_ivp(
            rhs,
            (0.0, tau_max),
            z0,
            method="RK45",
            rtol=rtol,
            atol=atol,
            max_step=max_step,
            events=[ev_collapse, ev_conv],
        )
        ss, zs = sol.t, sol.y
        if sol.status == 1 and len(sol.t_events[0]):
            status = "collapse"
        elif sol.status == 1:
            status = "converged"
        elif sol.status == 0:
            status = "tau_max"
        else:
            raise NonConvergenceError(sol.message)

    acts, Ts, res, dTs, ens = [], [], [], [], []
    for j in range(zs.shape[1]):
        q, T = _unflat(zs[:, j], wnd)
        T = max(T, 1e-300)
        acts.append(action(cfg, q, T))
        Ts.append(T)
        res.append(residual(cfg, q, T))
        dTs.append(-dT_action(cfg, q, T))
        ens.append(float(np.mean(np.sum(q.velocity() ** 2, axis=1))))
    acts = np.array(acts)
    Ts = np.array(Ts)
    dTs = np.array(dTs)
    tol_mono = 1e-9 * max(1.0, np.max(np.abs(acts)))
    monitors = {
        "monotone": bool(np.all(np.diff(acts) <= tol_mono)),
        "h0": h0,
        "h0_lemma_violations": 0,
        "collapse": status == "collapse",
    }
    if contractible and np.isfinite(h0):
        sel = acts > h0 * Ts
        monitors["h0_lemma_violations"] = int(np.sum(sel & (dTs <= 0)))
        h1 = 1.0 / h0
        sbar = acts[0] + 1e-12
        inside = (acts < sbar) & (Ts < h1 * sbar)
        # once inside the sublevel region the forward flow should stay there
        first = int(np.argmax(inside)) if np.any(inside) else len(inside)
        monitors["sublevel_region_stays"] = bool(np.all(inside[first:]))
    if status == "collapse":
        monitors["final_action"] = float(acts[-1])
        monitors["final_T"] = float(Ts[-1])
        monitors["final_energy"] = float(ens[-1])
    q, T = _unflat(zs[:, -1], wnd)
    return FlowResult(ss, acts, Ts, np.array(res), q, T, status, monitors)
