"""Morse-Bott chain complex with cascades for the free-time action.

Each nondegenerate critical circle carries the auxiliary function
f(tau) = cos(2 pi tau) of the time shift tau against its representative, so
it contributes a minimum (tau = 1/2, i_f = 0) and a maximum (tau = 0,
i_f = 1) in degrees i + i_f.  Boundary coefficients count cascades mod 2:
pieces of f-gradient lines on circles joined by negative gradient flow
lines of S between circles.  For the trivial class the generators are the
critical points of a self-indexing Morse function on the torus.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.integrate import solve_ivp

from .free_time import (
    CollapseError,
    DegenerateError,
    FreeTimeConfig,
    LagCriticalPoint,
    NonConvergenceError,
    descend_flow,
    field_basis,
    find_critical,
    hessian,
    metric_matrix,
)
from .geometry import HomotopyClass
from .loops import DiscreteLoop, align_shift


class RefineError(RuntimeError):
    pass


@dataclass
class CriticalCircle:
    """S^1-family of a critical point by time shift."""

    representative: LagCriticalPoint

    @property
    def action(self) -> float:
        return self.representative.action

    @property
    def index(self) -> int:
        return self.representative.i


@dataclass
class Generator:
    name: str
    degree: int
    action: float
    i_f: int
    circle: int | None = None
    phase: float | None = None
    point: tuple | None = None

    def to_record(self) -> dict:
        return {
            "name": self.name,
            "degree": self.degree,
            "action": self.action,
            "i_f": self.i_f,
            "circle": self.circle,
            "phase": self.phase,
            "point": None if self.point is None else list(self.point),
        }


def aux_f(tau):
    return np.cos(2 * np.pi * np.asarray(tau))


def circle_generators(circles: list[CriticalCircle]) -> list[Generator]:
    gens = []
    for j, c in enumerate(circles):
        gens.append(Generator(f"c{j}_min", c.index, c.action, 0, j, 0.5))
        gens.append(Generator(f"c{j}_max", c.index + 1, c.action, 1, j, 0.0))
    return gens


# --------------------------------------------------------------------------
# enumeration


def _class_seeds(alpha: HomotopyClass, n: int, k: float, n_seeds: int):
    m = alpha.vector
    perp = np.array([-m[1], m[0]]) / np.hypot(*m)
    T0 = np.hypot(*m) / np.sqrt(2 * k)
    offs = np.arange(n_seeds) / n_seeds
    # interleave so early seeds already cover the transverse circle
    order = np.argsort([bin(i)[2:].zfill(8)[::-1] for i in range(n_seeds)])
    return [(DiscreteLoop.straight(alpha, n, offs[i] * perp), T0) for i in order]


def same_circle(a: DiscreteLoop, b: DiscreteLoop, tol: float = 1e-3) -> bool:
    return align_shift(a, b)[1] < tol


def enumerate_critical(cfg: FreeTimeConfig, alpha, action_cap: float, n_seeds: int = 16, seeds=None):
    """Multistart search for critical circles of class alpha below the cap.

    Returns (circles, complete) where ``complete`` records that no new
    circle appeared in the second half of the seed budget.
    """
    alpha = HomotopyClass.of(alpha)
    if alpha.trivial and seeds is None:
        seeds = [
            (DiscreteLoop.circle(c, r, cfg.N), 2 * np.pi * r / np.sqrt(2 * cfg.k))
            for r in (0.05, 0.1, 0.2)
            for c in ((0.1, 0.2), (0.6, 0.3))
        ]
    if seeds is None:
        seeds = _class_seeds(alpha, cfg.N, cfg.k, n_seeds)
    circles: list[CriticalCircle] = []
    last_new = -1
    for j, seed in enumerate(seeds):
        try:
            cp = find_critical(cfg, seed, with_chi=False)
        except (CollapseError, NonConvergenceError):
            continue
        if cp.nullity >= 2:
            raise DegenerateError("config not in O_reg: critical point with nullity >= 2")
        if cp.action > action_cap:
            continue
        if any(abs(cp.T - c.representative.T) < 1e-6 and same_circle(cp.loop, c.representative.loop) for c in circles):
            continue
        circles.append(CriticalCircle(cp))
        last_new = j
    circles.sort(key=lambda c: (c.action, c.index))
    complete = last_new < len(seeds) / 2
    return circles, complete


# --------------------------------------------------------------------------
# cascade counting between circles


def unstable_directions(cfg: FreeTimeConfig, cp: LagCriticalPoint) -> np.ndarray:
    """W^{1,2}-normalized negative eigenvectors of the Hessian, shape (i, 2N+1)."""
    q, T = cp.loop, cp.T
    p = field_basis(q.N, extra=1)
    h = p.T @ hessian(cfg, q, T) @ p
    g = p.T @ metric_matrix(cfg, q) @ p
    lam, vec = sla.eigh(h, g)
    return (p @ vec[:, lam < -cfg.null_tol * max(1.0, np.max(np.abs(lam)))]).T


def _shot(cfg, cp, direction, tau, eps, tau_max):
    z = np.concatenate([cp.loop.samples.ravel(), [cp.T]]) + eps * direction
    q = DiscreteLoop(z[:-1].reshape(-1, 2), cp.loop.winding).shifted(tau)
    return descend_flow(cfg, (q, z[-1]), tau_max, stop_residual=1e-7)


def _classify(res, circles: list[CriticalCircle]):
    """(circle index, landing phase) of a flow limit, or (None, None)."""
    if res.status != "converged":
        return None, None
    for j, c in enumerate(circles):
        rep = c.representative
        if abs(res.T - rep.T) > 1e-3:
            continue
        tau, d = align_shift(rep.loop, res.loop)
        if d < 1e-3:
            return j, tau
    return None, None


def _fan_phases(n_fan: int) -> np.ndarray:
    """Phases covering the circle minus the minimum tau = 1/2, ordered from 1/2+ to 3/2-."""
    return 0.5 + (np.arange(n_fan) + 0.5) / n_fan


def _count_hits(landings: np.ndarray, target: float) -> int:
    """Number of times the unwrapped landing curve passes through target mod 1."""
    un = np.unwrap(2 * np.pi * (landings - target)) / (2 * np.pi)
    return int(sum(abs(np.floor(un[i + 1]) - np.floor(un[i])) for i in range(len(un) - 1)))


def _cascade_count(cfg, circles, gm: Generator, gp: Generator, n_fan: int, eps: float, tau_max: float) -> tuple[int, dict]:
    src = circles[gm.circle].representative
    dirs = unstable_directions(cfg, src)
    if dirs.shape[0] != 1:
        raise RefineError("cascade counting implemented for index-1 sources")
    phases = np.array([gm.phase]) if gm.i_f == 0 else _fan_phases(n_fan)
    count = 0
    detail = {"phases": phases.tolist(), "landings": {}}
    for sgn in (1.0, -1.0):
        lands = []
        for tau in phases:
            res = _shot(cfg, src, sgn * dirs[0], tau, eps, tau_max)
            j, tl = _classify(res, circles)
            lands.append(np.nan if j != gp.circle else tl)
        lands = np.array(lands)
        detail["landings"][str(int(sgn))] = lands.tolist()
        if gp.i_f == 0:
            # stable set of the minimum of f is the circle minus its maximum
            ok = ~np.isnan(lands)
            count += int(np.sum(ok & (np.abs(np.angle(np.exp(2j * np.pi * np.nan_to_num(lands)))) > 1e-6)))
        else:
            if np.any(np.isnan(lands)):
                # the fan must reach the target circle along its whole length
                # for the crossing count to be meaningful
                raise RefineError("fan partially leaves the target circle")
            count += _count_hits(lands, gp.phase)
    return count, detail


def cascade_connections(
    cfg: FreeTimeConfig,
    circles: list[CriticalCircle],
    gm: Generator,
    gp: Generator,
    n_fan: int = 8,
    eps: float = 1e-3,
    tau_max: float = 400.0,
    check_doubling: bool = True,
) -> tuple[int, dict]:
    """Count of cascades from gm to gp mod 2, with the raw count in the details."""
    if gm is gp or gm.name == gp.name:
        return 0, {"reason": "equal generators"}
    if gm.degree - gp.degree != 1:
        raise ValueError("degree difference must be 1")
    if gm.action < gp.action - 1e-12:
        return 0, {"reason": "action increases"}
    if gm.circle == gp.circle:
        # f-gradient lines from the maximum to the minimum of cos(2 pi tau)
        return 0, {"raw": _circle_lines(), "reason": "same circle"}
    raw, det = _cascade_count(cfg, circles, gm, gp, n_fan, eps, tau_max)
    det["raw"] = raw
    if check_doubling and gm.i_f == 1:
        raw2, det2 = _cascade_count(cfg, circles, gm, gp, 2 * n_fan, eps, tau_max)
        det["raw_doubled"] = raw2
        if raw2 % 2 != raw % 2:
            raise RefineError("count changed under fan doubling")
    return raw % 2, det


def _circle_lines() -> int:
    """Number of -grad f lines from tau = 0 to tau = 1/2 on the circle."""
    n = 0
    for start in (1e-3, -1e-3):
        sol = solve_ivp(lambda _s, t: [2 * np.pi * np.sin(2 * np.pi * t[0])], (0, 10), [start], rtol=1e-10)
        if abs(abs(sol.y[0, -1]) - 0.5) < 1e-6:
            n += 1
    return n


# --------------------------------------------------------------------------
# the trivial class: critical points at infinity


def torus_morse(q):
    q = np.asarray(q, dtype=float)
    return 0.5 * (2 - np.cos(2 * np.pi * q[..., 0]) - np.cos(2 * np.pi * q[..., 1]))


def torus_morse_grad(q):
    q = np.asarray(q, dtype=float)
    return np.pi * np.sin(2 * np.pi * q)


TORUS_CRITICAL = [((0.0, 0.0), 0), ((0.5, 0.0), 1), ((0.0, 0.5), 1), ((0.5, 0.5), 2)]


def infinity_generators() -> list[Generator]:
    return [Generator(f"inf{j}", d, 0.0, d, None, None, p) for j, (p, d) in enumerate(TORUS_CRITICAL)]


def _torus_flow(q0, t_max=20.0):
    sol = solve_ivp(lambda _t, q: -torus_morse_grad(q), (0, t_max), q0, rtol=1e-10, atol=1e-12, dense_output=True)
    ts = np.linspace(0, t_max, 2001)
    return sol.sol(ts).T


def _torus_dist(path, p):
    d = path - np.asarray(p)[None, :]
    d -= np.round(d)
    return np.sqrt(np.sum(d * d, axis=1))


def torus_connections(gm: Generator, gp: Generator, n_fan: int = 16, delta: float = 1e-3) -> int:
    """Rigid -grad flow lines from gm to gp on the torus, counted by a fan."""
    if gm.degree - gp.degree != 1:
        raise ValueError("degree difference must be 1")
    src = np.asarray(gm.point)
    tgt = np.asarray(gp.point)
    hess = np.diag(2 * np.pi**2 * np.cos(2 * np.pi * src))
    lam, vec = np.linalg.eigh(hess)
    unst = vec[:, lam < 0]
    if unst.shape[1] == 1:
        n = 0
        for s in (1.0, -1.0):
            path = _torus_flow(src + s * delta * unst[:, 0])
            if _torus_dist(path[-1:], tgt)[0] < 1e-4:
                n += 1
        return n
    # two-dimensional unstable set: count sign changes of the side function
    # at the target saddle along a fan of rays
    th = lambda a: np.array([np.cos(a), np.sin(a)])
    hess_t = np.diag(2 * np.pi**2 * np.cos(2 * np.pi * tgt))
    lt, vt = np.linalg.eigh(hess_t)
    u_t = vt[:, np.argmin(lt)]
    angles = 2 * np.pi * (np.arange(n_fan) + 0.25) / n_fan
    near, side = [], []
    for a in angles:
        path = _torus_flow(src + delta * th(a))
        d = _torus_dist(path, tgt)
        j = int(np.argmin(d))
        rel = path[j] - tgt
        rel -= np.round(rel)
        near.append(d[j] < 0.25)
        side.append(np.sign(rel @ u_t))
    n = 0
    for j in range(n_fan):
        k = (j + 1) % n_fan
        if near[j] and near[k] and side[j] != side[k]:
            n += 1
    return n


# --------------------------------------------------------------------------
# assembled complex


def rank_mod2(m: np.ndarray) -> int:
    a = (np.asarray(m, dtype=np.int64) % 2).astype(np.uint8)
    rows, cols = a.shape
    r = 0
    for c in range(cols):
        piv = next((i for i in range(r, rows) if a[i, c]), None)
        if piv is None:
            continue
        a[[r, piv]] = a[[piv, r]]
        for i in range(rows):
            if i != r and a[i, c]:
                a[i] ^= a[r]
        r += 1
        if r == rows:
            break
    return r


@dataclass
class ChainComplexData:
    generators: list
    boundary: np.ndarray
    alpha: HomotopyClass
    action_cap: float
    complete: bool
    raw_counts: dict = field(default_factory=dict)

    def degrees(self) -> np.ndarray:
        return np.array([g.degree for g in self.generators], dtype=int)

    def d_squared(self) -> np.ndarray:
        return (self.boundary @ self.boundary) % 2

    def betti(self, max_degree: int = 2) -> list[int]:
        deg = self.degrees()
        out = []
        for d in range(max_degree + 1):
            cd = np.nonzero(deg == d)[0]
            lo = np.nonzero(deg == d - 1)[0]
            hi = np.nonzero(deg == d + 1)[0]
            r_out = rank_mod2(self.boundary[np.ix_(lo, cd)]) if len(lo) and len(cd) else 0
            r_in = rank_mod2(self.boundary[np.ix_(cd, hi)]) if len(hi) and len(cd) else 0
            out.append(int(len(cd) - r_out - r_in))
        return out

    def to_record(self) -> dict:
        trip = [[int(i), int(j), int(self.boundary[i, j])] for i, j in zip(*np.nonzero(self.boundary))]
        return {
            "class": [self.alpha.m1, self.alpha.m2],
            "generators": [g.to_record() for g in self.generators],
            "boundary": trip,
            "betti": self.betti(),
            "window": {"action_cap": self.action_cap, "complete": self.complete},
            "raw_counts": self.raw_counts,
        }


def build_complex(cfg: FreeTimeConfig, alpha, action_cap: float, n_fan: int = 8, n_seeds: int = 16, **kw) -> ChainComplexData:
    """Generators and mod-2 boundary matrix; entry [i, j] is the coefficient of g_i in d g_j."""
    alpha = HomotopyClass.of(alpha)
    if alpha.trivial:
        circles, complete = enumerate_critical(cfg, alpha, action_cap)
        gens = infinity_generators() + circle_generators(circles)
    else:
        circles, complete = enumerate_critical(cfg, alpha, action_cap, n_seeds)
        gens = circle_generators(circles)
    n = len(gens)
    bd = np.zeros((n, n), dtype=np.int64)
    raw = {}
    for j, gm in enumerate(gens):
        for i, gp in enumerate(gens):
            if gm.degree - gp.degree != 1:
                continue
            if gm.point is not None and gp.point is not None:
                c = torus_connections(gm, gp)
                raw[f"{gm.name}->{gp.name}"] = c
                bd[i, j] = c % 2
            elif gm.circle is not None and gp.circle is not None:
                c, det = cascade_connections(cfg, circles, gm, gp, n_fan, **kw)
                raw[f"{gm.name}->{gp.name}"] = det.get("raw")
                bd[i, j] = c
            else:
                # cascades from circles to points at infinity need the collapse
                # set; not needed when circle actions lie above the window
                raise RefineError("mixed circle/infinity pairs are outside the supported window")
    return ChainComplexData(gens, bd, alpha, action_cap, complete, raw)


def homology(cfg: FreeTimeConfig, alpha, action_cap: float, **kw) -> tuple[list[int], ChainComplexData]:
    cx = build_complex(cfg, alpha, action_cap, **kw)
    if not cx.generators:
        return [0, 0, 0], cx
    return cx.betti(), cx
