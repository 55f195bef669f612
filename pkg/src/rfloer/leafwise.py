"""Moser pairs, the perturbed Rabinowitz action and leaf-wise intersections.

A Moser pair is G(t, x) = chi(t) G0(x) with G0 = beta(H - k), together with
a time-dependent perturbation F that vanishes for t in [0, 1/2].  Critical
points (x, eta) of

    A^F(x, eta) = int x*lambda + I - eta int chi G0(x) dt - int F(t, x) dt

solve xdot = eta chi X_G0(x) + X_F(t, x) with int chi G0(x) = 0.  Since F is
off while chi is on, G0 is constant on [0, 1/2], so the constraint places
x(0) on the level H = k.  The point y = x(1/2) then satisfies
psi(y) in the H-leaf through y, with psi the time-one map of F.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import rfft
from scipy.integrate import quad, solve_ivp
from scipy.optimize import least_squares, minimize_scalar

from .free_time import NonConvergenceError
from .geometry import ManifoldModel, holonomy_constant
from .loops import DiscreteLoop, derivative_matrix
from .rabinowitz import MechanicalHamiltonian, PhaseLoop, _smoothstep, hamiltonian_vf

_R = np.array([[0.0, 1.0], [-1.0, 0.0]])


def _bump(t, a, b):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = (t > a) & (t < b)
    ti = t[inside]
    out[inside] = np.exp(-1.0 / ((ti - a) * (b - ti)) + 4.0 / (b - a) ** 2)
    return out


@dataclass
class ChiProfile:
    """Smooth bump on [a, b] inside (0, 1/2) with unit integral."""

    a: float = 0.05
    b: float = 0.45

    def __post_init__(self):
        if not 0 < self.a < self.b < 0.5:
            raise ValueError("chi must be supported inside (0, 1/2)")
        self.norm = quad(lambda t: float(_bump(np.array([t]), self.a, self.b)[0]), self.a, self.b, epsabs=1e-14, epsrel=1e-13, limit=200)[0]

    def value(self, t):
        return _bump(t, self.a, self.b) / self.norm

    def integral(self) -> float:
        return quad(lambda t: float(self.value(np.array([t]))[0]), 0.0, 1.0, points=[self.a, self.b], epsabs=1e-14, epsrel=1e-13, limit=200)[0]

    def cumulative(self, t) -> np.ndarray:
        """int_0^t chi, used to reparametrize loops into the chi-window."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty_like(t)
        for i, ti in enumerate(t):
            if ti <= self.a:
                out[i] = 0.0
            elif ti >= self.b:
                out[i] = 1.0
            else:
                out[i] = quad(lambda s: float(self.value(np.array([s]))[0]), self.a, ti, epsabs=1e-14, epsrel=1e-13, limit=200)[0]
        return out


class BetaProfile:
    """beta(r) = r on |r| <= w, beta' falls smoothly to 0 on w <= |r| <= 2w."""

    def __init__(self, w: float = 0.1):
        self.w = float(w)
        self._nodes, self._weights = np.polynomial.legendre.leggauss(48)

    def deriv(self, r):
        r = np.abs(np.asarray(r, dtype=float))
        return 1.0 - _smoothstep((r - self.w) / self.w)

    def value(self, r):
        r = np.asarray(r, dtype=float)
        a = np.abs(r)
        out = np.where(a <= self.w, a, 0.0)
        big = a > self.w
        if np.any(big):
            hi = np.minimum(a[big], 2 * self.w)
            mid = (hi + self.w) / 2
            half = (hi - self.w) / 2
            xs = mid[:, None] + half[:, None] * self._nodes[None, :]
            out[big] = self.w + half * (self.deriv(xs) @ self._weights)
        return np.sign(r) * out


@dataclass
class FBump:
    """F(t, x) = amp * tau(t) * b(x) with compact support in time and momentum.

    ``radius`` is a scalar or one scale per coordinate (q_x, q_y, p_x, p_y);
    an infinite (or None) scale drops that coordinate, which is allowed for q since
    the torus is compact.
    """

    amp: float
    center: np.ndarray
    radius: float | list
    t_window: tuple = (0.55, 0.95)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        r = [np.inf if v is None else v for v in np.atleast_1d(np.asarray(self.radius, dtype=object))]
        self.scales = np.broadcast_to(np.asarray(r, dtype=float), (4,)).copy()
        if not np.all(np.isfinite(self.scales[2:])):
            raise ValueError("F needs compact support in the momentum directions")
        lo, hi = self.t_window
        if not 0.5 <= lo < hi <= 1.0:
            raise ValueError("F must vanish for t in [0, 1/2]")
        self._tnorm = quad(lambda s: float(_bump(np.array([s]), lo, hi)[0]), lo, hi, epsabs=1e-15)[0]

    def _rel(self, x):
        d = np.asarray(x, dtype=float) - self.center
        d[..., :2] -= np.round(d[..., :2])
        return d

    def time_factor(self, t):
        return _bump(np.atleast_1d(t), *self.t_window) / self._tnorm

    def space(self, x):
        d = self._rel(x) / self.scales
        r2 = np.sum(d * d, axis=-1)
        out = np.zeros_like(r2)
        inside = r2 < 1
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - r2[inside]))
        return out

    def space_grad(self, x):
        d = self._rel(x) / self.scales
        r2 = np.sum(d * d, axis=-1)
        g = np.zeros_like(d)
        inside = r2 < 1
        b = np.exp(1.0 - 1.0 / (1.0 - r2[inside]))
        coef = -b / (1.0 - r2[inside]) ** 2 * 2.0
        g[inside] = coef[..., None] * d[inside]
        return g / self.scales

    def value(self, t, x):
        return self.amp * float(self.time_factor(t)[0]) * self.space(x)

    def grad(self, t, x):
        return self.amp * float(self.time_factor(t)[0]) * self.space_grad(x)

    def to_dict(self) -> dict:
        r = float(self.scales[0]) if np.isscalar(self.radius) else [None if np.isinf(v) else float(v) for v in self.scales]
        return {"amp": self.amp, "center": self.center.tolist(), "radius": r, "t_window": list(self.t_window)}


@dataclass
class MoserPair:
    model: ManifoldModel
    k: float
    chi: ChiProfile
    beta: BetaProfile
    F: list = field(default_factory=list)

    def G0(self, x):
        h = MechanicalHamiltonian(self.model).value(x[..., :2], x[..., 2:])
        return self.beta.value(h - self.k)

    def X_G0(self, x):
        h = MechanicalHamiltonian(self.model).value(x[..., :2], x[..., 2:])
        qd, pd = hamiltonian_vf(self.model, x[..., :2], x[..., 2:])
        f = self.beta.deriv(h - self.k)
        return np.concatenate([qd, pd], axis=-1) * np.asarray(f)[..., None]

    def F_value(self, t, x):
        return sum((b.value(t, x) for b in self.F), np.zeros(np.shape(x)[:-1]))

    def F_grad(self, t, x):
        return sum((b.grad(t, x) for b in self.F), np.zeros(np.shape(x)))

    def X_F(self, t, x):
        g = self.F_grad(t, x)
        gq, gp = g[..., :2], g[..., 2:]
        s = self.model.sigma_density(x[..., :2])
        pd = -gq + s[..., None] * (gp @ _R.T)
        return np.concatenate([gp, pd], axis=-1)

    def spec_hash(self) -> str:
        blob = json.dumps([b.to_dict() for b in self.F], sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def build_moser_pair(model: ManifoldModel, k: float, F_spec=None, chi=None, beta_width: float = 0.1, samples=None) -> MoserPair:
    """Assemble (G, F) and check the defining properties on sample points.

    ``samples`` are phase points (..., 4) where the pair will be used; their
    |H - k| must stay inside the linear window of beta.
    """
    chi = chi or ChiProfile()
    beta = BetaProfile(beta_width)
    bumps = [b if isinstance(b, FBump) else FBump(**b) for b in (F_spec or [])]
    pair = MoserPair(model, k, chi, beta, bumps)
    if abs(chi.integral() - 1.0) > 1e-12:
        raise ValueError("chi does not integrate to one")
    if samples is not None:
        x = np.asarray(samples, dtype=float)
        h = MechanicalHamiltonian(model).value(x[..., :2], x[..., 2:])
        if np.max(np.abs(h - k)) >= beta.w:
            raise ValueError("beta window collides with the sampled |H - k|")
    return pair


def check_pair_on_level(pair: MoserPair, points) -> dict:
    """X_G0 against X_H and G0 on level points."""
    x = np.asarray(points, dtype=float)
    qd, pd = hamiltonian_vf(pair.model, x[..., :2], x[..., 2:])
    xh = np.concatenate([qd, pd], axis=-1)
    return {
        "vf_error": float(np.max(np.abs(pair.X_G0(x) - xh))),
        "G0_max": float(np.max(np.abs(pair.G0(x)))),
    }


def level_points(model: ManifoldModel, k: float, n: int = 64, rng=None) -> np.ndarray:
    rng = rng or np.random.default_rng(0)
    q = rng.random((n, 2))
    a = rng.random(n) * 2 * np.pi
    r = np.sqrt(2 * (k - model.potential(q)) * model.conformal(q))
    return np.column_stack([q, r * np.cos(a), r * np.sin(a)])


# --------------------------------------------------------------------------
# perturbed action on discrete phase loops


def perturbed_action(model: ManifoldModel, k: float, pair: MoserPair, u: PhaseLoop) -> float:
    q = u.base.samples
    v = u.base.velocity()
    t = u.base.t
    x = np.concatenate([q, u.momenta], axis=1)
    lam = np.sum((u.momenta + model.primitive_at(q)) * v, axis=1)
    flux = holonomy_constant(model, u.winding, u.N)
    g = pair.chi.value(t) * pair.G0(x)
    f = np.array([pair.F_value(ti, xi[None, :])[0] for ti, xi in zip(t, x)])
    return float(np.mean(lam - u.eta * g - f)) + flux


def perturbed_differential(model: ManifoldModel, k: float, pair: MoserPair, u: PhaseLoop) -> np.ndarray:
    """Euclidean gradient of the discrete perturbed action."""
    n = u.N
    q = u.base.samples
    p = u.momenta
    t = u.base.t
    x = np.concatenate([q, p], axis=1)
    v = u.base.velocity()
    ham = MechanicalHamiltonian(model)
    hq, hp = ham.grad(q, p)
    bd = pair.beta.deriv(ham.value(q, p) - k)
    c = pair.chi.value(t)
    fg = np.array([pair.F_grad(ti, xi[None, :])[0] for ti, xi in zip(t, x)])
    jth = model.primitive_jac(q)
    big_p = p + model.primitive_at(q)
    d = derivative_matrix(n)
    w = u.eta * c * bd
    gq = (np.einsum("nij,ni->nj", jth, v) - w[:, None] * hq + d.T @ big_p - fg[:, :2]) / n
    gp = (v - w[:, None] * hp - fg[:, 2:]) / n
    ge = -float(np.mean(c * pair.G0(x)))
    return np.concatenate([np.concatenate([gq, gp], axis=1).ravel(), [ge]])


def reparametrize_into_window(u: PhaseLoop, chi: ChiProfile, n: int) -> PhaseLoop:
    """x(X(t)) with X = int_0^t chi, so the loop runs only while chi is on.

    The new loop solves xdot = eta chi X_H when u solves xdot = eta X_H.
    """
    tt = np.arange(n) / n
    s = chi.cumulative(tt)
    per = np.concatenate([u.base.periodic_part(), u.momenta], axis=1)
    coef = rfft(per, axis=0) / u.N
    kk = np.arange(coef.shape[0])
    ph = np.exp(2j * np.pi * np.outer(s, kk))
    wts = np.full(coef.shape[0], 2.0)
    wts[0] = 1.0
    if u.N % 2 == 0:
        wts[-1] = 0.0
    vals = np.real(ph @ (coef * wts[:, None]))
    q = vals[:, :2] + s[:, None] * u.winding.vector[None, :]
    return PhaseLoop(DiscreteLoop(q, u.winding), vals[:, 2:], u.eta)


# --------------------------------------------------------------------------
# shooting for critical points


@dataclass
class LeafwiseResult:
    x0: np.ndarray
    eta: float
    y: np.ndarray
    psi_y: np.ndarray
    verification_distance: float
    leaf_time: float
    periodicity_error: float
    energy_defect: float
    converged: bool
    F_hash: str

    def to_record(self) -> dict:
        return {
            "eta": self.eta,
            "junction_point": [float(v) for v in self.y],
            "psi_of_junction": [float(v) for v in self.psi_y],
            "verification_distance": self.verification_distance,
            "leaf_time": self.leaf_time,
            "periodicity_error": self.periodicity_error,
            "energy_defect": self.energy_defect,
            "converged": self.converged,
            "F_spec_hash": self.F_hash,
            "displacement": self.displacement,
        }

    @property
    def displacement(self) -> float:
        """|psi(y) - y| modulo lattice; zero means the witness is trivial."""
        return _torus_dist(self.psi_y, self.y)


_TOL = dict(method="DOP853", rtol=1e-12, atol=1e-13)


def _first_half(pair: MoserPair, x0, eta, dense=False):
    def rhs(t, x):
        c = float(pair.chi.value(np.array([t]))[0])
        return eta * c * pair.X_G0(x[None, :])[0]

    return solve_ivp(rhs, (0.0, 0.5), x0, dense_output=dense, **_TOL)


def psi_map(pair: MoserPair, y) -> np.ndarray:
    """Time-one map of F, i.e. the flow of X_F over its active half."""
    if not pair.F:
        return np.asarray(y, dtype=float).copy()
    sol = solve_ivp(lambda t, x: pair.X_F(t, x[None, :])[0], (0.5, 1.0), y, **_TOL)
    return sol.y[:, -1]


def _shoot(pair: MoserPair, x0, eta):
    y = _first_half(pair, x0, eta).y[:, -1]
    return y, psi_map(pair, y)


def flow_H(model: ManifoldModel, y, t: float) -> np.ndarray:
    if t == 0:
        return np.asarray(y, dtype=float).copy()

    def rhs(_s, x):
        qd, pd = hamiltonian_vf(model, x[:2], x[2:])
        return np.concatenate([qd, pd])

    return solve_ivp(rhs, (0.0, t), y, **_TOL).y[:, -1]


def _torus_dist(a, b):
    d = np.asarray(a, float) - np.asarray(b, float)
    d[:2] -= np.round(d[:2])
    return float(np.linalg.norm(d))


def verify_leafwise(model: ManifoldModel, y, psi_y, eta: float, window: float = 0.05) -> tuple[float, float]:
    """min over t near -eta of the distance from phi_t^H(y) to psi(y)."""
    res = minimize_scalar(
        lambda t: _torus_dist(flow_H(model, y, t), psi_y),
        bounds=(-eta - window, -eta + window),
        method="bounded",
        options={"xatol": 1e-12},
    )
    return float(res.fun), float(res.x)


def _gauss_newton(resid, z, tol: float, max_iter: int = 30, h: float = 1e-7):
    """Minimum-norm Gauss-Newton with a central-difference Jacobian.

    The shooting system has a zero row whenever a momentum is conserved and
    a null column along a symmetry; MINPACK's scaled LM can stall there,
    while the minimum-norm step simply ignores both.
    """
    r = resid(z)
    for _ in range(max_iter):
        if np.max(np.abs(r)) < 0.1 * tol:
            break
        jac = np.empty((r.size, z.size))
        for i in range(z.size):
            e = np.zeros_like(z)
            e[i] = h
            jac[:, i] = (resid(z + e) - resid(z - e)) / (2 * h)
        dz = np.linalg.lstsq(jac, -r, rcond=1e-12)[0]
        step = 1.0
        while step > 1e-4:
            r_new = resid(z + step * dz)
            if np.linalg.norm(r_new) < np.linalg.norm(r):
                break
            step *= 0.5
        else:
            break
        z, r = z + step * dz, r_new
    return z


def find_leafwise(model: ManifoldModel, k: float, pair: MoserPair, seed: PhaseLoop | tuple, tol: float = 1e-10) -> LeafwiseResult:
    """Solve x(1) = x(0) + class shift and G0(x(0)) = 0 for (x(0), eta)."""
    if isinstance(seed, PhaseLoop):
        x0 = np.concatenate([seed.base.samples[0], seed.momenta[0]])
        eta0 = seed.eta
        shift = np.concatenate([seed.winding.vector, [0.0, 0.0]])
    else:
        x0, eta0, w = seed
        x0 = np.asarray(x0, dtype=float)
        shift = np.concatenate([np.asarray(w, dtype=float), [0.0, 0.0]])

    def resid(z):
        y, px = _shoot(pair, z[:4], z[4])
        return np.concatenate([px - z[:4] - shift, [float(pair.G0(z[None, :4])[0])]])

    sol = least_squares(resid, np.concatenate([x0, [eta0]]), xtol=1e-15, ftol=1e-15, gtol=1e-15, method="lm")
    z = _gauss_newton(resid, sol.x, tol)
    r = resid(z)
    converged = float(np.max(np.abs(r))) < tol
    if not converged:
        raise NonConvergenceError(f"shooting residual {np.max(np.abs(r)):.3e}")
    eta = float(z[4])
    y, psi_y = _shoot(pair, z[:4], eta)
    half = _first_half(pair, z[:4], eta, dense=True)
    ts = np.linspace(0, 0.5, 201)
    xs = half.sol(ts).T
    hvals = MechanicalHamiltonian(model).value(xs[:, :2], xs[:, 2:])
    dist, tl = verify_leafwise(model, y, psi_y, eta)
    return LeafwiseResult(
        z[:4], eta, y, psi_y, dist, tl,
        float(np.max(np.abs(r[:4]))), float(np.max(np.abs(hvals - k))), converged, pair.spec_hash(),
    )


def search_leafwise(model: ManifoldModel, k: float, pair: MoserPair, orbit: PhaseLoop, n_starts: int = 8, tol: float = 1e-10):
    """Multi-start ``find_leafwise`` from evenly spaced points of a closed orbit.

    Returns the first converged result with a nonzero displacement, else the
    first converged result, else raises ``NonConvergenceError``.
    """
    x = np.concatenate([orbit.base.samples, orbit.momenta], axis=1)
    w = orbit.winding.vector
    first = None
    last_err = None
    for j in np.linspace(0, len(x), n_starts, endpoint=False).astype(int):
        try:
            r = find_leafwise(model, k, pair, (x[j], orbit.eta, w), tol=tol)
        except NonConvergenceError as e:
            last_err = e
            continue
        if r.displacement > 1e-8 or not pair.F:
            return r
        first = first or r
    if first is not None:
        return first
    raise NonConvergenceError(f"no start converged ({last_err})")
