"""Brackets for the energy values e0, c and c0 of a magnetic torus model.

Upper bounds come from explicit primitives theta' = theta_ex + df + h:
any such gauge gives c <= sup_q (|theta'_q|^2_g / 2 + U(q)).  Lower bounds
come from loops of negative free-time action: if S_{L+k}(q, T) < 0 for some
loop and period then k < c.  For a fixed loop the period is optimized in
closed form, since S = E / (2T) + T (k - mean U) + flux with E the mean of
|qdot|^2_g.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .geometry import FourierField, ManifoldModel, cap_flux
from .loops import DiscreteLoop, loop_energy, resample


def _grid(n: int) -> np.ndarray:
    s = np.arange(n) / n
    x, y = np.meshgrid(s, s, indexing="ij")
    return np.stack([x.ravel(), y.ravel()], axis=1)


def _refined_max(func, n_grid: int = 48, n_starts: int = 3) -> tuple[float, np.ndarray]:
    """Grid maximum of a periodic function polished by local BFGS runs."""
    pts = _grid(n_grid)
    vals = func(pts)
    order = np.argsort(vals)[::-1][:n_starts]
    best = float(vals[order[0]])
    arg = pts[order[0]]
    for i in order:
        res = minimize(lambda z: -float(func(z[None, :])[0]), pts[i], method="BFGS", options={"gtol": 1e-12})
        if -res.fun > best:
            best = float(-res.fun)
            arg = np.mod(res.x, 1.0)
    return best, arg


def e0(model: ManifoldModel) -> float:
    """max U: the least k whose energy level projects onto the whole torus."""
    if model.U.is_zero:
        return 0.0
    return _refined_max(model.potential, 64, 4)[0]


# --------------------------------------------------------------------------
# gauge family and upper bounds


def _modes(kmax: int) -> np.ndarray:
    out = []
    for kx in range(0, kmax + 1):
        for ky in range(-kmax, kmax + 1):
            if kx == 0 and ky <= 0:
                continue
            out.append((kx, ky))
    return np.array(out, dtype=float)


@dataclass
class GaugeFamily:
    """theta' = theta_ex + df + h with f a Fourier table and h a constant covector."""

    model: ManifoldModel
    kmax: int = 2
    params: np.ndarray | None = None

    def __post_init__(self):
        self.modes = _modes(self.kmax)
        if self.params is None:
            self.params = np.zeros(self.size)

    @property
    def size(self) -> int:
        return 2 * len(self.modes) + 2

    def f(self, params=None) -> FourierField:
        p = self.params if params is None else params
        nm = len(self.modes)
        return FourierField(np.column_stack([self.modes, p[:nm], p[nm : 2 * nm]]))

    def h(self, params=None) -> np.ndarray:
        p = self.params if params is None else params
        return p[-2:]

    def primitive(self, q, params=None):
        th = self.model.primitive_at(q)
        return th + self.f(params).grad(q) + self.h(params)

    def hamiltonian_on_graph(self, q, params=None):
        th = self.primitive(q, params)
        return 0.5 * np.sum(th * th, axis=-1) / self.model.conformal(q) + self.model.potential(q)

    def sup_value(self, params=None) -> float:
        return _refined_max(lambda q: self.hamiltonian_on_graph(q, params))[0]

    def transported(self, s: float) -> "GaugeFamily":
        """The same gauge for the scaled model (s sigma, s^2 U)."""
        return GaugeFamily(self.model.scaled(s), self.kmax, s * self.params)

    def table(self) -> dict:
        return {"f": self.f().tolist(), "h": [float(v) for v in self.h()]}


def c_upper(model: ManifoldModel, budget: int = 60, rng: np.random.Generator | None = None, kmax: int = 2):
    """Upper bound for c by coordinate-wise adaptive random search over gauges.

    Returns (value, GaugeFamily); (inf, None) if B != 0.
    """
    if not model.bounded_primitive:
        return np.inf, None
    rng = rng or np.random.default_rng(0)
    fam = GaugeFamily(model, kmax)
    best = fam.sup_value()
    steps = np.full(fam.size, 0.05)
    for it in range(budget):
        j = int(rng.integers(fam.size))
        sgn = 1.0 if rng.random() < 0.5 else -1.0
        improved = False
        for direction in (sgn, -sgn):
            trial = fam.params.copy()
            trial[j] += direction * steps[j]
            val = fam.sup_value(trial)
            if val < best:
                best = val
                fam.params = trial
                steps[j] *= 1.5
                improved = True
                break
        if not improved:
            steps[j] *= 0.5
    return float(best), fam


# --------------------------------------------------------------------------
# negative-action witnesses and lower bounds


@dataclass
class Witness:
    k: float
    loop: DiscreteLoop
    T: float
    action: float


@dataclass
class LoopStats:
    """k-independent pieces of the free-time action of one loop."""

    loop: DiscreteLoop
    E: float
    ubar: float
    flux: float

    @classmethod
    def of(cls, model: ManifoldModel, q: DiscreteLoop) -> "LoopStats":
        E, _ = loop_energy(model, q)
        return cls(q, E, float(np.mean(model.potential(q.samples))), cap_flux(model, q))

    def action(self, k: float, T: float) -> float:
        return self.E / (2 * T) + T * (k - self.ubar) + self.flux


def min_action_over_T(model: ManifoldModel, q, k: float):
    """(inf_T S_{L+k}(q, T), a period with negative action when the inf is negative)."""
    st = q if isinstance(q, LoopStats) else LoopStats.of(model, q)
    E, flux = st.E, st.flux
    a = k - st.ubar
    if a > 0 and E > 0:
        T = np.sqrt(E / (2 * a))
        return 2 * np.sqrt(E * a / 2) + flux, float(T)
    if a > 0:
        return min(flux, 0.0), 0.0
    if a < 0:
        if E == 0:
            return a, 1.0
        T = max(1.0, 2 * (E / 2 + abs(flux) + 1) / abs(a))
        return st.action(k, T), float(T)
    return flux, np.inf


def _grid_size_for(model: ManifoldModel, radius: float) -> int:
    kmax = 1.0
    for f in (model.theta_x, model.theta_y, model.U, model.phi):
        if f.table.shape[0]:
            kmax = max(kmax, float(np.max(np.abs(f.k))))
    n = int(8 * (2 * np.pi * radius * kmax + 2))
    n += n % 2
    return max(64, n)


def witness_loops(model: ManifoldModel, contractible_only: bool = True, radii=(0.125, 0.25, 0.5, 1, 2, 4, 8, 16, 32)):
    """Seed loops with their statistics on N and 2N samples.

    Seeds are constants (including the maximum of U), cover circles of both
    orientations and, unless ``contractible_only``, straight class loops.
    """
    loops = []
    pts = _grid(8)
    arg = _refined_max(model.potential, 32, 2)[1] if not model.U.is_zero else np.zeros(2)
    for p in np.vstack([arg[None, :], pts]):
        loops.append(DiscreteLoop.constant(p, 16))
    for r in radii:
        n = _grid_size_for(model, r)
        for c in ((0.0, 0.0), (0.25, 0.5), (0.5, 0.25)):
            for cw in (True, False):
                loops.append(DiscreteLoop.circle(c, r, n, clockwise=cw))
    if not contractible_only and model.bounded_primitive:
        for w in ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)):
            for y in np.linspace(0, 1, 8, endpoint=False):
                start = (y, 0.0) if w[0] == 0 else (0.0, y)
                loops.append(DiscreteLoop.straight(w, 64, start))
    return [(LoopStats.of(model, q), LoopStats.of(model, resample(q, 2 * q.N))) for q in loops]


def find_witness(model: ManifoldModel, k: float, loops) -> Witness | None:
    """Most negative seed whose action stays negative on the doubled grid."""
    best = None
    for st, st2 in loops:
        val, T = min_action_over_T(model, st, k)
        if val < 0 and np.isfinite(T) and T > 0:
            a1 = st.action(k, T)
            if a1 < 0 and st2.action(k, T) < 0 and (best is None or a1 < best.action):
                best = Witness(k, st.loop, T, a1)
    return best


@dataclass
class CriticalValueEstimate:
    lower: float
    upper: float
    e0: float
    probes: list = field(default_factory=list)
    witnesses: list = field(default_factory=list)
    gauge: dict | None = None
    reason: str = ""

    def to_record(self) -> dict:
        return {
            "e0": self.e0,
            "lower": self.lower,
            "upper": self.upper,
            "probes": [float(k) for k in self.probes],
            "witness_ks": [float(w.k) for w in self.witnesses],
            "gauge": self.gauge,
            "reason": self.reason,
        }


def c_lower(
    model: ManifoldModel,
    budget: int = 40,
    upper: float | None = None,
    contractible_only: bool = True,
    k_probes=None,
):
    """Certified lower bound by bisection on k with stored witnesses.

    With B != 0 the probes are the given k-grid and every rejection is
    expected; the bound then reports the largest witnessed probe.
    """
    loops = witness_loops(model, contractible_only)
    ev = e0(model)
    probes, witnesses = [], []
    if not model.bounded_primitive or k_probes is not None:
        grid = list(k_probes if k_probes is not None else (0.5, 1.0, 2.0, 5.0, 10.0))
        lo = -np.inf
        for k in grid:
            probes.append(k)
            w = find_witness(model, k, loops)
            if w is not None:
                witnesses.append(w)
                lo = max(lo, k)
        return lo, probes, witnesses
    hi = upper if upper is not None else ev + 1.0
    lo = ev - 1.0
    w = find_witness(model, lo, loops)
    if w is None:
        return -np.inf, probes, witnesses
    witnesses.append(w)
    for _ in range(budget):
        mid = 0.5 * (lo + hi)
        probes.append(mid)
        w = find_witness(model, mid, loops)
        if w is not None:
            witnesses.append(w)
            lo = mid
        else:
            hi = mid
    # constant loops at argmax U witness every k < e0
    return max(lo, ev), probes, witnesses


def estimate(model: ManifoldModel, budget: int = 40, gauge_budget: int = 60, rng=None) -> dict:
    """Brackets for c (contractible witnesses) and c0 (all classes)."""
    ev = e0(model)
    up, fam = c_upper(model, gauge_budget, rng)
    if not np.isfinite(up):
        lo, probes, wits = c_lower(model, budget)
        return {
            "e0": ev,
            "c_lower": lo,
            "c_upper": np.inf,
            "c0_lower": lo,
            "c0_upper": np.inf,
            "probes": probes,
            "witnesses": wits,
            "gauge": None,
            "reason": "no bounded primitive",
        }
    lo, probes, wits = c_lower(model, budget, upper=up)
    lo0, probes0, wits0 = c_lower(model, budget, upper=up, contractible_only=False)
    return {
        "e0": ev,
        "c_lower": lo,
        "c_upper": up,
        "c0_lower": lo0,
        "c0_upper": up,
        "probes": probes,
        "witnesses": wits + wits0,
        "gauge": fam.table(),
        "reason": "",
    }


# --------------------------------------------------------------------------
# scaling and stabilization


def scaling_check(model: ManifoldModel, s_grid=(0.25, 0.5, 0.75), gauge_budget: int = 60) -> dict:
    """Transport the best gauge at s = 1 and compare sup values with s^2 upper(1)."""
    up1, fam = c_upper(model, gauge_budget)
    rows = []
    for s in s_grid:
        if not np.isfinite(up1):
            rows.append({"s": s, "upper": np.inf, "expected": np.inf, "error": 0.0})
            continue
        t = fam.transported(s)
        val = t.sup_value()
        rows.append({"s": s, "upper": val, "expected": s * s * up1, "error": abs(val - s * s * up1)})
    return {"upper_1": up1, "rows": rows}


def stabilized_check(model: ManifoldModel, gauge_budget: int = 60, budget: int = 30) -> dict:
    """Brackets for H + |p_t|^2 / 2 on the cotangent bundle of T^2 x S^1.

    The gauge gains a constant component h_t and the loops gain a circle
    coordinate; both enter additively, so the search is run on the product
    data directly.
    """
    up, fam = c_upper(model, gauge_budget)
    if not np.isfinite(up):
        return {"upper": np.inf, "lower": np.inf, "base_upper": up}
    base = fam.sup_value()
    up_hat = min(base + 0.5 * ht * ht for ht in (0.0, 0.05, -0.05, 0.1, -0.1))
    loops = witness_loops(model)

    def witness_hat(k):
        # a loop winding w times around the circle factor adds w^2 to E
        for w_t in (0, 1):
            for st, _ in loops:
                a = k - st.ubar
                E_hat = st.E + w_t * w_t
                if a < 0 or (a > 0 and 2 * np.sqrt(E_hat * a / 2) + st.flux < 0):
                    return True
        return False

    lo, hi = e0(model) - 1.0, up_hat
    for _ in range(budget):
        mid = 0.5 * (lo + hi)
        if witness_hat(mid):
            lo = mid
        else:
            hi = mid
    base_lo, _, _ = c_lower(model, budget, upper=up)
    return {"upper": up_hat, "lower": lo, "base_upper": up, "base_lower": base_lo}
