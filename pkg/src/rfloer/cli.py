"""Batch front-end: ``rfloer <command> --config <path> [--out DIR] [--seed S] [--n N]``.

Exit codes: 0 success, 2 config error, 3 nonconvergence, 4 verification
failure.  Every JSON report carries the config hash and the tool version;
reports never contain timestamps, so reruns are byte-identical.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import free_time as ft
from . import indices, leafwise, mane, morse_complex
from . import rabinowitz as rb
from .geometry import HomotopyClass, ManifoldModel, UnboundedPrimitiveError
from .loops import DiscreteLoop, resample

EXIT_OK, EXIT_CONFIG, EXIT_NONCONV, EXIT_VERIFY = 0, 2, 3, 4
COMMANDS = ("find-orbits", "indices", "mane", "rf-flow", "morse-homology", "leafwise", "verify")

_TABLE = {"type": "array", "items": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4}}
_POS = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["model", "k"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "phi": _TABLE,
                "U": _TABLE,
                "B": {"type": "number"},
                "theta_ex_x": _TABLE,
                "theta_ex_y": _TABLE,
                "ref_point": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
            },
        },
        "k": _POS,
        "classes": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
        },
        "N": {"type": "integer", "minimum": 8},
        "seed": {"type": "integer", "minimum": 0},
        "n_seeds": {"type": "integer", "minimum": 1},
        "gradient_probes": {"type": "integer", "minimum": 1},
        "tolerances": {"type": "object", "additionalProperties": _POS},
        "mane": {
            "type": "object",
            "properties": {"budget": {"type": "integer", "minimum": 1}, "gauge_budget": {"type": "integer", "minimum": 1}},
        },
        "flow": {
            "type": "object",
            "properties": {
                "n_flows": {"type": "integer", "minimum": 1},
                "s_max": _POS,
                "window": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "amplitude": _POS,
                "N": {"type": "integer", "minimum": 8},
                "R": _POS,
            },
        },
        "morse": {
            "type": "object",
            "properties": {
                "class": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                "action_cap": {"type": "number"},
                "N": {"type": "integer", "minimum": 8},
                "n_fan": {"type": "integer", "minimum": 1},
            },
        },
        "leafwise": {
            "type": "object",
            "properties": {
                "orbit": {"type": "integer", "minimum": 0},
                "n_starts": {"type": "integer", "minimum": 1},
                "F": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["amp", "center", "radius"],
                        "properties": {
                            "amp": {"type": "number"},
                            "center": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
                            "radius": {
                                "oneOf": [
                                    _POS,
                                    {"type": "array", "items": {"oneOf": [_POS, {"type": "null"}]}, "minItems": 4, "maxItems": 4},
                                ]
                            },
                            "t_window": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                        },
                    },
                },
            },
        },
    },
}

DEFAULT_TOLERANCES = {
    "action": 1e-8,
    "gradient": 1e-5,
    "energy_identity": 1e-6,
    "truncation": 1e-8,
    "leafwise": 1e-5,
    "periodicity": 1e-8,
    "kernel_gap": 1e3,
}
# a tolerance this many times looser than the default is flagged in verdicts
WEAK_FACTOR = 1e3


class ConfigError(ValueError):
    pass


class VerificationError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# config handling


class RunConfig:
    """Validated run configuration with defaults filled in."""

    def __init__(self, raw: dict, seed: int | None = None, n: int | None = None):
        try:
            jsonschema.validate(raw, CONFIG_SCHEMA)
        except jsonschema.ValidationError as e:
            raise ConfigError(f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}") from None
        self.raw = dict(raw)
        if seed is not None:
            self.raw["seed"] = int(seed)
        if n is not None:
            if n < 8:
                raise ConfigError(f"grid size must be at least 8, got {n}")
            self.raw["N"] = int(n)
        self.name = self.raw.get("name", "unnamed")
        self.model = ManifoldModel.from_dict(self.raw["model"])
        self.k = float(self.raw["k"])
        self.classes = [tuple(c) for c in self.raw.get("classes", [[1, 0]])]
        for c in self.classes:
            if c == (0, 0):
                raise ConfigError("orbit search needs a nontrivial class")
        self.N = int(self.raw.get("N", 64))
        if self.N % 2:
            raise ConfigError("N must be even")
        self.seed = int(self.raw.get("seed", 0))
        self.n_seeds = int(self.raw.get("n_seeds", 4))
        self.tolerances = {**DEFAULT_TOLERANCES, **self.raw.get("tolerances", {})}
        self.mane = self.raw.get("mane", {})
        self.flow = self.raw.get("flow", {})
        self.morse = self.raw.get("morse", {})
        self.leafwise = self.raw.get("leafwise")
        self.umax = mane.e0(self.model)

    @classmethod
    def load(cls, path, seed=None, n=None) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(str(e)) from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e}") from None
        return cls(raw, seed, n)

    @property
    def hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    @property
    def supercritical(self) -> bool:
        return self.k > self.umax

    def ft_config(self, n: int | None = None) -> ft.FreeTimeConfig:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return ft.FreeTimeConfig(self.model, self.k, N=n or self.N)

    def rng(self, stream: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, stream])


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package, e.g. ``"flat_geodesic"``."""
    return Path(str(resources.files("rfloer") / "configs" / f"{name}.json"))


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("TOOL_THREADS", "1")))
    except ValueError:
        return 1


def jsonable(obj):
    """Recursively convert numpy scalars/arrays and non-finite floats."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if np.isnan(v):
            return "nan"
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if hasattr(obj, "to_record"):
        return jsonable(obj.to_record())
    return obj


def dumps(payload: dict) -> str:
    return json.dumps(jsonable(payload), sort_keys=True, indent=2) + "\n"


def _envelope(rc: RunConfig, command: str, body: dict) -> dict:
    return {"command": command, "config": rc.name, "config_hash": rc.hash, "version": __version__, "seed": rc.seed, **body}


# --------------------------------------------------------------------------
# shared orchestration


def find_orbits(rc: RunConfig, n: int | None = None, with_chi: bool = True) -> list[ft.LagCriticalPoint]:
    """Distinct critical points per configured class, sorted by (class, action)."""
    cfg = rc.ft_config(n)
    out = []
    for c in rc.classes:
        alpha = HomotopyClass.of(c)
        found: list[ft.LagCriticalPoint] = []
        for seed in morse_complex._class_seeds(alpha, cfg.N, cfg.k, rc.n_seeds):
            try:
                cp = ft.find_critical(cfg, seed, with_chi=with_chi)
            except (ft.CollapseError, ft.NonConvergenceError, ft.DegenerateError):
                continue
            if any(abs(cp.T - o.T) < 1e-6 and morse_complex.same_circle(cp.loop, o.loop) for o in found):
                continue
            found.append(cp)
        out.extend(sorted(found, key=lambda p: p.action))
    if not out:
        raise ft.NonConvergenceError("no closed orbit found in any configured class")
    return out


def _pmap(func, items):
    items = list(items)
    if n_threads() == 1 or len(items) < 2:
        return [func(x) for x in items]
    with ThreadPoolExecutor(max_workers=n_threads()) as ex:
        return list(ex.map(func, items))


def flow_starts(rc: RunConfig, orbits, n_flows: int, n: int, amplitude: float) -> list[rb.PhaseLoop]:
    """Seeded smooth perturbations of the Z+ lifts of the found orbits."""
    rng = rc.rng(1)
    lifts = []
    for cp in orbits:
        q = resample(cp.loop, n) if cp.loop.N != n else cp.loop
        lifts.append(rb.z_lift(ft.LagCriticalPoint(q, cp.T, cp.action, cp.i, cp.i_T, cp.nullity, cp.chi, cp.residual, cp.k), rc.model))
    starts = []
    for j in range(n_flows):
        u = lifts[j % len(lifts)]
        pert = rb._smooth_noise(rng, n, 4, modes=3) * amplitude
        starts.append(
            rb.PhaseLoop(
                DiscreteLoop(u.base.samples + pert[:, :2], u.winding),
                u.momenta + pert[:, 2:],
                u.eta * (1 + amplitude * rng.normal()),
            )
        )
    return starts


def leafwise_pair(rc: RunConfig, orbit: rb.PhaseLoop, F_spec=None):
    x = np.concatenate([orbit.base.samples, orbit.momenta], axis=1)
    spec = rc.leafwise.get("F", []) if F_spec is None else F_spec
    return leafwise.build_moser_pair(rc.model, rc.k, spec, samples=x)


# --------------------------------------------------------------------------
# commands


def cmd_find_orbits(rc: RunConfig) -> tuple[dict, dict]:
    orbits = find_orbits(rc)
    files = {}
    for j, cp in enumerate(orbits):
        files[f"orbit_{j}.csv"] = cp.loop.to_csv()
    return {"orbits": [cp.to_record() for cp in orbits]}, files


def cmd_indices(rc: RunConfig) -> tuple[dict, dict]:
    cfg = rc.ft_config()
    rows = []
    for cp in find_orbits(rc):
        rec = {"orbit": cp.to_record()}
        if cp.nullity != 1:
            rec["skipped"] = f"nullity {cp.nullity}: not a nondegenerate circle"
        else:
            rec["indices"] = indices.index_report(cfg, cp).to_record()
        rows.append(rec)
    return {"orbits": rows}, {}


def cmd_mane(rc: RunConfig) -> tuple[dict, dict]:
    est = mane.estimate(
        rc.model, budget=rc.mane.get("budget", 40), gauge_budget=rc.mane.get("gauge_budget", 60), rng=rc.rng(2)
    )
    body = {
        "e0": est["e0"],
        "c_lower": est["c_lower"],
        "c_upper": est["c_upper"],
        "c0_lower": est["c0_lower"],
        "c0_upper": est["c0_upper"],
        "reason": est["reason"],
        "gauge": est["gauge"],
        "witnesses": [
            {"k": w.k, "action": w.action, "T": w.T, "class": [w.loop.winding.m1, w.loop.winding.m2]}
            for w in est["witnesses"]
        ],
    }
    return body, {}


def cmd_rf_flow(rc: RunConfig) -> tuple[dict, dict]:
    n = rc.flow.get("N", 32)
    orbits = find_orbits(rc, with_chi=False)
    starts = flow_starts(rc, orbits, rc.flow.get("n_flows", 4), n, rc.flow.get("amplitude", 1e-2))
    window = tuple(rc.flow.get("window", (-2.0, 2.0)))

    def one(u0):
        return rb.rabinowitz_flow(rc.model, rc.k, u0, rc.flow.get("s_max", 1.0), window=window)

    runs = _pmap(one, starts)
    files = {f"flow_{j}.csv": r.to_csv() for j, r in enumerate(runs)}
    rows = [
        {"status": r.status, "s_end": r.s[-1], "A_start": r.actions[0], "A_end": r.actions[-1], **r.monitors}
        for r in runs
    ]
    return {"flows": rows}, files


def cmd_morse(rc: RunConfig) -> tuple[dict, dict]:
    n = rc.morse.get("N", 32)
    cfg = rc.ft_config(n)
    alpha = rc.morse.get("class", list(rc.classes[0]))
    betti, cx = morse_complex.homology(cfg, alpha, rc.morse.get("action_cap", 1.5), n_fan=rc.morse.get("n_fan", 8))
    d2 = int(np.count_nonzero(cx.d_squared())) if cx.generators else 0
    body = {"complex": cx.to_record(), "betti": betti, "d_squared_nonzero": d2}
    if d2:
        raise VerificationError(dumps(_envelope(rc, "morse-homology", body)))
    return body, {}


def _leafwise_run(rc: RunConfig, F_spec=None) -> leafwise.LeafwiseResult:
    orbits = find_orbits(rc, with_chi=False)
    cp = orbits[min(rc.leafwise.get("orbit", 0), len(orbits) - 1)]
    orbit = rb.z_lift(cp, rc.model)
    pair = leafwise_pair(rc, orbit, F_spec)
    return leafwise.search_leafwise(rc.model, rc.k, pair, orbit, n_starts=rc.leafwise.get("n_starts", 8))


def cmd_leafwise(rc: RunConfig) -> tuple[dict, dict]:
    if rc.leafwise is None:
        raise ConfigError("config has no leafwise section")
    res = _leafwise_run(rc)
    body = res.to_record()
    if res.verification_distance >= rc.tolerances["leafwise"]:
        body["failed_witness"] = True
        raise VerificationError(dumps(_envelope(rc, "leafwise", body)))
    return body, {}


# --------------------------------------------------------------------------
# verification suite


def _verdict(passed: bool, value, tol, key: str | None, rc: RunConfig, **extra) -> dict:
    out = {"pass": bool(passed), "value": value, "tolerance": tol, **extra}
    if key is not None and key in DEFAULT_TOLERANCES:
        default = DEFAULT_TOLERANCES[key]
        loose = tol > WEAK_FACTOR * default if key != "kernel_gap" else tol < default / WEAK_FACTOR
        if loose:
            out["annotation"] = "weak tolerance"
    return out


def fd_relative_error(f, grad, z, d, h: float = 1e-5) -> float:
    """|<grad, d> - central difference| relative to |grad| |d|."""
    fd = (f(z + h * d) - f(z - h * d)) / (2 * h)
    exact = float(grad @ d)
    return abs(fd - exact) / max(float(np.linalg.norm(grad) * np.linalg.norm(d)), 1e-300)


def gradient_probes_lagrangian(cfg: ft.FreeTimeConfig, base: ft.LagCriticalPoint, n_probes: int, rng) -> float:
    """Worst FD relative error of S at random perturbations of a loop."""
    n, w = cfg.N, base.loop.winding
    worst = 0.0
    for _ in range(n_probes):
        pert = rb._smooth_noise(rng, n, 2, modes=4) * 0.05
        q = DiscreteLoop(base.loop.samples + pert, w)
        T = base.T * (1 + 0.1 * rng.normal())
        z = np.concatenate([q.samples.ravel(), [T]])

        def f(zz):
            return ft.action(cfg, DiscreteLoop(zz[:-1].reshape(n, 2), w), zz[-1])

        worst = max(worst, fd_relative_error(f, ft.differential(cfg, q, T), z, rng.normal(size=z.size)))
    return worst


def gradient_probes_rabinowitz(model: ManifoldModel, k: float, base: rb.PhaseLoop, n_probes: int, rng) -> float:
    """Worst FD relative error of A at random perturbations of a phase loop."""
    n, w = base.N, base.winding
    worst = 0.0
    for _ in range(n_probes):
        pert = rb._smooth_noise(rng, n, 4, modes=4) * 0.05
        u = rb.PhaseLoop(DiscreteLoop(base.base.samples + pert[:, :2], w), base.momenta + pert[:, 2:], base.eta + 0.1 * rng.normal())
        z = u.flat()

        def f(zz):
            return rb.action(model, k, rb.PhaseLoop.from_flat(zz, w))

        worst = max(worst, fd_relative_error(f, rb.differential(model, k, u), z, rng.normal(size=z.size)))
    return worst


def level_constant_points(model: ManifoldModel, k: float, m: int, rng) -> np.ndarray:
    """Random points of the energy level with H = k exactly."""
    pts = []
    while len(pts) < m:
        q = rng.uniform(0, 1, 2)
        u = float(model.potential(q[None, :])[0])
        if u >= k - 1e-3:
            continue
        ang = rng.uniform(0, 2 * np.pi)
        r = np.sqrt(2 * (k - u) * float(model.conformal(q[None, :])[0]))
        pts.append(np.concatenate([q, r * np.array([np.cos(ang), np.sin(ang)])]))
    return np.array(pts)


def kernel_check(model: ManifoldModel, k: float, x0) -> tuple[int, float]:
    count, mags = rb.constant_hessian_kernel(model, k, x0, return_spectrum=True)
    return count, float(mags[3] / max(mags[2], 1e-300))


class _Suite:
    """Lazily shared data for the identity checks of one config."""

    def __init__(self, rc: RunConfig):
        self.rc = rc
        self.cfg = rc.ft_config()
        self._orbits = None

    @property
    def orbits(self):
        if self._orbits is None:
            try:
                self._orbits = find_orbits(self.rc)
            except ft.NonConvergenceError as e:
                self._orbits = e
        if isinstance(self._orbits, Exception):
            raise self._orbits
        return self._orbits

    def check_action_identity(self):
        rc, tol = self.rc, self.rc.tolerances["action"]
        errs = []
        for cp in self.orbits:
            zp, zm = rb.z_lift(cp, rc.model, +1), rb.z_lift(cp, rc.model, -1)
            errs.append(max(abs(rb.action(rc.model, rc.k, zp) - cp.action), abs(rb.action(rc.model, rc.k, zm) + cp.action)))
        return _verdict(max(errs) <= tol, max(errs), tol, "action", rc, orbits=len(errs))

    def check_gradients(self):
        rc, tol = self.rc, self.rc.tolerances["gradient"]
        n_probes = int(rc.raw.get("gradient_probes", 10))
        cp = self.orbits[0]
        g1 = gradient_probes_lagrangian(self.cfg, cp, n_probes, rc.rng(3))
        g2 = gradient_probes_rabinowitz(rc.model, rc.k, rb.z_lift(cp, rc.model), n_probes, rc.rng(4))
        return {
            "gradient_free_time": _verdict(g1 <= tol, g1, tol, "gradient", rc, probes=n_probes),
            "gradient_rabinowitz": _verdict(g2 <= tol, g2, tol, "gradient", rc, probes=n_probes),
        }

    def check_constant_kernel(self):
        rc, tol = self.rc, self.rc.tolerances["kernel_gap"]
        pts = level_constant_points(rc.model, rc.k, 4, rc.rng(5))
        res = [kernel_check(rc.model, rc.k, x) for x in pts]
        ok = all(c == 3 and g >= tol for c, g in res)
        return _verdict(ok, min(g for _, g in res), tol, "kernel_gap", rc, counts=[c for c, _ in res])

    def check_truncation(self):
        rc, tol = self.rc, self.rc.tolerances["truncation"]
        u0 = flow_starts(rc, self.orbits, 1, rc.flow.get("N", 32), rc.flow.get("amplitude", 1e-2))[0]
        agree = rb.flow_agreement_check(rc.model, rc.k, u0, R=rc.flow.get("R", 10.0), s_max=0.2)
        ok = agree["sup_distance"] <= tol and agree["in_region"]
        return _verdict(ok, agree["sup_distance"], tol, "truncation", rc)

    def check_indices(self):
        nondeg = [cp for cp in self.orbits if cp.nullity == 1]
        flags = {f"orbit_{j}": indices.index_report(self.cfg, cp).agreement_flags for j, cp in enumerate(nondeg)}
        ok = all(all(f.values()) for f in flags.values())
        return _verdict(ok, len(nondeg), 0, None, self.rc, flags=flags)

    def check_flow(self):
        rc, tol = self.rc, self.rc.tolerances["energy_identity"]
        a, b = rc.flow.get("window", (-2.0, 2.0))
        starts = flow_starts(rc, self.orbits, rc.flow.get("n_flows", 2), rc.flow.get("N", 32), rc.flow.get("amplitude", 1e-2))
        delta = rb.band_delta(rc.model, rc.k)
        rho0 = rb.estimate_rho0(rc.model, rc.k, starts, delta, n_samples=100, rng=rc.rng(6))
        bound = rb.eta_bound_constants(rc.model, rc.k, rc.classes[0], a, b, rho0)

        def one(u0):
            r = rb.rabinowitz_flow(rc.model, rc.k, u0, rc.flow.get("s_max", 1.0), window=(a, b))
            return r.monitors, rb.flow_bound_monitors(rc.model, r, bound, a, b)

        mons = _pmap(one, starts)
        e_err = max(m["energy_identity_error"] for m, _ in mons)
        viol = sum(bm["eta_violations"] for _, bm in mons)
        ok = all(m["monotone"] for m, _ in mons) and e_err <= tol and viol == 0
        return _verdict(ok, e_err, tol, "energy_identity", rc, eta_violations=viol, C0=bound.C0, rho0=rho0)

    def check_mane(self):
        rc = self.rc
        est = mane.estimate(rc.model, budget=rc.mane.get("budget", 20), gauge_budget=rc.mane.get("gauge_budget", 40), rng=rc.rng(2))
        lo, up = est["c_lower"], est["c_upper"]
        if not np.isfinite(up):
            # c = inf is certified by a negative-action witness at every probe
            ok = len(est["witnesses"]) == len(est["probes"]) and all(w.action < 0 for w in est["witnesses"])
            return _verdict(ok, len(est["witnesses"]), len(est["probes"]), None, rc, lower=lo, upper=up)
        ok = lo <= up + 1e-9 and est["e0"] <= up + 1e-9
        return _verdict(ok, up - lo, 0, None, rc, lower=lo, upper=up)

    def check_leafwise(self):
        rc, tol = self.rc, self.rc.tolerances
        r = _leafwise_run(rc)
        r0 = _leafwise_run(rc, F_spec=[])
        ok = r.verification_distance < tol["leafwise"] and r.periodicity_error <= tol["periodicity"] and r.displacement > 0
        return {
            "leafwise": _verdict(
                ok, r.verification_distance, tol["leafwise"], "leafwise", rc,
                displacement=r.displacement, periodicity_error=r.periodicity_error,
            ),
            "leafwise_trivial": _verdict(r0.verification_distance < tol["leafwise"], r0.verification_distance, tol["leafwise"], "leafwise", rc),
        }


# (name, method, needs k above max U)
SUITE = [
    ("action_identity", "check_action_identity", False),
    ("gradients", "check_gradients", False),
    ("constant_kernel", "check_constant_kernel", False),
    ("truncation_agreement", "check_truncation", False),
    ("index_identities", "check_indices", True),
    ("flow_monitors", "check_flow", True),
    ("mane_bracket", "check_mane", False),
    ("leafwise", "check_leafwise", False),
]


def run_suite(rc: RunConfig) -> dict:
    """Evaluate every identity check; returns verdicts keyed by check name."""
    suite = _Suite(rc)
    verdicts: dict[str, dict] = {}
    notes: list[str] = []
    if not rc.supercritical:
        notes.append(f"supercriticality: k={rc.k} does not exceed max U={rc.umax}; c-dependent checks skipped")
    for name, method, c_dependent in SUITE:
        if c_dependent and not rc.supercritical:
            continue
        if name == "leafwise" and rc.leafwise is None:
            continue
        if name != "mane_bracket" and not rc.model.bounded_primitive:
            notes.append(f"{name} skipped: no bounded primitive for B != 0")
            continue
        try:
            out = getattr(suite, method)()
        except (ft.NonConvergenceError, ft.CollapseError) as e:
            if rc.supercritical:
                raise
            notes.append(f"{name} skipped: {e}")
            continue
        if "pass" in out:
            verdicts[name] = out
        else:
            verdicts.update(out)
    return {"verdicts": verdicts, "warnings": notes, "all_pass": all(v["pass"] for v in verdicts.values())}


def summary_text(body: dict) -> str:
    lines = []
    for name in sorted(body["verdicts"]):
        v = body["verdicts"][name]
        note = f" [{v['annotation']}]" if "annotation" in v else ""
        lines.append(f"{'PASS' if v['pass'] else 'FAIL'}  {name}  value={v['value']}  tol={v['tolerance']}{note}")
    for w in body["warnings"]:
        lines.append(f"WARN  {w}")
    lines.append("ALL PASS" if body["all_pass"] else "FAILURES PRESENT")
    return "\n".join(lines) + "\n"


def cmd_verify(rc: RunConfig) -> tuple[dict, dict]:
    body = run_suite(rc)
    files = {"verify.txt": summary_text(body)}
    if not body["all_pass"]:
        raise VerificationError(dumps(_envelope(rc, "verify", body)))
    return body, files


HANDLERS = {
    "find-orbits": cmd_find_orbits,
    "indices": cmd_indices,
    "mane": cmd_mane,
    "rf-flow": cmd_rf_flow,
    "morse-homology": cmd_morse,
    "leafwise": cmd_leafwise,
    "verify": cmd_verify,
}


def _write(out: Path | None, command: str, payload: str, files: dict):
    sys.stdout.write(payload)
    if out is None:
        return
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}.json").write_text(payload)
    for name, text in files.items():
        (out / name).write_text(text)


def run(command: str, config_path, out=None, seed=None, n=None) -> int:
    """Execute one command; returns the process exit code."""
    out = Path(out) if out is not None else None
    try:
        rc = RunConfig.load(config_path, seed, n)
        body, files = HANDLERS[command](rc)
    except (ConfigError, UnboundedPrimitiveError) as e:
        sys.stderr.write(f"config error: {e}\n")
        return EXIT_CONFIG
    except (ft.NonConvergenceError, ft.CollapseError, ft.DegenerateError, morse_complex.RefineError) as e:
        sys.stderr.write(f"nonconvergence: {e}\n")
        return EXIT_NONCONV
    except VerificationError as e:
        _write(out, command, str(e), {})
        sys.stderr.write("verification failure\n")
        return EXIT_VERIFY
    payload = dumps(_envelope(rc, command, body))
    _write(out, command, payload, files)
    if command == "verify":
        sys.stderr.write(files["verify.txt"])
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rfloer", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON run config, or the name of a bundled config")
    parser.add_argument("--out", default=None, help="directory for JSON reports and CSV series")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--n", type=int, default=None, help="override the grid size N")
    args = parser.parse_args(argv)
    if args.seed is not None and args.seed < 0:
        parser.error("--seed must be non-negative")
    path = args.config
    if not Path(path).exists() and bundled_config(path).exists():
        path = bundled_config(path)
    return run(args.command, path, args.out, args.seed, args.n)


if __name__ == "__main__":
    sys.exit(main())
