"""End-to-end criteria at their stated tolerances, one test per criterion."""
import json
import time

import numpy as np
import pytest

from rfloer import cli, indices, mane
from rfloer import free_time as ft
from rfloer import leafwise as lw
from rfloer import morse_complex as mc
from rfloer import rabinowitz as rb
from rfloer.geometry import ManifoldModel
from rfloer.loops import DiscreteLoop

from conftest import generic_model, pendulum_model

ORBIT_CONFIGS = ("flat_geodesic", "eps_001", "eps_005", "leafwise_small_F")


def rc_of(name, **patch):
    raw = json.loads(cli.bundled_config(name).read_text())
    for key, val in patch.items():
        raw[key] = {**raw.get(key, {}), **val} if isinstance(val, dict) else val
    return cli.RunConfig(raw)


def strict_fd_error(f, g, z, d, h=1e-6):
    fd = (f(z + h * d) - f(z - h * d)) / (2 * h)
    return abs(fd - g @ d) / abs(g @ d)


def test_01_flat_geodesic_closed_form(acceptance):
    t0 = time.perf_counter()
    cfg = ft.FreeTimeConfig(ManifoldModel(), 0.5, N=256)
    cp = ft.find_critical(cfg, (DiscreteLoop.straight((1, 0), 256, (0.0, 0.1)), 1.3), with_chi=False)
    dt = time.perf_counter() - t0
    ok = abs(cp.T - 1) < 1e-6 and abs(cp.action - 1) < 1e-6 and dt < 10
    acceptance(1, "flat geodesic T=S=1 at N=256", ok, f"|T-1|={abs(cp.T - 1):.1e} |S-1|={abs(cp.action - 1):.1e} {dt:.1f}s")
    assert ok


def test_02_action_identity(acceptance):
    worst, count = 0.0, 0
    for name in ORBIT_CONFIGS:
        rc = rc_of(name)
        for cp in cli.find_orbits(rc, with_chi=False):
            a_p = rb.action(rc.model, rc.k, rb.z_lift(cp, rc.model, +1))
            a_m = rb.action(rc.model, rc.k, rb.z_lift(cp, rc.model, -1))
            worst = max(worst, abs(a_p - cp.action), abs(a_m + cp.action))
            count += 1
    ok = worst <= 1e-8 and count >= 6
    acceptance(2, "A(Z+-) = +-S", ok, f"max error {worst:.1e} over {count} orbits")
    assert ok


def test_03_gradient_consistency(acceptance):
    m = generic_model()
    n, w = 32, (1, 0)
    cfg = ft.FreeTimeConfig(m, 0.5, N=n)
    rng = np.random.default_rng(2024)
    e_s, e_a = 0.0, 0.0
    base = DiscreteLoop.straight(w, n).samples
    for _ in range(100):
        q = DiscreteLoop(base + rb._smooth_noise(rng, n, 2) * 0.05, w)
        T = 1.0 + 0.1 * rng.normal()
        z = np.concatenate([q.samples.ravel(), [T]])
        f = lambda zz: ft.action(cfg, DiscreteLoop(zz[:-1].reshape(n, 2), w), zz[-1])
        e_s = max(e_s, strict_fd_error(f, ft.differential(cfg, q, T), z, rng.normal(size=z.size)))
    for _ in range(100):
        pert = rb._smooth_noise(rng, n, 4) * 0.05
        p = np.tile([1.0, 0.0], (n, 1)) + pert[:, 2:]
        u = rb.PhaseLoop(DiscreteLoop(base + pert[:, :2], w), p, 1.0 + 0.1 * rng.normal())
        z = u.flat()
        f = lambda zz: rb.action(m, 0.5, rb.PhaseLoop.from_flat(zz, w))
        e_a = max(e_a, strict_fd_error(f, rb.differential(m, 0.5, u), z, rng.normal(size=z.size)))
    ok = e_s <= 1e-5 and e_a <= 1e-5
    acceptance(3, "gradients vs central differences", ok, f"S {e_s:.1e}, A {e_a:.1e} (100 probes each)")
    assert ok


def test_04_index_suite(acceptance):
    failed, count = [], 0
    for name in ("eps_001", "eps_005"):
        rc = rc_of(name)
        cfg = rc.ft_config()
        for j, cp in enumerate(cli.find_orbits(rc)):
            if cp.nullity != 1:
                continue
            rep = indices.index_report(cfg, cp)
            count += 1
            failed += [f"{name}/{j}/{k}" for k, v in rep.agreement_flags.items() if not v]
    ok = not failed and count == 4
    acceptance(4, "index identities and chi agreement", ok, f"{count} orbits, failures {failed or 'none'}")
    assert ok


def test_05_constant_loop_kernel(acceptance):
    m = generic_model()
    pts = cli.level_constant_points(m, 0.5, 20, np.random.default_rng(5))
    res = [cli.kernel_check(m, 0.5, x) for x in pts]
    counts = {c for c, _ in res}
    gap = min(g for _, g in res)
    ok = counts == {3} and gap >= 1e3
    acceptance(5, "Morse-Bott kernel at constant loops", ok, f"counts {sorted(counts)}, min gap {gap:.1e}")
    assert ok


def test_06_flow_monitors(acceptance):
    rc = rc_of("eps_001", flow={"n_flows": 20})
    suite = cli._Suite(rc)
    starts = cli.flow_starts(rc, suite.orbits, 20, 32, rc.flow["amplitude"])
    a0 = [rb.action(rc.model, rc.k, u) for u in starts]
    v = suite.check_flow()
    ok = v["pass"] and v["eta_violations"] == 0 and all(-2 <= a <= 2 for a in a0)
    acceptance(6, "Rabinowitz flow monitors", ok, f"energy error {v['value']:.1e}, eta violations {v['eta_violations']}, rho0 {v['rho0']:.3f}")
    assert ok


def test_07_mane_estimates(acceptance):
    rows = []
    lo, _, _ = mane.c_lower(ManifoldModel(), budget=30, upper=0.0)
    up, _ = mane.c_upper(ManifoldModel())
    rows.append(-1e-3 <= lo <= up <= 1e-3)
    for eps in (0.01, 0.05):
        m = pendulum_model(eps)
        up, _ = mane.c_upper(m)
        lo, _, _ = mane.c_lower(m, budget=30, upper=up)
        rows.append(lo <= eps <= up and up - lo < 1e-2 * eps + 1e-4)
    sc = mane.scaling_check(pendulum_model(0.05))
    sc_err = max(r["error"] for r in sc["rows"] if r["s"] in (0.25, 0.5, 0.75))
    rows.append(sc_err < 1e-6)
    est = mane.estimate(ManifoldModel(B=1.0))
    wk = sorted(w.k for w in est["witnesses"] if w.action < 0)
    rows.append(est["c_upper"] == np.inf and wk == sorted(est["probes"]) and max(wk) == 10.0)
    ok = all(rows)
    acceptance(7, "Mane brackets, scaling, magnetic witnesses", ok, f"checks {rows}, scaling error {sc_err:.1e}")
    assert ok


def test_08_truncation_agreement(acceptance):
    rc = rc_of("eps_001", flow={"n_flows": 10})
    suite = cli._Suite(rc)
    starts = cli.flow_starts(rc, suite.orbits, 10, 32, rc.flow["amplitude"])
    res = cli._pmap(lambda u: rb.flow_agreement_check(rc.model, rc.k, u, R=10.0, s_max=0.2), starts)
    worst = max(r["sup_distance"] for r in res)
    ok = worst <= 1e-8 and all(r["in_region"] for r in res)
    acceptance(8, "H vs H_R flows agree", ok, f"sup distance {worst:.1e} over {len(res)} seeds")
    assert ok


def test_09_morse_homology(acceptance):
    t0 = time.perf_counter()
    cfg = ft.FreeTimeConfig(pendulum_model(0.01), 0.5, N=32)
    cx = mc.build_complex(cfg, (1, 0), action_cap=1.5, n_fan=8, check_doubling=True)
    dt = time.perf_counter() - t0
    betti = cx.betti()
    d2 = not cx.d_squared().any()
    ok = d2 and betti == [1, 2, 1] and dt < 600
    acceptance(9, "Morse homology class (1,0)", ok, f"betti {betti}, d^2=0 {d2}, {len(cx.generators)} generators, {dt:.0f}s")
    assert ok


def test_10_leafwise_witness(acceptance):
    rc = rc_of("leafwise_small_F")
    r = cli._leafwise_run(rc)
    r0 = cli._leafwise_run(rc, F_spec=[])
    ok = r.converged and r.verification_distance < 1e-5 and r.displacement > 0 and r0.verification_distance < 1e-5
    acceptance(10, "leaf-wise intersection", ok, f"distance {r.verification_distance:.1e}, displacement {r.displacement:.1e}, F=0 distance {r0.verification_distance:.1e}")
    assert ok
    assert isinstance(r0, lw.LeafwiseResult) and r0.displacement == 0.0


@pytest.mark.parametrize("name", ["eps_005"])
def test_11_verify_deterministic(acceptance, tmp_path, name):
    outs = []
    for tag in ("a", "b"):
        code = cli.main(["verify", "--config", name, "--seed", "3", "--out", str(tmp_path / tag)])
        outs.append((code, (tmp_path / tag / "verify.json").read_bytes()))
    ok = outs[0] == outs[1] and outs[0][0] == 0
    acceptance(11, "verify is deterministic", ok, f"exit codes {outs[0][0]}, {outs[1][0]}; identical {outs[0][1] == outs[1][1]}")
    assert ok
