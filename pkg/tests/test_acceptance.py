"""One test per acceptance criterion; each prints a single PASS/FAIL line."""
import time
from dataclasses import replace

import numpy as np
import pytest
import sympy as sym

from blayer.assembly import assemble, euler_only_norm, residual_report
from blayer.config import StudyConfig
from blayer.data import Profile, default_problem, trivial_problem
from blayer.euler1 import solve_dirichlet
from blayer.grid import make_grid
from blayer.pipeline import build_profiles
from blayer.prandtl0 import check_max_principle, march_prandtl0
from blayer.remainder import (LinearizedOperator, ShearBackground, energy_check, make_mac_grid,
                              positivity_form, random_forcing, shear_background,
                              solve_linearized, stability_ratio, vorticity_check)
from blayer.study import run_study


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return report


@pytest.fixture(scope="module")
def sweep():
    t0 = time.perf_counter()
    rep = run_study(StudyConfig(), until="iterate")
    return rep, time.perf_counter() - t0


def orders(errs):
    e = np.asarray(errs, dtype=float)
    return np.log2(e[:-1] / e[1:])


def test_criterion_1_trivial_collapse(verdict):
    t0 = time.perf_counter()
    pd = trivial_problem(1e-3)
    g = make_grid(0.1, 20.0, 33, 257, "tanh(3)")
    P = build_profiles(pd, g)
    approx = assemble(P.pd, P.lf, P.corr)
    parts = {k: g.l2(v) for k, v in approx.parts.items() if k != "ue0"}
    rep = residual_report(P.pd, P.lf, P.corr, P.sampler, approx)
    ref = euler_only_norm(pd, g)
    dt = time.perf_counter() - t0
    rel = abs(rep.combined - ref) / ref
    ok = max(parts.values()) <= 1e-9 and rel <= 0.05 and dt < 10
    verdict(1, ok, f"max corrector L2={max(parts.values()):.2e} combined={rep.combined:.5e} "
                   f"euler-only={ref:.5e} rel={rel:.2e} time={dt:.1f}s")


def test_criterion_2_maximum_principle(verdict):
    t0 = time.perf_counter()
    g = make_grid(0.1, 20.0, 33, 257, "tanh(3)")
    rng = np.random.default_rng(2024)
    cases = [default_problem(1e-3)]
    for _ in range(5):
        w, b = rng.uniform(1, 4), rng.uniform(-0.2, 0.2)
        expr = f"-0.3*exp(-y/{w:.6f}) + {b:.6f}*y*exp(-y)"
        cases.append(replace(default_problem(1e-3), ubar0=Profile.from_expr(expr)))
    margins = [check_max_principle(march_prandtl0(pd, g)) for pd in cases]
    dt = time.perf_counter() - t0
    ok = min(margins) >= -1e-8 and dt < 30
    verdict(2, ok, f"min margin over {len(cases)} profiles={min(margins):.2e} time={dt:.1f}s")


def test_criterion_3_positivity_identity(verdict, default_approx):
    t0 = time.perf_counter()
    bg = shear_background(default_approx)
    rng = np.random.default_rng(3)
    H, worst, qmin, eig = 20.0, [], np.inf, np.inf
    for ny in (65, 129, 257):
        y = np.linspace(0, H, ny)
        us, uyy = bg.at("u", [0.05], y)[0], bg.at("u_yy", [0.05], y)[0]
        w = 0.0
        for _ in range(100):
            a = rng.standard_normal(5)
            v = sum(a[m] * np.sin((m + 1) * np.pi * y / H) for m in range(5))
            vy = sum(a[m] * (m + 1) * np.pi / H * np.cos((m + 1) * np.pi * y / H) for m in range(5))
            r = positivity_form(v, y, us, uyy)
            w = max(w, abs(r["Q_direct"] - r["Q_factored"]) / np.trapezoid(v**2 + vy**2, y))
            qmin = min(qmin, r["Q_factored"])
        worst.append(w)
        eig = r["min_eig"]
    order = float(np.polyfit(np.log(H / (np.array([65, 129, 257]) - 1)), np.log(worst), 1)[0])
    dt = time.perf_counter() - t0
    ok = order >= 1.8 and qmin >= 0 and eig > 0 and dt < 60
    verdict(3, ok, f"mismatch/H1={['%.2e' % x for x in worst]} order={order:.2f} "
                   f"min Q_factored={qmin:.2e} min_eig={eig:.4f} time={dt:.1f}s")


def test_criterion_4_residual_scaling(verdict, sweep):
    rep, dt = sweep
    recs = rep["records"]
    drift = max(r["max_drift"] for r in recs)
    f = rep["fits"].get("combined", {"slope": np.nan, "r2": np.nan})
    ok = (all(r["status"] == "ok" and r["drift_ok"] for r in recs) and f["slope"] >= 0.6
          and f["r2"] >= 0.98 and dt < 900)
    verdict(4, ok, f"slope={f['slope']:.3f} r2={f['r2']:.4f} max drift={drift:.3f} "
                   f"sweep time={dt:.0f}s")


def test_criterion_5_budget_exponents(verdict, sweep):
    fits = sweep[0]["fits"]
    floors = {"E0": 0.6, "Ru1": 0.15, "Rv0": 0.15, "px2": -0.35}
    ok = all(q in fits and fits[q]["slope"] >= lo and fits[q]["r2"] >= 0.95 for q, lo in floors.items())
    detail = " ".join(f"{q}={fits[q]['slope']:.3f}(r2={fits[q]['r2']:.3f})" for q in floors if q in fits)
    verdict(5, ok, detail)


def test_criterion_6_linear_stability(verdict):
    t0 = time.perf_counter()
    worst, energy_ok, vort_ok, en, vo = [], True, True, 0.0, 0.0
    for eps in (1e-2, 1e-3, 1e-4):
        P = build_profiles(default_problem(eps), make_grid(0.1, 20.0, 33, 257, "tanh(3)"),
                           sources=False)
        bg = shear_background(assemble(P.pd, P.lf, P.corr))
        mac = make_mac_grid(0.1, 20.0, 16, 128)
        op = LinearizedOperator(bg, mac, eps)
        rng = np.random.default_rng(1)
        ratios = []
        for _ in range(20):
            sol = op.solve(*random_forcing(mac, rng, eps=eps))
            ratios.append(stability_ratio(sol))
            e, v = energy_check(sol, bg, 10.0), vorticity_check(sol, bg, 20.0)
            energy_ok &= e["pass"]
            vort_ok &= v["pass"]
            en, vo = max(en, e["ratio"]), max(vo, v["ratio"])
        worst.append(max(ratios))
    spread = max(worst) / min(worst)
    dt = time.perf_counter() - t0
    ok = spread <= 2.0 and energy_ok and vort_ok and dt < 600
    verdict(6, ok, f"max ratio per eps={['%.3f' % r for r in worst]} spread={spread:.2f} "
                   f"energy max={en:.3f} vorticity max={vo:.3f} time={dt:.1f}s")


def _stokes_mms_errors():
    x, y = sym.symbols("x y")
    L, H, eps = 1.0, 2.0, 0.05
    d = sym.diff
    us = 1.5 - 0.5 * sym.exp(-y) + 0.2 * x
    vs = 0.1 * y * sym.exp(-y) * (1 + x)
    psi = x**2 * (L - x) ** 3 * sym.sin(sym.pi * y / H) ** 2
    u, v = d(psi, y), -d(psi, x)
    p = 2 * eps * d(u, x) + (x - L) * sym.cos(y) * (1 + x)
    f = us * d(u, x) + u * d(us, x) + vs * d(u, y) + v * d(us, y) + d(p, x) - (d(u, y, 2) + eps * d(u, x, 2))
    g = us * d(v, x) + u * d(vs, x) + vs * d(v, y) + v * d(vs, y) + d(p, y) / eps - (d(v, y, 2) + eps * d(v, x, 2))

    def lam(e):
        return sym.lambdify((x, y), e, "numpy")

    funcs = {"u": lam(us), "u_x": lam(d(us, x)), "u_y": lam(d(us, y)), "u_yy": lam(d(us, y, 2)),
             "v": lam(vs), "v_x": lam(d(vs, x)), "v_y": lam(d(vs, y))}
    bg = ShearBackground.from_functions(make_grid(L, H, 9, 9), eps, funcs)
    F, G, Ue, Ve = lam(f), lam(g), lam(u), lam(v)
    errs = []
    # 16^2 is pre-asymptotic for this solution (order 1.7); the ladder starts at 32^2
    for n in (32, 64, 128, 256):
        m = make_mac_grid(L, H, n, n)
        sol = solve_linearized(bg, F, G, eps, m)
        Xu, Yu = np.meshgrid(m.xu, m.yu, indexing="ij")
        Xv, Yv = np.meshgrid(m.xv, m.yv, indexing="ij")
        errs.append(max(np.abs(sol.u - Ue(Xu, Yu)).max(), np.abs(sol.v - Ve(Xv, Yv)).max()))
    return errs


def _euler_mms_errors():
    pd = default_problem(1e-3)
    L, errs = 0.1, []
    for n in (17, 33, 65, 129):
        xs = np.linspace(0, L, n)
        z = np.linspace(0, 20, 4 * (n - 1) + 1)
        X, Z = np.meshgrid(xs, z, indexing="ij")
        q = pd.u_e0(z, 2) / pd.u_e0(z)
        ws = np.sin(np.pi * X / L) * Z**2 * np.exp(-Z)
        lap = -(np.pi / L) ** 2 * ws + np.sin(np.pi * X / L) * (2 - 4 * Z + Z**2) * np.exp(-Z)
        w, _ = solve_dirichlet(xs, z, q, -lap + q[None, :] * ws)
        errs.append(np.abs(w - ws).max())
    return errs


def _prandtl_self_convergence():
    pd = default_problem(1e-3)
    vals = []
    for nx, ny in ((9, 65), (17, 129), (33, 257), (65, 513)):
        g = make_grid(0.1, 16.0, nx, ny)
        j = int(np.argmin(abs(g.y_nodes - 1.0)))
        vals.append(march_prandtl0(pd, g).u_p0[(nx - 1) // 2, j])
    return orders(np.abs(np.diff(vals)))


def test_criterion_7_manufactured_convergence(verdict):
    t0 = time.perf_counter()
    eu = orders(_euler_mms_errors())
    st = orders(_stokes_mms_errors())
    pr = _prandtl_self_convergence()
    dt = time.perf_counter() - t0
    # the march is second order (BDF2 in x, centred in eta)
    ok = eu.min() >= 1.8 and st.min() >= 1.8 and pr.min() >= 1.8 and dt < 300
    verdict(7, ok, f"euler orders={np.round(eu, 2).tolist()} stokes orders={np.round(st, 2).tolist()} "
                   f"prandtl self-conv orders={np.round(pr, 2).tolist()} time={dt:.1f}s")


def test_criterion_8_divergence_free(verdict, sweep):
    pd = default_problem(1e-3)
    div = []
    for nx, ny in ((33, 129), (65, 257)):
        g = make_grid(0.1, 20.0, nx, ny, "tanh(3)")
        c = build_profiles(pd, g, sources=False).corr
        div.append(float(np.max(np.abs(g.dx(c.u_p1) + g.dy(c.v_p1)))))
    order = float(orders(div)[0])
    recs = sweep[0]["records"]
    mac_div = max(r["remainder_divergence"] for r in recs)
    tol_linear = pd.tolerances.tol_linear
    ok = order >= 1.8 and mac_div <= tol_linear and all(np.isfinite(r["div_p1"]) for r in recs)
    verdict(8, ok, f"div(u_p1,v_p1)={['%.2e' % d for d in div]} order={order:.2f} "
                   f"sweep div_p1 max={max(r['div_p1'] for r in recs):.2e} "
                   f"MAC divergence max={mac_div:.2e}")


def test_criterion_9_corollary_surrogate(verdict, sweep):
    rep = sweep[0]
    cor = rep["corollary"]
    recs = rep["records"]
    marked = all(r.get("iterate_status") in ("converged", "diverged", "max_iter") for r in recs)
    if cor["status"] != "ok":
        # divergence is data: reported with an explicit marker
        verdict(9, marked and bool(cor.get("notice")),
                f"skipped: {cor.get('notice')} diverged eps={cor.get('diverged_eps')}")
        return
    slope = cor["u_fit"]["slope"]
    ok = marked and slope >= 0.4 and cor["max_contraction"] <= 0.9
    verdict(9, ok, f"u-slope={slope:.3f} v-slope={cor['v_fit']['slope']:.3f} "
                   f"max contraction={cor['max_contraction']:.4f} converged={cor['converged_count']}")
