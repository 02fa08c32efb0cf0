import numpy as np
import pytest
import sympy as sym
from hypothesis import given, settings
from hypothesis import strategies as st

import blayer.remainder as rem
from blayer.assembly import assemble, residuals
from blayer.data import default_problem
from blayer.errors import DivergenceError, PreconditionError
from blayer.grid import make_grid
from blayer.pipeline import build_profiles
from blayer.remainder import (LinearizedOperator, RemainderSolution, ShearBackground,
                              energy_check, low_vy_constant, low_vy_sides, make_mac_grid,
                              nonlinear_iterate, positivity_form, random_forcing,
                              shear_background, solve_linearized, vorticity_check, x_norm)

EPS = 1e-3


@pytest.fixture(scope="module")
def bg(default_approx):
    return shear_background(default_approx)


@pytest.fixture(scope="module")
def mac():
    return make_mac_grid(0.1, 20.0, 16, 128)


@pytest.fixture(scope="module")
def op(bg, mac):
    return LinearizedOperator(bg, mac, EPS)


def zero_forcing(X, Y):
    return np.zeros_like(X)


def test_zero_forcing_gives_zero(op, bg):
    sol = op.solve(zero_forcing, zero_forcing)
    assert np.abs(sol.u).max() == 0 and np.abs(sol.v).max() == 0 and np.abs(sol.p).max() == 0
    assert x_norm(sol, EPS, 0.2).value == 0
    assert energy_check(sol, bg)["pass"] and vorticity_check(sol, bg)["pass"]


def test_background_invariants(bg):
    assert bg.min_us > 0
    g = make_grid(0.1, 20.0, 5, 9)
    with pytest.raises(PreconditionError):
        ShearBackground.from_arrays(g, EPS, np.full(g.shape, -1.0), np.zeros(g.shape))


def test_solution_invariants(op, mac, rng):
    f, g = random_forcing(mac, rng, eps=EPS)
    sol = op.solve(f, g)
    d = sol.diagnostics
    assert sol.diagnostics["solve_residual"] <= 1e-9
    assert d["max_divergence"] <= 1e-9
    # the outflow traces are extrapolated diagnostics; they are reported and flagged
    assert np.isfinite(d["outflow_normal_stress"]) and np.isfinite(d["outflow_shear_stress"])
    assert d["outflow_flagged"] == (max(d["outflow_normal_stress"], d["outflow_shear_stress"]) > 1e-6)
    assert d["outflow_normal_stress"] <= 5e-2 * np.abs(sol.p).max()
    assert d["corner_margin_cells"] == 2
    xn = x_norm(sol, EPS, 0.2)
    for part in (xn.grad_u, xn.grad_v, xn.sup_u, xn.sup_v):
        assert xn.value >= part >= 0


def test_linearity(op, mac, rng):
    f1, g1 = random_forcing(mac, rng, eps=EPS)
    f2, g2 = random_forcing(mac, rng, eps=EPS)
    a, b = op.solve(f1, g1), op.solve(f2, g2)
    c = op.solve(lambda X, Y: f1(X, Y) + f2(X, Y), lambda X, Y: g1(X, Y) + g2(X, Y))
    scale = np.abs(c.u).max() + np.abs(c.v).max()
    assert np.abs(c.u - a.u - b.u).max() <= 1e-8 * scale
    assert np.abs(c.v - a.v - b.v).max() <= 1e-8 * scale


def test_x_norm_sup_term_by_hand():
    m = make_mac_grid(1.0, 1.0, 8, 8)
    sol = RemainderSolution(m, 1e-2, np.ones(m.u_shape()), np.zeros(m.v_shape()),
                            np.zeros((m.nx, m.ny)))
    assert x_norm(sol, 1e-2, 0.2).sup_u == pytest.approx(1e-2 ** 0.1, rel=1e-14)


def _manufactured():
    x, y = sym.symbols("x y")
    L, H, eps = 1.0, 2.0, 0.05
    us = 1.5 - 0.5 * sym.exp(-y) + 0.2 * x
    vs = 0.1 * y * sym.exp(-y) * (1 + x)
    psi = x**2 * (L - x) ** 3 * sym.sin(sym.pi * y / H) ** 2
    u, v = sym.diff(psi, y), -sym.diff(psi, x)
    p = 2 * eps * sym.diff(u, x) + (x - L) * sym.cos(y) * (1 + x)
    d = sym.diff
    f = us * d(u, x) + u * d(us, x) + vs * d(u, y) + v * d(us, y) + d(p, x) - (d(u, y, 2) + eps * d(u, x, 2))
    g = us * d(v, x) + u * d(vs, x) + vs * d(v, y) + v * d(vs, y) + d(p, y) / eps - (d(v, y, 2) + eps * d(v, x, 2))

    def lam(e):
        return sym.lambdify((x, y), e, "numpy")

    funcs = {"u": lam(us), "u_x": lam(d(us, x)), "u_y": lam(d(us, y)), "u_yy": lam(d(us, y, 2)),
             "v": lam(vs), "v_x": lam(d(vs, x)), "v_y": lam(d(vs, y))}
    bg = ShearBackground.from_functions(make_grid(L, H, 9, 9), eps, funcs)
    return L, H, eps, bg, lam(f), lam(g), lam(u), lam(v)


def test_manufactured_second_order():
    L, H, eps, bg, F, G, Ue, Ve = _manufactured()
    errs = []
    for n in (16, 32, 64):
        m = make_mac_grid(L, H, n, n)
        sol = solve_linearized(bg, F, G, eps, m)
        Xu, Yu = np.meshgrid(m.xu, m.yu, indexing="ij")
        Xv, Yv = np.meshgrid(m.xv, m.yv, indexing="ij")
        errs.append(max(np.abs(sol.u - Ue(Xu, Yu)).max(), np.abs(sol.v - Ve(Xv, Yv)).max()))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.7)


def test_energy_and_vorticity_random_battery(op, bg, mac):
    rng = np.random.default_rng(11)
    for _ in range(10):
        f, g = random_forcing(mac, rng, eps=EPS)
        sol = op.solve(f, g)
        assert energy_check(sol, bg, 10.0)["pass"]
        assert vorticity_check(sol, bg, 20.0)["pass"]


def test_energy_ratio_decreases_with_L():
    worst = []
    for L in (0.2, 0.1, 0.05):
        P = build_profiles(default_problem(EPS, L), make_grid(L, 20.0, 33, 257, "tanh(3)"),
                           sources=False)
        bg = shear_background(assemble(P.pd, P.lf, P.corr))
        m = make_mac_grid(L, 20.0, 16, 128)
        op = LinearizedOperator(bg, m, EPS)
        rng = np.random.default_rng(7)
        worst.append(max(energy_check(op.solve(*random_forcing(m, rng, eps=EPS)), bg)["ratio"]
                         for _ in range(10)))
    assert worst[0] >= worst[1] >= worst[2]


def test_positivity_zero_field():
    y = np.linspace(0, 5, 51)
    r = positivity_form(np.zeros_like(y), y, 1 + np.exp(-y), np.exp(-y))
    assert r["Q_direct"] == 0 and r["Q_factored"] == 0
    with pytest.raises(PreconditionError):
        positivity_form(np.zeros_like(y), y, -np.ones_like(y), np.zeros_like(y))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.floats(0.2, 3.0))
def test_factored_form_is_sum_of_squares(coef, c):
    y = np.linspace(0, 4, 41)
    v = sum(a * np.sin((k + 1) * np.pi * y / 4) for k, a in enumerate(coef))
    us = 1.5 - np.exp(-c * y)
    r = positivity_form(v, y, us, -c**2 * np.exp(-c * y))
    assert r["Q_factored"] >= 0
    # constant background: the two forms coincide exactly
    flat = positivity_form(v, y, np.full_like(y, c), np.zeros_like(y))
    assert flat["Q_direct"] == pytest.approx(flat["Q_factored"], rel=1e-12, abs=1e-14)


def test_positive_background_eigenvalue(bg):
    y = np.linspace(0, 20, 129)
    us = bg.at("u", [0.05], y)[0]
    uyy = bg.at("u_yy", [0.05], y)[0]
    assert positivity_form(np.sin(np.pi * y / 20), y, us, uyy)["min_eig"] > 0


def test_low_vy_constant(bg, rng):
    K = low_vy_constant(bg)
    assert np.isfinite(K) and K >= 2
    y = np.linspace(0, 20, 257)
    us = bg.at("u", [0.05], y)[0]
    for _ in range(20):
        a = rng.standard_normal(4)
        v = sum(a[k] * np.sin((k + 1) * np.pi * y / 20) for k in range(4))
        lhs, rhs = low_vy_sides(v, y, us)
        assert lhs <= K * rhs


def test_random_forcing_deterministic(mac):
    a = random_forcing(mac, np.random.default_rng(3), eps=EPS)
    b = random_forcing(mac, np.random.default_rng(3), eps=EPS)
    X, Y = np.meshgrid(mac.xu, mac.yu, indexing="ij")
    assert np.array_equal(a[0](X, Y), b[0](X, Y)) and np.array_equal(a[1](X, Y), b[1](X, Y))


def test_zero_residual_converges_in_one_iteration(default_approx, bg, mac):
    z = np.zeros(default_approx.grid.shape)
    r = nonlinear_iterate(default_approx, z, z, bg, mac)
    assert r.converged and len(r.trace) == 1
    assert np.abs(r.solution.u).max() == 0


def test_iteration_rejects_large_exponents(default_approx, bg, mac):
    z = np.zeros(default_approx.grid.shape)
    with pytest.raises(PreconditionError):
        nonlinear_iterate(default_approx, z, z, bg, mac, gamma=0.2, kappa=0.05)


def test_iteration_contracts_at_moderate_eps(mac):
    P = build_profiles(default_problem(1e-2), make_grid(0.1, 20.0, 33, 257, "tanh(3)"),
                       sources=False)
    approx = assemble(P.pd, P.lf, P.corr)
    Ru, Rv = residuals(approx)
    r = nonlinear_iterate(approx, Ru, Rv, shear_background(approx), mac)
    assert r.converged
    assert r.contraction <= 0.9
    assert r.consistency <= 1e-7
    assert np.isfinite(r.trace[-1]["x_norm"])


def test_divergence_is_reported(default_approx, bg, mac, monkeypatch):
    growing = iter(2.0**k for k in range(100))
    monkeypatch.setattr(rem, "_difference_norm", lambda a, b, gamma: next(growing))
    Ru = np.ones(default_approx.grid.shape)
    with pytest.raises(DivergenceError) as info:
        nonlinear_iterate(default_approx, Ru, Ru, bg, mac)
    assert len(info.value.trace) == 4
    assert "smaller L" in str(info.value)
