import numpy as np
import pytest

from blayer.data import default_chi
from blayer.grid import make_grid
from blayer.prandtl1 import apply_cutoff, build_pressure2, positivity_eigenvalue


def test_trivial_layer_vanishes(trivial_profiles):
    c = trivial_profiles.corr
    assert np.abs(c.seed_v0).max() == 0 and np.abs(c.seed_vx0).max() == 0
    assert np.abs(c.u_p).max() == 0 and np.abs(c.v_p).max() == 0
    assert np.abs(c.p_p2).max() == 0


@pytest.fixture(scope="module")
def corr(default_profiles):
    return default_profiles.corr


def test_boundary_data(corr, default_profiles):
    P = default_profiles
    y = P.grid.y_nodes
    assert np.allclose(corr.u_p[0], P.pd.ubar1(y), atol=1e-10)
    assert np.allclose(corr.u_p[:, 0], -P.lf.wall["ue1"], atol=1e-10)
    assert np.abs(corr.v_p[:, 0]).max() <= 1e-14
    assert np.abs(corr.u_p[:, -1]).max() <= 1e-6


def test_march_consistency(corr):
    d = corr.diagnostics
    assert d["min_eig"] > 0
    assert d["seed_gap_v0"] <= 1e-2 * max(d["sup_v_p"], 1e-12)
    assert d["march_recovery_gap"] <= 1e-2 * max(d["sup_u_p"], 1e-12)


def test_cutoff_support(corr):
    g = corr.grid
    eps = 0.01                      # sqrt(eps) * Ymax = 2, so the cut is inside the grid
    u1, v1 = apply_cutoff(g, eps, default_chi(), corr.u_p, corr.v_p)
    outside = np.sqrt(eps) * g.y_nodes >= 1.0
    assert outside.any()
    assert np.all(u1[:, outside] == 0) and np.all(v1[:, outside] == 0)
    assert np.allclose(u1[:, 0], corr.u_p[:, 0], atol=1e-14)


def test_cutoff_preserves_divergence():
    # analytic divergence-free pair; the cut pair stays divergence-free
    eps = 0.01
    g = make_grid(0.1, 20.0, 41, 4001, "uniform")
    X, Y = g.X, g.Y
    u = np.sin(3 * X) * np.exp(-Y)
    v = -3 * np.cos(3 * X) * (1 - np.exp(-Y))
    u1, v1 = apply_cutoff(g, eps, default_chi(), u, v)
    div = g.dx(u1) + g.dy(v1)
    assert np.abs(div[2:-2, 2:-2]).max() <= 1e-4 * np.abs(g.dy(v1)).max()


def test_positivity_eigenvalue_examples():
    y = np.linspace(0, np.pi, 801)
    assert positivity_eigenvalue(y, np.zeros_like(y)) == pytest.approx(1.0, rel=1e-5)
    assert positivity_eigenvalue(y, np.full_like(y, 0.5)) == pytest.approx(1.5, rel=1e-5)


def test_pressure_tail_manufactured():
    g = make_grid(0.1, 30.0, 3, 6001, "uniform")

    class LF:
        grid = g

    p = build_pressure2(LF, integrand=np.exp(-g.Y))
    assert np.abs(p - np.exp(-g.Y)).max() <= 5e-6
