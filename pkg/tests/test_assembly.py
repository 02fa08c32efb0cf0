from dataclasses import replace

import numpy as np
import pytest

from blayer.assembly import (BUDGET_KEYS, CLAIMED_EXPONENTS, assemble, budget, euler_only_norm,
                             residual_report, residuals)


def test_trivial_data_leaves_pure_outer_residual(trivial_profiles):
    P = trivial_profiles
    rep = residual_report(P.pd, P.lf, P.corr, P.sampler)
    for name in ("up0", "ue1", "up1", "vp0", "ve1", "vp1", "pe1", "pp2"):
        assert np.abs(assemble(P.pd, P.lf, P.corr).parts[name]).max() == 0
    ref = euler_only_norm(P.pd, P.grid)
    assert rep.combined == pytest.approx(ref, rel=1e-3)


def test_wall_value(default_approx, default_profiles):
    assert np.allclose(default_approx.u_app[:, 0], default_profiles.pd.u_b, atol=1e-9)


def test_recomposition(default_approx):
    a, se = default_approx, np.sqrt(default_approx.eps)
    p = a.parts
    assert np.array_equal(a.u_app, p["ue0"] + p["up0"] + se * (p["ue1"] + p["up1"]))
    assert np.array_equal(a.v_app, p["vp0"] + p["ve1"] + se * p["vp1"])
    assert np.allclose(a.p_app, se * p["pe1"] + a.eps * p["pp2"])


def test_combined_identity(default_profiles):
    P = default_profiles
    rep = residual_report(P.pd, P.lf, P.corr, P.sampler)
    assert rep.combined == pytest.approx(rep.norm_Ru + np.sqrt(rep.eps) * rep.norm_Rv, rel=1e-14)
    d = rep.as_dict()
    assert d["claimed_exponents"] == CLAIMED_EXPONENTS
    assert set(BUDGET_KEYS) <= set(d["budget"])


def test_budget_non_negative(default_profiles):
    P = default_profiles
    b = budget(P.pd, P.lf, P.corr, P.sampler)
    assert all(np.isfinite(v) and v >= 0 for v in b.values())


def test_residuals_vanish_for_exact_flow(default_approx):
    # uniform flow with constant pressure is an exact solution
    a = default_approx
    exact = replace(a, u_app=np.full_like(a.u_app, 1.3), v_app=np.zeros_like(a.v_app),
                    p_app=np.full_like(a.p_app, 0.2))
    Ru, Rv = residuals(exact)
    assert np.abs(Ru).max() <= 1e-9 and np.abs(Rv).max() <= 1e-9
