from dataclasses import replace

import numpy as np
import pytest

from blayer.data import Profile, default_problem, trivial_problem
from blayer.errors import PreconditionError
from blayer.grid import make_grid
from blayer.prandtl0 import (check_max_principle, march_prandtl0, source_F, weighted_norm_values,
                             weighted_norms)


@pytest.fixture(scope="module")
def layer(small_grid):
    return march_prandtl0(default_problem(1e-3), small_grid)


def test_trivial_layer_vanishes(small_grid):
    l0 = march_prandtl0(trivial_problem(1e-3), small_grid)
    assert np.abs(l0.u_p0).max() == 0 and np.abs(l0.v_p0).max() == 0
    assert np.abs(l0.w_shift).max() == 0
    assert check_max_principle(l0) == 0


def test_source_vanishes_without_mismatch():
    F, F_eta = source_F(np.linspace(0, 5, 11), 2.0, 2.0)
    assert np.all(F == 0) and np.all(F_eta == 0)


def test_wall_trace_and_decay(layer):
    assert np.allclose(layer.u_p0[:, 0], 1.7 - 2.0, atol=1e-12)
    assert np.abs(layer.u_p0[:, -1]).max() <= 1e-6


def test_max_principle(layer):
    assert check_max_principle(layer) >= -1e-8


def test_vp0_is_tail_integral(layer):
    g = layer.grid
    # v_p0 is the upper tail integral of u_px0: cell differences match trapezoid areas
    y = g.y_nodes
    dv = np.diff(layer.v_p0, axis=1)
    area = 0.5 * (layer.u_px0[:, 1:] + layer.u_px0[:, :-1]) * np.diff(y)[None, :]
    assert np.abs(dv + area).max() <= 1e-10
    assert np.abs(layer.v_p0[:, -1]).max() <= 1e-8


def test_closed_form_weighted_norm():
    # w = exp(-eta): int w(L)^2 = 1/2 and int_0^L int w_eta^2 = L/2
    L = 0.1
    x = np.linspace(0, L, 5)
    eta = np.linspace(0, 40, 40001)
    w = np.ones_like(x)[:, None] * np.exp(-eta)[None, :]
    assert weighted_norm_values(eta, x, w, 0, 0) == pytest.approx((1 + L) / 2, abs=1e-6)
    assert weighted_norm_values(eta, x, 0 * w, 0, 1) == 0


def test_weighted_norm_refinement_stable():
    pd = default_problem(1e-3)
    vals = [weighted_norms(march_prandtl0(pd, make_grid(0.1, 20, n, 2 * n + 127)), 0, 0)
            for n in (17, 33)]
    assert abs(vals[1] - vals[0]) <= 0.02 * abs(vals[1])


def test_rejects_bad_speeds(small_grid):
    with pytest.raises(PreconditionError):
        march_prandtl0(replace(default_problem(), u_b=-1.0), small_grid)
    with pytest.raises(PreconditionError):
        march_prandtl0(replace(default_problem(), ubar0=Profile.from_expr("-3*exp(-y**2)")), small_grid)


def test_oscillatory_inflow_reports_margin(small_grid):
    pd = replace(default_problem(), ubar0=Profile.from_expr("-0.3*exp(-y)*cos(6*y)"))
    margin = check_max_principle(march_prandtl0(pd, small_grid))
    assert np.isfinite(margin)


def test_euler_scheme_first_order_difference():
    pd = default_problem(1e-3)
    g = make_grid(0.1, 16, 9, 129)
    a = march_prandtl0(pd, g, scheme="euler").u_p0
    b = march_prandtl0(pd, g, scheme="bdf2").u_p0
    assert np.abs(a - b).max() < 1e-4


def test_inflow_minimum_is_not_grid_biased(small_grid):
    # true minimum of u_e + ubar0 lies between samples; the bound must not overshoot it
    pd = replace(default_problem(), ubar0=Profile.from_expr("-0.3*exp(-y/3.027494) - 0.114271*y*exp(-y)"))
    l0 = march_prandtl0(pd, small_grid)
    y = np.linspace(0, 20, 2_000_001)
    true_min = min(pd.u_b, float(np.min(2.0 + pd.ubar0(y))))
    assert l0.inflow_min <= true_min + 1e-12
