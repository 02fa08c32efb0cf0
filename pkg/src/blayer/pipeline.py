"""Profile construction chain for one viscosity value."""
from __future__ import annotations

import logging
from dataclasses import dataclass

from .data import compat_check, enforce_corner_compatibility, enforce_inflow_compatibility
from .euler1 import EulerSampler, solve_euler_corrector
from .prandtl0 import march_prandtl0
from .prandtl1 import layer_fields, solve_prandtl1

log = logging.getLogger(__name__)


@dataclass
class Profiles:
    pd: object
    grid: object
    layer0: object
    euler: object
    sampler: object
    lf: object
    corr: object
    compat: dict


def inflow_targets(pd, layer0, euler):
    """Wall value and curvature of ``ubar1`` required at the leading corner.

    The corrector equation at ``y = 0`` gives
    ``u_pyy(x, 0) = -u_e u_ex^1(x, 0) + u_ez^0(0) v_p^0(x, 0)``; together with
    ``u_p(0, 0) = -u_b^1(0)`` these are the conditions for a corrector that
    is smooth at the corner.
    """
    sampler = EulerSampler(euler)
    uex = float(sampler.wall("u_x")[0])
    return (-float(pd.ub1(0.0)),
            -pd.u_e * uex + float(pd.u_e0(0.0, 1)) * float(layer0.v_p0[0, 0]))


def build_profiles(pd, grid, Zmax=10.0, nz=513, top="free", include_euler_p2=False,
                   sources=True, march_kw=None) -> Profiles:
    """Leading layer, Euler corrector and first-order layer on ``grid``.

    With ``pd.auto_compat`` the corner values of the Euler traces and the
    wall value and curvature of ``ubar1`` are adjusted before use; the
    adjusted data are returned in ``Profiles.pd``.
    """
    layer0 = march_prandtl0(pd, grid, **(march_kw or {}))
    if pd.auto_compat:
        pd = enforce_corner_compatibility(pd, layer0)
    m0, mL, ok = compat_check(pd, layer0)
    euler = solve_euler_corrector(pd, layer0, Zmax=Zmax, nz=nz)
    target0, target2 = inflow_targets(pd, layer0, euler)
    if pd.auto_compat:
        pd = enforce_inflow_compatibility(pd, target0, target2)
    compat = {"corner_inflow": m0, "corner_outflow": mL, "corner_ok": bool(ok),
              "ubar1_wall_gap": abs(float(pd.ubar1(0.0)) - target0),
              "ubar1_curvature_gap": abs(float(pd.ubar1(0.0, 2)) - target2)}
    sampler = EulerSampler(euler)
    lf = layer_fields(pd, layer0, sampler)
    corr = solve_prandtl1(pd, layer0, lf, top=top, include_euler_p2=include_euler_p2,
                          sources=sources)
    return Profiles(pd, grid, layer0, euler, sampler, lf, corr, compat)
