"""First-order Prandtl corrector.

The corrector ``(u_p, v_p)`` solves the linearised layer equation

    u0 u_px + u_p u0_x + v_p u0_y + V u_py - u_pyy = F_p - p_px,
    u_px + v_py = 0,

with ``u0 = u_e^0(sqrt(eps) y) + u_p^0``, ``V = v_p^0 + v_e^1`` and the
source ``F_p`` built from the leading layer and the Euler corrector.  The
data are ``u_p(0, y) = ubar1(y)``, ``u_p(x, 0) = -u_e^1(x, 0)``,
``v_p(x, 0) = 0`` and decay of ``u_p``.

The march uses a box scheme centred at ``x_{n+1/2}``: the momentum
equation is averaged between the two x levels and the continuity equation
is imposed at half nodes in y, so ``v`` lives naturally at half steps in
x.  Every step is one sparse solve.  The v-form of the problem (the fourth
order equation with sources ``f``, ``g``) is evaluated afterwards as a
consistency diagnostic, and the positivity of the operator
``-d_yy + u0_yy / u0`` is checked at every step.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh
from scipy.sparse.linalg import spsolve

from .errors import ConfigurationError, PreconditionError, SolverError
from .grid import Grid2D, cumulative, tail_integral, trapezoid_weights

log = logging.getLogger(__name__)


@dataclass
class LayerFields:
    """Zeroth-order layer and Euler fields sampled on the (x, y) grid.

    Euler quantities are evaluated at ``z = sqrt(eps) y``; z-derivatives are
    taken in z (so ``v_ez`` is ``dv_e/dz``, not ``dv_e/dy``).
    """

    grid: Grid2D
    eps: float
    f: dict = field(default_factory=dict)
    wall: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.f[key]


def layer_fields(pd, layer0, sampler) -> LayerFields:
    """Collect every background field the corrector and the residuals need."""
    g = layer0.grid
    eps = pd.eps
    se = np.sqrt(eps)
    y = g.y_nodes
    z = se * y
    if z[-1] > sampler.e.z[-1] * (1 + 1e-12):
        raise ConfigurationError(
            f"sqrt(eps)*Ymax = {z[-1]:.4g} exceeds the Euler height {sampler.e.z[-1]:.4g}")
    ones = np.ones(g.nx)[:, None]
    f = {}
    f["ue0"] = ones * pd.u_e0(z)[None, :]
    f["ue0_z"] = ones * pd.u_e0(z, 1)[None, :]
    f["ue0_zz"] = ones * pd.u_e0(z, 2)[None, :]
    f["ue0_zzz"] = ones * pd.u_e0(z, 3)[None, :]
    up = layer0.u_p0
    f["up0"] = up
    f["up0_x"] = g.dx(up)
    f["up0_xx"] = g.dxx(up)
    f["up0_y"] = g.dy(up)
    f["up0_yy"] = g.dyy(up)
    f["up0_xy"] = g.dy(f["up0_x"])
    f["vp0"] = layer0.v_p0
    f["vp0_x"] = g.dx(layer0.v_p0)
    f["vp0_y"] = g.dy(layer0.v_p0)
    f["vp0_yy"] = g.dyy(layer0.v_p0)
    for name in ("u", "v", "p"):
        f[f"{name}e1"] = sampler.sample(name, y)
        f[f"{name}e1_z"] = sampler.sample(name, y, 1)
        f[f"{name}e1_zz"] = sampler.sample(name, y, 2)
    for name in ("u", "v"):
        f[f"{name}e1_x"] = sampler.sample(f"{name}_x", y)
        f[f"{name}e1_xz"] = sampler.sample(f"{name}_x", y, 1)
        f[f"{name}e1_xx"] = sampler.sample(f"{name}_xx", y)
    f["pe1_x"] = g.dx(f["pe1"])
    # composite leading-order state
    f["u0"] = f["ue0"] + up
    f["u0_x"] = f["up0_x"]
    f["u0_y"] = f["up0_y"] + se * f["ue0_z"]
    f["u0_yy"] = f["up0_yy"] + eps * f["ue0_zz"]
    f["u0_xy"] = f["up0_xy"]
    f["V"] = layer0.v_p0 + f["ve1"]
    ue1_wall = sampler.wall("u")
    wall = {"ue1": ue1_wall, "ue1_x": sampler.wall("u_x"), "ue1_xx": sampler.wall("u_xx")}
    Y = g.Y
    f["Fp"] = (-f["ue0_z"] * (Y * f["up0_x"] + f["vp0"]) - Y * f["ve1_z"] * f["up0_y"]
               - f["ue1"] * f["up0_x"] - up * f["ue1_x"])
    return LayerFields(g, eps, f, wall)


def source_Fp_terms(lf: LayerFields):
    """The four products that make up ``F_p``, for term-level checks."""
    f, Y = lf.f, lf.grid.Y
    return {
        "euler_shear": -f["ue0_z"] * (Y * f["up0_x"] + f["vp0"]),
        "euler_strain": -Y * f["ve1_z"] * f["up0_y"],
        "advect_ue1": -f["ue1"] * f["up0_x"],
        "advect_up0": -f["up0"] * f["ue1_x"],
    }


# ---------------------------------------------------------------- seeds

def boundary_seed(lf: LayerFields, ubar1):
    """``v_p(0, y)`` and ``v_px(0, y)`` from the inflow trace ``ubar1``.

    With ``psi = int_0^y ubar1`` and ``w = u0 psi_y - u0_y psi`` the layer
    equation gives ``w_x`` explicitly; inverting ``psi = u0 int w / u0^2``
    yields ``v_p = -psi_x`` and, after one more x-derivative,
    ``v_px = -psi_xx``.
    """
    g = lf.grid
    y = g.y_nodes
    f = lf.f
    u0, u0_x, u0_y = f["u0"][0], f["u0_x"][0], f["u0_y"][0]
    if np.min(u0) <= 0:
        raise PreconditionError("u0 must be positive at x = 0")
    u0_xx = f["up0_xx"][0]
    u0_xy = f["u0_xy"][0]
    u0_xxy = g.dy(f["up0_xx"])[0]
    V = f["V"][0]
    V_x = g.dx(f["V"])[0]
    Fp = f["Fp"]
    Fp0, Fpx0 = Fp[0], g.dx(Fp)[0]

    def d1(a):
        return g.dy(a[None, :])[0]

    def d2(a):
        return g.dyy(a[None, :])[0]

    up = ubar1(y)
    psi = cumulative(up, y)
    w = u0 * up - u0_y * psi
    w_x = -u0_xy * psi - V * d1(up) + d2(up) + Fp0
    I = cumulative(w / u0**2, y)
    I_x = cumulative(w_x / u0**2 - 2.0 * w * u0_x / u0**3, y)
    psi_x = u0_x * I + u0 * I_x
    seed_v0 = -psi_x
    # second x-derivative: u_px(0, y) = psi_xy
    upx = d1(psi_x)
    w_xx = (-u0_xxy * psi - u0_xy * psi_x - V_x * d1(up) - V * d1(upx)
            + d2(upx) + Fpx0)
    I_xx = cumulative(w_xx / u0**2 - 4.0 * w_x * u0_x / u0**3 - 2.0 * w * u0_xx / u0**3
                      + 6.0 * w * u0_x**2 / u0**4, y)
    psi_xx = u0_xx * I + 2.0 * u0_x * I_x + u0 * I_xx
    return seed_v0, -psi_xx


# ---------------------------------------------------------------- march

def positivity_eigenvalue(y, q):
    """Smallest eigenvalue of ``-d_yy + q`` on ``{v(0) = v(N) = 0}``.

    Piecewise-linear stiffness with lumped mass; the generalised problem
    ``K v = lambda W v`` is symmetric so a dense ``eigh`` is exact.
    """
    h = np.diff(y)
    n = y.size - 2
    main = 1.0 / h[:-1] + 1.0 / h[1:]
    off = -1.0 / h[1:-1]
    w = trapezoid_weights(y)[1:-1]
    K = np.diag(main + w * q[1:-1]) + np.diag(off, 1) + np.diag(off, -1)
    if n == 0:
        return np.inf
    return float(eigh(K, np.diag(w), eigvals_only=True, subset_by_index=[0, 0])[0])


def _stencils(y):
    """Three-point first and second derivative weights at interior nodes."""
    hm, hp = np.diff(y)[:-1], np.diff(y)[1:]
    d1 = np.stack([-hp / (hm * (hm + hp)), (hp - hm) / (hm * hp), hm / (hp * (hm + hp))], 1)
    d2 = np.stack([2.0 / (hm * (hm + hp)), -2.0 / (hm * hp), 2.0 / (hp * (hm + hp))], 1)
    return d1, d2


@dataclass
class MarchResult:
    U: np.ndarray             # (nx, ny) u_p at x nodes
    V_half: np.ndarray        # (nx-1, ny) v_p at x_{n+1/2}
    P_half: np.ndarray        # (nx-1,) pressure gradient (zero unless clamped)
    min_eig: np.ndarray       # (nx-1,) positivity eigenvalue per step


def march_corrector(lf: LayerFields, ubar1, top="free", check_every=1) -> MarchResult:
    """Box-scheme march of the corrector on the grid's x nodes.

    Parameters
    ----------
    top : {"free", "clamped"}
        ``"free"`` leaves ``v`` free at ``y = Ymax`` (natural for a decaying
        ``u_p``); ``"clamped"`` sets ``v(Ymax) = 0`` and solves for a
        spatially constant pressure gradient, as in the truncated problem
        with ``[v, v_y] = 0`` at the top.
    check_every : int
        Positivity eigenvalue computed every ``check_every`` steps.
    """
    if top not in ("free", "clamped"):
        raise ConfigurationError("top must be 'free' or 'clamped'")
    g = lf.grid
    x, y = g.x_nodes, g.y_nodes
    N = y.size - 1
    f = lf.f
    d1, d2 = _stencils(y)
    dy = np.diff(y)
    nunk = 2 * (N + 1) + (1 if top == "clamped" else 0)
    iU = lambda j: 2 * j          # noqa: E731
    iV = lambda j: 2 * j + 1      # noqa: E731
    iP = 2 * (N + 1)
    U = np.empty(g.shape)
    U[0] = ubar1(y)
    U[0, 0] = -lf.wall["ue1"][0]
    Vh = np.zeros((g.nx - 1, N + 1))
    Ph = np.zeros(g.nx - 1)
    eigs = np.full(g.nx - 1, np.nan)
    J = np.arange(1, N)
    for n in range(g.nx - 1):
        h = x[n + 1] - x[n]
        mid = {k: 0.5 * (f[k][n] + f[k][n + 1]) for k in ("u0", "u0_x", "u0_y", "V", "Fp")}
        if np.min(mid["u0"]) <= 0:
            raise PreconditionError("u0 must stay positive")
        if check_every and n % check_every == 0:
            q = 0.5 * (f["u0_yy"][n + 1] / f["u0"][n + 1] + f["u0_yy"][n] / f["u0"][n])
            eigs[n] = positivity_eigenvalue(y, q)
            if eigs[n] <= 0:
                raise SolverError("positivity of -d_yy + u0_yy/u0 lost", x=x[n], residual=eigs[n])
        rows, cols, vals = [], [], []
        rhs = np.zeros(nunk)

        def add(r, c, v):
            rows.append(r)
            cols.append(c)
            vals.append(v)

        Un = U[n]
        # boundary rows
        add(iU(0), iU(0), 1.0)
        rhs[iU(0)] = -lf.wall["ue1"][n + 1]
        add(iV(0), iV(0), 1.0)
        add(iU(N), iU(N), 1.0)
        # momentum at interior nodes, stored in the U rows
        a = mid["u0"][J] / h
        cx, cy, Vm = mid["u0_x"][J], mid["u0_y"][J], mid["V"][J]
        op_coef = 0.5 * (Vm[:, None] * d1 - d2)      # action of (V d_y - d_yy)/2
        old = (a * Un[J] - 0.5 * cx * Un[J]
               - np.einsum("jk,jk->j", op_coef, np.stack([Un[J - 1], Un[J], Un[J + 1]], 1)))
        rhs[iU(J)] = old + mid["Fp"][J]
        for k, off in enumerate((-1, 0, 1)):
            for jj, r in enumerate(J):
                v = op_coef[jj, k] + ((a[jj] + 0.5 * cx[jj]) if off == 0 else 0.0)
                add(iU(r), iU(r + off), v)
        for jj, r in enumerate(J):
            add(iU(r), iV(r), cy[jj])
            if top == "clamped":
                add(iU(r), iP, 1.0)
        # continuity at half nodes, stored in the V rows 1..N
        for j in range(N):
            r = iV(j + 1)
            add(r, iV(j + 1), 1.0 / dy[j])
            add(r, iV(j), -1.0 / dy[j])
            add(r, iU(j), 0.5 / h)
            add(r, iU(j + 1), 0.5 / h)
            rhs[r] = 0.5 * (Un[j] + Un[j + 1]) / h
        if top == "clamped":
            add(iP, iV(N), 1.0)
        A = sp.csr_matrix((vals, (rows, cols)), shape=(nunk, nunk))
        sol = spsolve(A.tocsc(), rhs)
        if not np.all(np.isfinite(sol)):
            raise SolverError("corrector step failed", x=x[n + 1])
        res = float(np.linalg.norm(A @ sol - rhs) / max(np.linalg.norm(rhs), 1e-300))
        if res > 1e-8:
            raise SolverError("corrector step residual too large", x=x[n + 1], residual=res)
        U[n + 1] = sol[0:2 * (N + 1):2]
        Vh[n] = sol[1:2 * (N + 1):2]
        if top == "clamped":
            Ph[n] = sol[iP]
    return MarchResult(U, Vh, Ph, eigs)


def node_values(x, v_half, v_first):
    """Interpolate half-step values to the x nodes.

    Interior nodes use the average of the neighbouring half steps, the last
    node a linear extrapolation and the first node the supplied seed.
    """
    xh = 0.5 * (x[1:] + x[:-1])
    out = np.empty((x.size, v_half.shape[1]))
    out[0] = v_first
    for i in range(1, x.size):
        if i < x.size - 1:
            t = (x[i] - xh[i - 1]) / (xh[i] - xh[i - 1])
            out[i] = (1 - t) * v_half[i - 1] + t * v_half[i]
        else:
            t = (x[i] - xh[-2]) / (xh[-1] - xh[-2]) if x.size > 2 else 1.0
            out[i] = (1 - t) * v_half[-2] + t * v_half[-1] if x.size > 2 else v_half[-1]
    return out


def recover_up(grid: Grid2D, v_p, ubar1_values):
    """``u_p = ubar1 - int_0^x v_py``, the divergence-free recovery."""
    return ubar1_values[None, :] - cumulative(grid.dy(v_p), grid.x_nodes, axis=0)


def apply_cutoff(grid: Grid2D, eps, chi, u_p, v_p):
    """Cut-off layers ``(u_p^1, v_p^1)`` supported in ``sqrt(eps) y <= 1``."""
    s = np.sqrt(eps) * grid.y_nodes
    c, c1 = chi(s)[None, :], chi(s, 1)[None, :]
    inner = cumulative(u_p, grid.y_nodes, axis=1)
    return c * u_p + np.sqrt(eps) * c1 * inner, c * v_p


def pressure2_integrand(lf: LayerFields, include_euler=False):
    """Integrand of ``p_p^2``; the non-decaying Euler terms are optional."""
    f, eps = lf.f, lf.eps
    se = np.sqrt(eps)
    out = (f["u0"] * f["vp0_x"] + f["up0"] * f["ve1_x"] + f["V"] * f["vp0_y"] - f["vp0_yy"])
    if include_euler:
        out = out + se * f["V"] * f["ve1_z"] - eps * f["ve1_zz"]
    return out


def build_pressure2(lf: LayerFields, include_euler=False, integrand=None):
    """``p_p^2(x, y) = int_y^inf (integrand)`` with the exponential tail rule."""
    if integrand is None:
        integrand = pressure2_integrand(lf, include_euler)
    return tail_integral(integrand, lf.grid.y_nodes, axis=1)


# ---------------------------------------------------------------- v-form

def assemble_sources(lf: LayerFields, chi, u_p, v_p, printed_signs=False):
    """The sources ``f``, ``g`` of the v-form and every term of them.

    The lift uses ``y chi(y) u_ex^1(x, 0)``.  With ``printed_signs=False`` the
    ``v_ex^1 u_py / u0`` pair and the three lift terms carry the signs for
    which ``f_y + g`` equals the differentiated layer equation exactly;
    ``printed_signs=True`` keeps the printed signs.  Returns ``(f, g, terms)``.
    """
    sv = 1.0 if printed_signs else -1.0
    sl = 1.0 if printed_signs else -1.0
    g = lf.grid
    f = lf.f
    se = np.sqrt(lf.eps)
    Y = g.Y
    dx, dy, dyy = g.dx, g.dy, g.dyy
    inv = 1.0 / f["u0"]
    inv_x, inv_y = dx(inv), dy(inv)
    inv_xy, inv_yy = dy(inv_x), dyy(inv)
    inv_xyy = dyy(inv_x)
    u0_xy = f["u0_xy"]
    u0_xxy = dy(f["up0_xx"])
    V = f["V"]
    Fp = f["Fp"]
    Fp_y = dy(Fp)
    Fp_xy = dy(dx(Fp))
    up_y, up_yy = dy(u_p), dyy(u_p)
    up_x = dx(u_p)
    up_xy = dy(up_x)
    vp_yy = dyy(v_p)
    vex, vez, vexz = f["ve1_x"], f["ve1_z"], f["ve1_xz"]
    q = f["u0_yy"] * inv
    y = g.y_nodes
    chi_y = chi(y)[None, :]
    lift = Y * chi_y                                           # y chi(y)
    lift_yy = (2.0 * chi(y, 1) + y * chi(y, 2))[None, :]
    uex = lf.wall["ue1_x"][:, None]
    uexx = lf.wall["ue1_xx"][:, None]
    ft = {
        "upyy_inv_x": up_yy * inv_x,
        "upy_inv_xy": up_y * inv_xy,
        "V_inv_vpyy": V * inv * vp_yy,
        "vpyy_inv_y": 2.0 * vp_yy * inv_y,
        "vex_inv_upy": sv * vex * inv * up_y,
    }
    gt = {
        "inv_x_G": inv_x * (Fp_y - u_p * u0_xy - V * up_yy - se * vez * up_y),
        "vex_inv_y": -sv * dy(vex * inv) * up_y,
        "inv_Gx": inv * (Fp_xy - up_x * u0_xy - u_p * u0_xxy - f["vp0_x"] * up_yy
                         - se * vexz * up_y - se * vez * up_xy),
        "V_inv_y": -dy(V * inv) * vp_yy,
        "vpyy_inv_yy": -2.0 * vp_yy * inv_yy,
        "upyy_inv_xy": -2.0 * up_yy * inv_xy,
        "upxy_inv_yy": -up_xy * inv_yy,
        "upy_inv_xyy": -up_y * inv_xyy,
        "q_x_vp": -dx(q) * v_p,
        "lift_yy": -sl * lift_yy * uexx,
        "q_lift": sl * q * lift * uexx,
        "lift_inv_yy": sl * dyy(lift_yy * inv) * uex,
    }
    return sum(ft.values()), sum(gt.values()), {"f": ft, "g": gt}


def vform_mismatch(lf: LayerFields, chi, v_p, f_src, g_src, margin=2):
    """Relative mismatch of the fourth-order v-form on the computed corrector.

    ``-vb_xyy + (u0_yy/u0) vb_x + (vb_yy/u0)_yy`` against ``f_y + g`` with
    ``vb = v_p - y chi(y) u_ex^1(x, 0)``; a ``margin`` of nodes next to every
    boundary is excluded because the nested stencils are one-sided there.
    """
    g = lf.grid
    y = g.y_nodes
    vb = v_p - (y * chi(y))[None, :] * lf.wall["ue1_x"][:, None]
    vb_x = g.dx(vb)
    lhs = -g.dyy(vb_x) + lf["u0_yy"] / lf["u0"] * vb_x + g.dyy(g.dyy(vb) / lf["u0"])
    rhs = g.dy(f_src) + g_src
    s = (slice(margin, -margin), slice(margin, -margin))
    return float(np.linalg.norm((lhs - rhs)[s]) / max(np.linalg.norm(rhs[s]), 1e-300))


# ---------------------------------------------------------------- driver

@dataclass
class PrandtlCorrector1:
    """First-order layer: uncut and cut fields, pressure and diagnostics."""

    grid: Grid2D
    eps: float
    u_p: np.ndarray
    v_p: np.ndarray
    u_march: np.ndarray
    v_bar: np.ndarray
    u_p1: np.ndarray
    v_p1: np.ndarray
    p_p1: float
    p_p2: np.ndarray
    f_src: np.ndarray
    g_src: np.ndarray
    seed_v0: np.ndarray
    seed_vx0: np.ndarray
    min_eig: np.ndarray
    pressure_gradient: np.ndarray
    diagnostics: dict


def solve_prandtl1(pd, layer0, lf: LayerFields, top="free", include_euler_p2=False,
                   sources=True) -> PrandtlCorrector1:
    """Seeds, march, recovery, cut-off and ``p_p^2`` in one call."""
    g = lf.grid
    y = g.y_nodes
    seed_v0, seed_vx0 = boundary_seed(lf, pd.ubar1)
    mr = march_corrector(lf, pd.ubar1, top=top)
    # v from the marched u by the continuity equation; the half-step values
    # of the box scheme are kept as a cross-check
    v_p = -cumulative(g.dx(mr.U), y, axis=1)
    # the marched u is kept; the trapezoid recovery is a consistency check
    # (its one-sided wall derivative leaves an O(h^2) slip that u_pyy amplifies)
    u_p = mr.U
    u_rec = recover_up(g, v_p, pd.ubar1(y))
    u_p1, v_p1 = apply_cutoff(g, pd.eps, pd.chi, u_p, v_p)
    p_p2 = build_pressure2(lf, include_euler_p2)
    v_bar = v_p - (y * pd.chi(y))[None, :] * lf.wall["ue1_x"][:, None]
    diag = {
        "march_recovery_gap": float(np.max(np.abs(u_rec - u_p))),
        "wall_slip_gap": float(np.max(np.abs(u_rec[:, 0] + lf.wall["ue1"]))),
        "seed_gap_v0": float(np.max(np.abs(v_p[0] - seed_v0))),
        "seed_gap_vx0": float(np.max(np.abs(g.dx(v_p)[0] - seed_vx0))),
        "half_step_gap": float(np.max(np.abs(node_values(g.x_nodes, mr.V_half, v_p[0]) - v_p))),
        "min_eig": float(np.nanmin(mr.min_eig)),
        "sup_u_p": float(np.max(np.abs(u_p))),
        "sup_v_p": float(np.max(np.abs(v_p))),
        "sup_vpyy": float(np.max(np.sqrt((g.dyy(v_p) ** 2) @ g.wy))),
        "L2_vpxy": g.l2(g.dy(g.dx(v_p))),
        "L2_vp1x_sq": g.l2(g.dx(v_p1)) ** 2,
    }
    f_src = g_src = np.zeros(g.shape)
    if sources:
        f_src, g_src, _ = assemble_sources(lf, pd.chi, u_p, v_p)
        diag["L2_f"] = g.l2(f_src)
        diag["L2_g_w3"] = g.l2(g_src, n=3)
        diag["vform_mismatch"] = vform_mismatch(lf, pd.chi, v_p, f_src, g_src)
    return PrandtlCorrector1(g, pd.eps, u_p, v_p, mr.U, v_bar, u_p1, v_p1, 0.0, p_p2,
                             f_src, g_src, seed_v0, seed_vx0, mr.min_eig, mr.P_half, diag)
