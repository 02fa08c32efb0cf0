"""First-order Euler corrector on the outer (x, z) strip.

The normal velocity solves the elliptic problem

    -u_e^0 (v_xx + v_zz) + u_e^0'' v = E_b           on (0, L) x (0, Zmax),
    v(x, 0) = -v_p^0(x, 0),  v(0, z) = V_b0(z),  v(L, z) = V_bL(z).

The boundary data are carried by an explicit lift ``B``; the remainder
``w = v - B`` has homogeneous Dirichlet data and solves the symmetrised
equation ``-Delta w + (u_e^0''/u_e^0) w = (E_b - F_e)/u_e^0`` with
``F_e = -u_e^0 Delta B + u_e^0'' B``, so that ``B + w`` carries the source
``E_b`` exactly.  ``E_b = -chi(z/eps) F_e(x, 0)`` is
a thin corrector that cancels the source on the wall.  The tangential
velocity and the pressure follow from the divergence-free condition and
the x-momentum balance.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq
from scipy.sparse.linalg import spsolve

from .errors import ConfigurationError, PreconditionError, ResolutionError, SolverError
from .grid import cumulative, diff1, diff2, second_derivative_matrix, stretched_nodes, trapezoid_weights

log = logging.getLogger(__name__)

MIN_LAYER_NODES = 8


def make_z_nodes(eps, Zmax=10.0, nz=257, min_nodes=MIN_LAYER_NODES):
    """Outer-variable nodes resolving the corner layer ``z <= eps``.

    Uniform when that already gives ``min_nodes`` intervals inside the
    layer, otherwise tanh-clustered with the smallest sufficient beta.
    """
    uniform = stretched_nodes(Zmax, nz)
    if uniform[min_nodes] <= eps:
        return uniform

    def excess(beta):
        return stretched_nodes(Zmax, nz, beta)[min_nodes] - 0.95 * eps

    hi = 1.0
    while excess(hi) > 0:
        hi *= 1.5
        if hi > 60:
            raise ResolutionError(f"cannot resolve z <= {eps:g} with {nz} nodes")
    beta = brentq(excess, 1e-6, hi, xtol=1e-10)
    return stretched_nodes(Zmax, nz, beta)


@dataclass
class EulerCorrector:
    """Outer corrector fields on the (x, z) grid (arrays of shape (nx, nz))."""

    x: np.ndarray
    z: np.ndarray
    eps: float
    v_e1: np.ndarray
    u_e1: np.ndarray
    p_e1: np.ndarray
    B: np.ndarray
    F_e: np.ndarray
    E_b: np.ndarray
    w_hom: np.ndarray
    lift_kind: str
    solve_residual: float
    theta0: float
    chi_tail: object          # t -> int_t^1 chi(s) ds

    @property
    def v_ez(self):
        return diff1(self.v_e1, self.z, axis=1)

    @property
    def v_ex(self):
        return diff1(self.v_e1, self.x, axis=0)

    def norms(self):
        """Measured sup, H1 and H2 surrogates of ``v_e1``."""
        wx, wz = trapezoid_weights(self.x), trapezoid_weights(self.z)

        def l2(f):
            return float(np.sqrt(np.einsum("i,j,ij->", wx, wz, f**2)))

        v = self.v_e1
        vx, vz = diff1(v, self.x, 0), diff1(v, self.z, 1)
        vxx, vzz = diff2(v, self.x, 0), diff2(v, self.z, 1)
        vxz = diff1(vx, self.z, 1)
        return {
            "sup_v_e1": float(np.max(np.abs(v))),
            "sup_u_e1": float(np.max(np.abs(self.u_e1))),
            "sup_p_e1": float(np.max(np.abs(self.p_e1))),
            "H1_v_e1": float(np.sqrt(l2(v) ** 2 + l2(vx) ** 2 + l2(vz) ** 2)),
            "H2_v_e1": float(np.sqrt(l2(vxx) ** 2 + 2 * l2(vxz) ** 2 + l2(vzz) ** 2)),
            "L2_E_b": l2(self.E_b),
            "L2_F_e": l2(self.F_e),
            "theta0": self.theta0,
            "solve_residual": self.solve_residual,
        }


def wall_trace(layer0):
    """``v_p^0(x, 0)`` on the x nodes."""
    return np.asarray(layer0.v_p0[:, 0], dtype=float)


def build_boundary_lift(pd, x, z, vtrace):
    """Boundary lift ``B`` and its residual ``F_e = -u_e^0 Delta B + u_e^0'' B``.

    Uses the corner-normalised blend of the inflow and outflow traces; if a
    corner value of ``v_p^0`` is below ``tol_lift`` the additive lift with
    an ``exp(-z)`` wall correction is used instead.

    Returns
    -------
    B, F_e : ndarray
        Shape ``(nx, nz)``.
    kind : str
        ``"blend"`` or ``"additive"``.
    """
    L = x[-1]
    s = (x / L)[:, None]
    ue, uezz = pd.u_e0(z)[None, :], pd.u_e0(z, 2)[None, :]
    V0, VL = pd.Vb0(z)[None, :], pd.VbL(z)[None, :]
    V0zz, VLzz = pd.Vb0(z, 2)[None, :], pd.VbL(z, 2)[None, :]
    t = vtrace[:, None]
    tol = pd.tolerances.tol_lift
    if abs(vtrace[0]) >= tol and abs(vtrace[-1]) >= tol:
        a = (1.0 - s) * t / vtrace[0]
        b = s * t / vtrace[-1]
        axx = diff2(a[:, 0], x)[:, None]
        bxx = diff2(b[:, 0], x)[:, None]
        B = a * V0 + b * VL
        lap = axx * V0 + bxx * VL + a * V0zz + b * VLzz
        kind = "blend"
    else:
        log.warning("corner trace of v_p^0 below %.1e; using the additive lift", tol)
        ez = np.exp(-z)[None, :]
        corr = -t - (1.0 - s) * float(pd.Vb0(0.0)) - s * float(pd.VbL(0.0))
        corr_xx = diff2(corr[:, 0], x)[:, None]
        B = (1.0 - s) * V0 + s * VL + ez * corr
        lap = (1.0 - s) * V0zz + s * VLzz + ez * (corr + corr_xx)
        kind = "additive"
    F_e = -ue * lap + uezz * B
    return B, F_e, kind


def chi_tail_function(chi, n=20001):
    """``t -> int_t^1 chi(s) ds`` by dense trapezoid, zero for ``t >= 1``."""
    s = np.linspace(0.0, 1.0, n)
    c = cumulative_trapezoid(chi(s), s, initial=0.0)
    tail = c[-1] - c

    def fn(t):
        t = np.asarray(t, dtype=float)
        return np.where(t >= 1.0, 0.0, np.interp(np.clip(t, 0.0, 1.0), s, tail))

    return fn


def build_corner_corrector(pd, F_e, z):
    """``E_b(x, z) = -chi(z/eps) F_e(x, 0)``; needs 8 nodes inside ``z <= eps``."""
    inside = int(np.count_nonzero(z <= pd.eps * (1 + 1e-12)))
    if inside < MIN_LAYER_NODES:
        raise ResolutionError(f"only {inside} z nodes in [0, eps]; need {MIN_LAYER_NODES}")
    return -pd.chi(z / pd.eps)[None, :] * F_e[:, :1]


def _interior_operator(x, z, q):
    """Sparse ``-Delta + q`` on interior nodes with zero Dirichlet data."""
    Dxx = second_derivative_matrix(x)[1:-1, 1:-1]
    Dzz = second_derivative_matrix(z)[1:-1, 1:-1]
    nxi, nzi = x.size - 2, z.size - 2
    A = -sp.kron(Dxx, sp.identity(nzi)) - sp.kron(sp.identity(nxi), Dzz)
    A = A + sp.diags(np.tile(q[1:-1], nxi))
    return A.tocsc()


def solve_dirichlet(x, z, q, rhs, tol=1e-9):
    """Solve ``-Delta w + q(z) w = rhs`` with ``w = 0`` on the boundary."""
    A = _interior_operator(x, z, q)
    b = rhs[1:-1, 1:-1].ravel()
    sol = spsolve(A, b)
    res = float(np.linalg.norm(A @ sol - b) / max(np.linalg.norm(b), 1e-300))
    if not np.all(np.isfinite(sol)) or res > tol:
        raise SolverError("Euler corrector solve failed", residual=res)
    w = np.zeros((x.size, z.size))
    w[1:-1, 1:-1] = sol.reshape(x.size - 2, z.size - 2)
    return w, res


def positivity_ratio(w, z, q):
    """``min_x int(w_z^2 + q w^2) / int w_z^2`` over the x slices."""
    wz = trapezoid_weights(z)
    dw = diff1(w, z, axis=1)
    num = (dw**2 + q[None, :] * w**2) @ wz
    den = (dw**2) @ wz
    ok = den > 1e-300
    return float(np.min(num[ok] / den[ok])) if np.any(ok) else 1.0


def solve_euler_corrector(pd, layer0, z=None, Zmax=10.0, nz=257) -> EulerCorrector:
    """Lift, corner corrector, elliptic solve and recovery of ``u_e^1, p_e^1``."""
    x = layer0.grid.x_nodes
    if z is None:
        z = make_z_nodes(pd.eps, Zmax, nz)
    ue = pd.u_e0(z)
    if np.min(ue) <= 0:
        raise PreconditionError("u_e^0 must be positive on the z grid")
    uez, uezz = pd.u_e0(z, 1), pd.u_e0(z, 2)
    B, F_e, kind = build_boundary_lift(pd, x, z, wall_trace(layer0))
    E_b = build_corner_corrector(pd, F_e, z)
    q = uezz / ue
    w, res = solve_dirichlet(x, z, q, (E_b - F_e) / ue[None, :], pd.tolerances.tol_linear)
    v = B + w
    v_ez = diff1(v, z, axis=1)
    v_ex = diff1(v, x, axis=0)
    u = pd.ub1(z)[None, :] - cumulative(v_ez, x, axis=0)
    G0 = -ue[0] * v_ez[:, 0] + v[:, 0] * uez[0]
    p = -cumulative(G0, x)[:, None] - cumulative(ue[None, :] * v_ex, z, axis=1)
    return EulerCorrector(x, z, pd.eps, v, u, p, B, F_e, E_b, w, kind, res,
                          positivity_ratio(w, z, q), chi_tail_function(pd.chi))


class EulerSampler:
    """Euler fields and their derivatives at ``z = sqrt(eps) y``.

    Splines in z (C^2 cubic) are built once per field; x-derivatives are
    taken on the (x, z) grid before sampling.
    """

    def __init__(self, euler: EulerCorrector):
        self.e = euler
        x, z = euler.x, euler.z
        v, u, p = euler.v_e1, euler.u_e1, euler.p_e1
        self._fields = {
            "v": v, "u": u, "p": p,
            "v_x": diff1(v, x, 0), "u_x": diff1(u, x, 0),
            "v_xx": diff2(v, x, 0), "u_xx": diff2(u, x, 0),
        }
        self._splines = {k: CubicSpline(z, f, axis=1) for k, f in self._fields.items()}

    def sample(self, name, y, nu=0):
        """Field ``name`` (or its ``nu``-th z-derivative) at ``z = sqrt(eps) y``."""
        zq = np.sqrt(self.e.eps) * np.asarray(y, dtype=float)
        if zq.max() > self.e.z[-1] * (1 + 1e-12):
            raise ConfigurationError("sqrt(eps)*Ymax exceeds the Euler domain height")
        return self._splines[name](zq, nu)

    def wall(self, name, nu=0):
        return self._splines[name](np.array([0.0]), nu)[:, 0]

    def int_Eb_tail(self, y):
        """``int_z^inf E_b`` at ``z = sqrt(eps) y``."""
        zq = np.sqrt(self.e.eps) * np.asarray(y, dtype=float)
        return -self.e.F_e[:, :1] * self.e.eps * self.e.chi_tail(zq / self.e.eps)[None, :]
