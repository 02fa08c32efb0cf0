"""Linearized remainder problem on a staggered grid and its stability checks.

The remainder ``(u, v, p)`` solves, around a shear background ``(u_s, v_s)``,

    u_s u_x + u u_sx + v_s u_y + v u_sy + p_x     - (u_yy + eps u_xx) = f,
    u_s v_x + u v_sx + v_s v_y + v v_sy + p_y/eps - (v_yy + eps v_xx) = g,
    u_x + v_y = 0,

on ``(0, L) x (0, H)`` with no-slip data at ``y = 0`` and ``y = H``,
Dirichlet data at ``x = 0`` and the stress-free conditions
``p - 2 eps u_x = 0``, ``u_y + eps v_x = 0`` at ``x = L``.

Both momentum equations are written in divergence form,

    p_x - eps u_xx - u_yy       = -div(-p + 2 eps u_x, u_y + eps v_x),
    eps (p_y/eps - eps v_xx - v_yy) = -div(eps (u_y + eps v_x), -p + 2 eps v_y),

using ``u_x + v_y = 0``, so the outflow conditions are the natural
(zero-traction) conditions of a finite-volume discretisation.  Unknowns sit
on a MAC grid: ``u`` on x-faces, ``v`` on y-faces and ``p`` in cells; the
discrete divergence is imposed cell by cell.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RectBivariateSpline
from scipy.linalg import eigh
from scipy.sparse.linalg import LinearOperator, onenormest, splu

from .errors import DivergenceError, PreconditionError, SolverError
from .grid import Grid2D, trapezoid_weights

log = logging.getLogger(__name__)

CORNER_MARGIN = 2
# outflow traction residuals above this are flagged (the outflow layer of
# width ~eps/u_s is not resolved by the default grids)
OUTFLOW_FLAG_TOL = 1e-6


# ---------------------------------------------------------------- grid

@dataclass(frozen=True)
class MACGrid:
    """Uniform staggered grid with ``nx x ny`` cells on ``[0, L] x [0, H]``."""

    L: float
    H: float
    nx: int
    ny: int

    @property
    def hx(self):
        return self.L / self.nx

    @property
    def hy(self):
        return self.H / self.ny

    @property
    def xu(self):
        return np.linspace(0.0, self.L, self.nx + 1)

    @property
    def yu(self):
        return (np.arange(self.ny) + 0.5) * self.hy

    @property
    def xv(self):
        return (np.arange(self.nx) + 0.5) * self.hx

    @property
    def yv(self):
        return np.linspace(0.0, self.H, self.ny + 1)

    @property
    def xc(self):
        return self.xv

    @property
    def yc(self):
        return self.yu

    @property
    def n_u(self):
        return self.nx * self.ny

    @property
    def n_v(self):
        return self.nx * (self.ny - 1)

    @property
    def n_p(self):
        return self.nx * self.ny

    @property
    def size(self):
        return self.n_u + self.n_v + self.n_p

    def u_shape(self):
        return (self.nx + 1, self.ny)

    def v_shape(self):
        return (self.nx, self.ny + 1)


def make_mac_grid(L, H, nx, ny) -> MACGrid:
    if nx < 3 or ny < 3:
        raise ValueError("MAC grid needs at least 3 cells per direction")
    return MACGrid(float(L), float(H), int(nx), int(ny))


# ---------------------------------------------------------------- background

class GridSampler:
    """Bicubic splines of node fields on a :class:`Grid2D`."""

    def __init__(self, grid: Grid2D, fields: dict):
        self.grid = grid
        self._s = {k: RectBivariateSpline(grid.x_nodes, grid.y_nodes, np.asarray(v, dtype=float))
                   for k, v in fields.items()}

    def __call__(self, name, x, y, dx=0, dy=0):
        """Tensor-product evaluation on ``x`` (rows) by ``y`` (columns)."""
        return self._s[name](np.asarray(x, dtype=float), np.asarray(y, dtype=float), dx=dx, dy=dy)

    def names(self):
        return tuple(self._s)


# derivative names -> (field, dx, dy)
_DERIVS = {"u": ("u", 0, 0), "u_x": ("u", 1, 0), "u_y": ("u", 0, 1), "u_yy": ("u", 0, 2),
           "v": ("v", 0, 0), "v_x": ("v", 1, 0), "v_y": ("v", 0, 1)}


@dataclass
class ShearBackground:
    """Leading approximate flow ``(u_s, v_s)`` the remainder is linearised about.

    ``u_s``, ``v_s`` are node arrays on ``grid``; ``evaluator(name, x, y)``
    returns ``u, u_x, u_y, u_yy, v, v_x, v_y`` on the tensor product of
    ``x`` and ``y``.
    """

    grid: Grid2D
    eps: float
    u_s: np.ndarray
    v_s: np.ndarray
    min_us: float
    evaluator: object = field(repr=False, default=None)

    def at(self, name, x, y):
        return self.evaluator(name, x, y)

    @classmethod
    def from_arrays(cls, grid: Grid2D, eps, u_s, v_s):
        smp = GridSampler(grid, {"u": u_s, "v": v_s})

        def evaluator(name, x, y):
            base, dx, dy = _DERIVS[name]
            return smp(base, x, y, dx, dy)

        return cls._checked(grid, eps, u_s, v_s, evaluator)

    @classmethod
    def from_functions(cls, grid: Grid2D, eps, funcs: dict):
        """Analytic background; ``funcs`` maps every derivative name to ``f(X, Y)``."""
        missing = set(_DERIVS) - set(funcs)
        if missing:
            raise ValueError(f"missing background derivatives: {sorted(missing)}")

        def evaluator(name, x, y):
            X, Y = np.meshgrid(np.asarray(x, dtype=float), np.asarray(y, dtype=float), indexing="ij")
            return np.broadcast_to(funcs[name](X, Y), X.shape).astype(float)

        u_s = evaluator("u", grid.x_nodes, grid.y_nodes)
        v_s = evaluator("v", grid.x_nodes, grid.y_nodes)
        return cls._checked(grid, eps, u_s, v_s, evaluator)

    @classmethod
    def _checked(cls, grid, eps, u_s, v_s, evaluator):
        m = float(np.min(u_s))
        if m <= 0:
            raise PreconditionError(f"u_s must stay positive (min {m:.3e})")
        return cls(grid, float(eps), np.asarray(u_s), np.asarray(v_s), m, evaluator)


def shear_background(approx) -> ShearBackground:
    """``u_s = u_e^0 + u_p^0 + sqrt(eps) u_e^1``, ``v_s = v_p^0 + v_e^1`` from an approximation."""
    p = approx.parts
    se = np.sqrt(approx.eps)
    u_s = p["ue0"] + p["up0"] + se * p["ue1"]
    v_s = p["vp0"] + p["ve1"]
    return ShearBackground.from_arrays(approx.grid, approx.eps, u_s, v_s)


# ---------------------------------------------------------------- operator

class _Rows:
    def __init__(self):
        self.r, self.c, self.v = [], [], []

    def add(self, row, refs, coef):
        for col, w in refs:
            self.r.append(row)
            self.c.append(col)
            self.v.append(coef * w)


class LinearizedOperator:
    """Assembled and factorised saddle-point system for one background."""

    def __init__(self, bg: ShearBackground, mac: MACGrid, eps, tol=1e-9):
        if bg.min_us <= 0:
            raise PreconditionError("u_s must stay positive")
        self.bg, self.mac, self.eps, self.tol = bg, mac, float(eps), tol
        self.A = self._assemble().tocsc()
        try:
            self.lu = splu(self.A)
        except RuntimeError as exc:
            raise SolverError(f"saddle system is singular: {exc}") from exc

    # unknown numbering
    def iu(self, i, j):
        return (i - 1) * self.mac.ny + j

    def iv(self, i, j):
        return self.mac.n_u + i * (self.mac.ny - 1) + (j - 1)

    def ip(self, i, j):
        return self.mac.n_u + self.mac.n_v + i * self.mac.ny + j

    def U(self, i, j):
        m = self.mac
        if i <= 0:
            return []
        if j < 0:
            return [(self.iu(i, 0), -1.0)]
        if j >= m.ny:
            return [(self.iu(i, m.ny - 1), -1.0)]
        return [(self.iu(i, j), 1.0)]

    def V(self, i, j):
        m = self.mac
        if j <= 0 or j >= m.ny:
            return []
        if i < 0:
            return [(self.iv(0, j), -1.0)]
        if i >= m.nx:
            return [(self.iv(m.nx - 1, j), 2.0), (self.iv(m.nx - 2, j), -1.0)]
        return [(self.iv(i, j), 1.0)]

    def P(self, i, j):
        return [(self.ip(i, j), 1.0)]

    def _assemble(self):
        m, eps, bg = self.mac, self.eps, self.bg
        hx, hy = m.hx, m.hy
        U, V, P = self.U, self.V, self.P
        R = _Rows()
        xu, yu, xv, yv = m.xu[1:], m.yu, m.xv, m.yv[1:-1]
        cu = {k: bg.at(k, xu, yu) for k in ("u", "u_x", "v", "u_y")}
        cv = {k: bg.at(k, xv, yv) for k in ("u", "v_x", "v", "v_y")}
        # x-momentum on x-faces
        for i in range(1, m.nx + 1):
            for j in range(m.ny):
                r = self.iu(i, j)
                us, usx, vs, usy = (cu[k][i - 1, j] for k in ("u", "u_x", "v", "u_y"))
                if i < m.nx:
                    R.add(r, P(i, j), 1.0 / hx)
                    R.add(r, P(i - 1, j), -1.0 / hx)
                    R.add(r, U(i + 1, j), -2.0 * eps / hx**2)
                    R.add(r, U(i, j), 4.0 * eps / hx**2)
                    R.add(r, U(i - 1, j), -2.0 * eps / hx**2)
                    # shear fluxes through the top and bottom edges
                    R.add(r, U(i, j + 1), -1.0 / hy**2)
                    R.add(r, U(i, j), 2.0 / hy**2)
                    R.add(r, U(i, j - 1), -1.0 / hy**2)
                    c = eps / (hx * hy)
                    R.add(r, V(i, j + 1), -c)
                    R.add(r, V(i - 1, j + 1), c)
                    R.add(r, V(i, j), c)
                    R.add(r, V(i - 1, j), -c)
                    R.add(r, U(i + 1, j), us / (2 * hx))
                    R.add(r, U(i - 1, j), -us / (2 * hx))
                else:
                    # half volume against the stress-free face
                    R.add(r, P(i - 1, j), -2.0 / hx)
                    R.add(r, U(i, j), 4.0 * eps / hx**2)
                    R.add(r, U(i - 1, j), -4.0 * eps / hx**2)
                    R.add(r, U(i, j), 1.5 * us / hx)
                    R.add(r, U(i - 1, j), -2.0 * us / hx)
                    R.add(r, U(i - 2, j), 0.5 * us / hx)
                R.add(r, U(i, j), usx)
                R.add(r, U(i, j + 1), vs / (2 * hy))
                R.add(r, U(i, j - 1), -vs / (2 * hy))
                for ii, jj in ((i - 1, j), (i, j), (i - 1, j + 1), (i, j + 1)):
                    R.add(r, V(ii, jj), 0.25 * usy)
        # y-momentum on interior y-faces
        for i in range(m.nx):
            for j in range(1, m.ny):
                r = self.iv(i, j)
                us, vsx, vs, vsy = (cv[k][i, j - 1] for k in ("u", "v_x", "v", "v_y"))
                R.add(r, P(i, j), 1.0 / (eps * hy))
                R.add(r, P(i, j - 1), -1.0 / (eps * hy))
                R.add(r, V(i, j + 1), -2.0 / hy**2)
                R.add(r, V(i, j), 4.0 / hy**2)
                R.add(r, V(i, j - 1), -2.0 / hy**2)
                if i + 1 < m.nx:
                    R.add(r, U(i + 1, j), -1.0 / (hx * hy))
                    R.add(r, U(i + 1, j - 1), 1.0 / (hx * hy))
                    R.add(r, V(i + 1, j), -eps / hx**2)
                    R.add(r, V(i, j), eps / hx**2)
                R.add(r, U(i, j), 1.0 / (hx * hy))
                R.add(r, U(i, j - 1), -1.0 / (hx * hy))
                R.add(r, V(i, j), eps / hx**2)
                R.add(r, V(i - 1, j), -eps / hx**2)
                R.add(r, V(i + 1, j), us / (2 * hx))
                R.add(r, V(i - 1, j), -us / (2 * hx))
                for ii, jj in ((i, j - 1), (i + 1, j - 1), (i, j), (i + 1, j)):
                    R.add(r, U(ii, jj), 0.25 * vsx)
                R.add(r, V(i, j + 1), vs / (2 * hy))
                R.add(r, V(i, j - 1), -vs / (2 * hy))
                R.add(r, V(i, j), vsy)
        # continuity in cells
        for i in range(m.nx):
            for j in range(m.ny):
                r = self.ip(i, j)
                R.add(r, U(i + 1, j), 1.0 / hx)
                R.add(r, U(i, j), -1.0 / hx)
                R.add(r, V(i, j + 1), 1.0 / hy)
                R.add(r, V(i, j), -1.0 / hy)
        n = m.size
        return sp.coo_matrix((R.v, (R.r, R.c)), shape=(n, n))

    def condition_estimate(self):
        n = self.A.shape[0]
        inv = LinearOperator((n, n), matvec=self.lu.solve,
                             rmatvec=lambda b: self.lu.solve(b, trans="T"))
        return float(onenormest(self.A) * onenormest(inv))

    def rhs(self, f, g):
        m = self.mac
        b = np.zeros(m.size)
        b[:m.n_u] = np.asarray(f)[1:, :].ravel()
        b[m.n_u:m.n_u + m.n_v] = np.asarray(g)[:, 1:-1].ravel()
        return b

    def solve(self, f, g) -> "RemainderSolution":
        m = self.mac
        f = sample_forcing(f, m.xu, m.yu)
        g = sample_forcing(g, m.xv, m.yv)
        b = self.rhs(f, g)
        bn = np.linalg.norm(b)
        if bn == 0.0:
            sol, res = np.zeros(m.size), 0.0
        else:
            sol = self.lu.solve(b)
            res = float(np.linalg.norm(self.A @ sol - b) / bn)
        if not np.all(np.isfinite(sol)) or res > self.tol:
            raise SolverError(f"saddle solve inaccurate (condition ~{self.condition_estimate():.2e})",
                              residual=res)
        u = np.zeros(m.u_shape())
        v = np.zeros(m.v_shape())
        u[1:, :] = sol[:m.n_u].reshape(m.nx, m.ny)
        v[:, 1:-1] = sol[m.n_u:m.n_u + m.n_v].reshape(m.nx, m.ny - 1)
        p = sol[m.n_u + m.n_v:].reshape(m.nx, m.ny)
        out = RemainderSolution(m, self.eps, u, v, p, f=f, g=g)
        out.diagnostics = diagnostics(out, self.bg)
        out.diagnostics["solve_residual"] = res
        return out


def sample_forcing(f, x, y):
    """Forcing array at the tensor nodes ``x`` by ``y`` (callable or array)."""
    if callable(f):
        X, Y = np.meshgrid(x, y, indexing="ij")
        return np.broadcast_to(f(X, Y), X.shape).astype(float)
    f = np.asarray(f, dtype=float)
    if f.shape != (x.size, y.size):
        raise ValueError(f"forcing has shape {f.shape}, expected {(x.size, y.size)}")
    return f


def solve_linearized(bg: ShearBackground, f, g, eps, mac: MACGrid, tol=1e-9):
    """One solve of the linearised remainder problem (see module docstring)."""
    return LinearizedOperator(bg, mac, eps, tol).solve(f, g)


# ---------------------------------------------------------------- solution and norms

@dataclass
class RemainderSolution:
    mac: MACGrid
    eps: float
    u: np.ndarray            # (nx + 1, ny) on x-faces, u[0] = 0
    v: np.ndarray            # (nx, ny + 1) on y-faces, v[:, 0] = v[:, -1] = 0
    p: np.ndarray            # (nx, ny) in cells
    f: np.ndarray = None
    g: np.ndarray = None
    diagnostics: dict = field(default_factory=dict)


def _pad_u(u):
    """u with wall ghosts (odd reflection) in y."""
    return np.concatenate([-u[:, :1], u, -u[:, -1:]], axis=1)


def _v_ext(v):
    """v with the Dirichlet ghost at x=0 and the extrapolated ghost at x=L."""
    return np.concatenate([-v[:1], v, 2 * v[-1:] - v[-2:-1]], axis=0)


def derivative_fields(mac: MACGrid, u, v):
    """Discrete ``u_x, u_y, v`` on x-faces and ``v_x, v_y, u`` on interior y-faces.

    The stencils are those of the convective terms of the operator.
    """
    hx, hy = mac.hx, mac.hy
    up = _pad_u(u)
    u_x = np.empty_like(u)
    u_x[1:-1] = (u[2:] - u[:-2]) / (2 * hx)
    u_x[-1] = (3 * u[-1] - 4 * u[-2] + u[-3]) / (2 * hx)
    u_x[0] = (u[1] - u[0]) / hx
    u_y = (up[:, 2:] - up[:, :-2]) / (2 * hy)
    ve = _v_ext(v)                                  # (nx + 2, ny + 1)
    v_at_u = 0.25 * (ve[:-1, :-1] + ve[1:, :-1] + ve[:-1, 1:] + ve[1:, 1:])   # (nx + 1, ny)
    v_x = (ve[2:, 1:-1] - ve[:-2, 1:-1]) / (2 * hx)  # (nx, ny - 1)
    v_y = (v[:, 2:] - v[:, :-2]) / (2 * hy)
    u_at_v = 0.25 * (u[:-1, :-1] + u[1:, :-1] + u[:-1, 1:] + u[1:, 1:])
    return {"u_x": u_x, "u_y": u_y, "v_at_u": v_at_u, "v_x": v_x, "v_y": v_y, "u_at_v": u_at_v}


def _weights_u(mac):
    return np.outer(trapezoid_weights(mac.xu), np.full(mac.ny, mac.hy))


def _weights_v(mac):
    return np.outer(np.full(mac.nx, mac.hx), trapezoid_weights(mac.yv))


def grad_eps_parts(mac: MACGrid, u, v, eps):
    """``||grad_eps u||^2`` and ``||grad_eps v||^2`` with ``grad_eps = (sqrt(eps) d_x, d_y)``."""
    hx, hy = mac.hx, mac.hy
    ux = np.diff(u, axis=0) / hx                     # cells
    uy = np.diff(_pad_u(u), axis=1) / hy             # (nx + 1, ny + 1) corners
    wc = hx * hy
    wcor = np.outer(trapezoid_weights(mac.xu), trapezoid_weights(mac.yv))
    gu = eps * np.sum(ux**2) * wc + np.sum(wcor * uy**2)
    vx = np.diff(_v_ext(v)[:, :], axis=0)[:, :] / hx  # (nx + 1, ny + 1) corners
    vx[-1] = (v[-1] - v[-2]) / hx
    vy = np.diff(v, axis=1) / hy                     # cells
    gv = eps * np.sum(wcor * vx**2) + np.sum(vy**2) * wc
    return float(gu), float(gv)


def _trim(a, margin=CORNER_MARGIN):
    """Copy of ``a`` with the ``margin`` x ``margin`` corner blocks masked out."""
    mask = np.ones(a.shape, dtype=bool)
    k = margin
    for si in (slice(0, k), slice(a.shape[0] - k, None)):
        for sj in (slice(0, k), slice(a.shape[1] - k, None)):
            mask[si, sj] = False
    return a[mask]


def sup_norms(sol: RemainderSolution, margin=CORNER_MARGIN):
    return (float(np.max(np.abs(_trim(sol.u, margin)))), float(np.max(np.abs(_trim(sol.v, margin)))))


def divergence(sol: RemainderSolution):
    m = sol.mac
    return np.diff(sol.u, axis=0) / m.hx + np.diff(sol.v, axis=1) / m.hy


def outflow_residuals(sol: RemainderSolution):
    """Discrete ``p - 2 eps u_x`` and ``u_y + eps v_x`` at ``x = L`` (extrapolated)."""
    m, eps = sol.mac, sol.eps
    u, v, p = sol.u, sol.v, sol.p
    p_L = 1.5 * p[-1] - 0.5 * p[-2]
    ux_L = (3 * u[-1] - 4 * u[-2] + u[-3]) / (2 * m.hx)
    r1 = p_L - 2 * eps * ux_L
    uy_L = np.diff(_pad_u(u[-1:]), axis=1)[0] / m.hy                  # y-faces
    vx_L = (v[-1] - v[-2]) / m.hx
    r2 = uy_L + eps * vx_L
    return r1, r2


def diagnostics(sol: RemainderSolution, bg=None, gamma=0.2):
    gu, gv = grad_eps_parts(sol.mac, sol.u, sol.v, sol.eps)
    su, sv = sup_norms(sol)
    r1, r2 = outflow_residuals(sol)
    d = {"grad_eps_u": np.sqrt(gu), "grad_eps_v": np.sqrt(gv), "sup_u": su, "sup_v": sv,
         "sup_u_full": float(np.max(np.abs(sol.u))), "sup_v_full": float(np.max(np.abs(sol.v))),
         "corner_margin_cells": CORNER_MARGIN,
         "max_divergence": float(np.max(np.abs(divergence(sol)))),
         "outflow_normal_stress": float(np.max(np.abs(r1))),
         "outflow_shear_stress": float(np.max(np.abs(r2)))}
    d["outflow_flagged"] = bool(max(d["outflow_normal_stress"], d["outflow_shear_stress"])
                                > OUTFLOW_FLAG_TOL)
    d["x_norm"] = x_norm(sol, sol.eps, gamma).value
    return d


@dataclass
class XNorm:
    value: float
    grad_u: float
    grad_v: float
    sup_u: float
    sup_v: float


def x_norm(sol: RemainderSolution, eps, gamma) -> XNorm:
    """``||grad_eps u|| + ||grad_eps v|| + eps^(g/2) ||u||_inf + eps^(1/2+g/2) ||v||_inf``."""
    gu, gv = grad_eps_parts(sol.mac, sol.u, sol.v, eps)
    su, sv = sup_norms(sol)
    a, b = np.sqrt(gu), np.sqrt(gv)
    c, d = eps ** (gamma / 2) * su, eps ** (0.5 + gamma / 2) * sv
    return XNorm(float(a + b + c + d), float(a), float(b), float(c), float(d))


def forcing_norms(sol: RemainderSolution):
    m = sol.mac
    fn = np.sqrt(np.sum(_weights_u(m)[1:] * sol.f[1:] ** 2))
    gn = np.sqrt(np.sum(_weights_v(m) * sol.g**2))
    return float(fn), float(gn)


def stability_ratio(sol: RemainderSolution):
    """``(||grad_eps u|| + ||grad_eps v||) / (||f|| + sqrt(eps) ||g||)``."""
    gu, gv = grad_eps_parts(sol.mac, sol.u, sol.v, sol.eps)
    fn, gn = forcing_norms(sol)
    den = fn + np.sqrt(sol.eps) * gn
    return float((np.sqrt(gu) + np.sqrt(gv)) / den) if den > 0 else 0.0


def _outflow_traces(sol, bg):
    m = sol.mac
    u_L = sol.u[-1]                                  # at y-centres
    v_L = 1.5 * sol.v[-1] - 0.5 * sol.v[-2]          # at y-faces
    v_L_c = 0.5 * (v_L[1:] + v_L[:-1])
    us_L = bg.at("u", np.array([m.L]), m.yu)[0]
    return u_L, v_L, v_L_c, us_L


def energy_check(sol: RemainderSolution, bg: ShearBackground, C_energy=10.0):
    """``||grad_eps u||^2 + int_{x=L} u_s (u^2 + eps v^2)`` against ``L ||grad_eps v||^2 + ||f||^2 + eps ||g||^2``."""
    m, eps = sol.mac, sol.eps
    gu, gv = grad_eps_parts(m, sol.u, sol.v, eps)
    u_L, _, v_L_c, us_L = _outflow_traces(sol, bg)
    boundary = float(np.sum(us_L * (u_L**2 + eps * v_L_c**2)) * m.hy)
    fn, gn = forcing_norms(sol)
    lhs = gu + boundary
    rhs = m.L * gv + fn**2 + eps * gn**2
    return {"lhs": lhs, "rhs": rhs, "boundary": boundary, "C": C_energy,
            "ratio": lhs / rhs if rhs > 0 else 0.0, "pass": bool(lhs <= C_energy * rhs)}


def vorticity_check(sol: RemainderSolution, bg: ShearBackground, C_vort=20.0):
    """``||grad_eps v||^2 + eps^2 int_{x=0} v_x^2 + eps int_{x=L} v_y^2`` against
    ``||grad_eps u||^2 + L ||grad_eps v||^2 + ||f||^2 + eps ||g||^2``."""
    m, eps = sol.mac, sol.eps
    gu, gv = grad_eps_parts(m, sol.u, sol.v, eps)
    wy = trapezoid_weights(m.yv)
    vx0 = 2.0 * sol.v[0] / m.hx
    _, v_L, _, _ = _outflow_traces(sol, bg)
    vy_L = np.diff(v_L) / m.hy
    inflow = float(np.sum(wy * vx0**2))
    outflow = float(np.sum(vy_L**2) * m.hy)
    fn, gn = forcing_norms(sol)
    lhs = gv + eps**2 * inflow + eps * outflow
    rhs = gu + m.L * gv + fn**2 + eps * gn**2
    return {"lhs": lhs, "rhs": rhs, "inflow": inflow, "outflow": outflow, "C": C_vort,
            "ratio": lhs / rhs if rhs > 0 else 0.0, "pass": bool(lhs <= C_vort * rhs)}


# ---------------------------------------------------------------- positivity

def positivity_form(v, y, u_s, u_syy):
    """Direct and factored forms of ``int (-d_yy + u_syy/u_s) v v`` on one slice.

    ``v`` is sampled at the nodes ``y`` with ``v[0] = 0``.  The direct form
    uses midpoint gradients and trapezoid masses; the factored form is a sum
    of squares, hence non-negative exactly.  ``min_eig`` is the smallest
    eigenvalue of the matching discrete operator on the Dirichlet space.
    """
    v, y, u_s, u_syy = (np.asarray(a, dtype=float) for a in (v, y, u_s, u_syy))
    if np.min(u_s) <= 0:
        raise PreconditionError("u_s must stay positive")
    h = np.diff(y)
    w = trapezoid_weights(y)
    vy = np.diff(v) / h
    q_direct = float(np.sum(h * vy**2) + np.sum(w * u_syy / u_s * v**2))
    phi = v / u_s
    us_mid2 = u_s[1:] * u_s[:-1]
    q_factored = float(np.sum(h * us_mid2 * (np.diff(phi) / h) ** 2))
    return {"Q_direct": q_direct, "Q_factored": q_factored,
            "min_eig": min_eigenvalue(y, u_s, u_syy)}


def min_eigenvalue(y, u_s, u_syy, top_dirichlet=True):
    """Smallest eigenvalue of ``-d_yy + u_syy/u_s`` (P1 stiffness, lumped mass)."""
    y = np.asarray(y, dtype=float)
    h = np.diff(y)
    n = y.size
    K = np.zeros((n, n))
    idx = np.arange(n - 1)
    K[idx, idx] += 1 / h
    K[idx + 1, idx + 1] += 1 / h
    K[idx, idx + 1] -= 1 / h
    K[idx + 1, idx] -= 1 / h
    w = trapezoid_weights(y)
    K += np.diag(w * np.asarray(u_syy) / np.asarray(u_s))
    keep = slice(1, n - 1) if top_dirichlet else slice(1, n)
    Ks = K[keep, keep]
    M = np.diag(w[keep])
    return float(eigh(Ks, M, eigvals_only=True, subset_by_index=[0, 0])[0])


def low_vy_constant(bg: ShearBackground):
    """``K = 2 (1 + sup_x int y u_sy^2 dy / min u_s^2)``."""
    g = bg.grid
    u_sy = g.dy(bg.u_s)
    tail = (g.Y * u_sy**2) @ g.wy
    return float(2.0 * (1.0 + np.max(tail) / bg.min_us**2))


def low_vy_sides(v, y, u_s):
    """``int v_y^2`` and ``int u_s^2 |(v/u_s)_y|^2`` on one slice (midpoint rule)."""
    h = np.diff(y)
    lhs = float(np.sum(h * (np.diff(v) / h) ** 2))
    rhs = float(np.sum(h * u_s[1:] * u_s[:-1] * (np.diff(v / u_s) / h) ** 2))
    return lhs, rhs


# ---------------------------------------------------------------- forcing and iteration

def random_forcing(mac: MACGrid, rng, modes=3, eps=None):
    """Smooth random ``(f, g)`` as callables: low sine/cosine modes on the box.

    With ``eps`` given, ``g`` is scaled by ``1/sqrt(eps)`` so that ``f`` and
    ``sqrt(eps) g`` are drawn from the same distribution, matching the norm
    ``||f|| + sqrt(eps) ||g||`` of the stability estimate.
    """
    a = rng.standard_normal((2, modes, modes))
    if eps is not None:
        a[1] /= np.sqrt(eps)
    ph = rng.uniform(0, 2 * np.pi, (2, modes))
    L, H = mac.L, mac.H

    def make(c, phase):
        def fn(X, Y):
            out = np.zeros_like(X)
            for k in range(modes):
                for l in range(modes):
                    out += c[k, l] * np.cos(k * np.pi * X / L + phase[k]) * np.sin((l + 1) * np.pi * Y / H)
            return out
        return fn

    return make(a[0], ph[0]), make(a[1], ph[1])


@dataclass
class IterationResult:
    solution: RemainderSolution
    trace: list
    converged: bool
    contraction: float
    consistency: float


class _RemainderSources:
    """``R_1, R_2`` of the remainder equations at the MAC points."""

    def __init__(self, approx, residual_u, residual_v, mac: MACGrid, gamma):
        self.mac, self.eps, self.gamma = mac, approx.eps, gamma
        p = approx.parts
        smp = GridSampler(approx.grid, {"Ru": residual_u, "Rv": residual_v,
                                        "up1": p["up1"], "vp1": p["vp1"]})
        xu, yu, xv, yv = mac.xu, mac.yu, mac.xv, mac.yv
        s = approx.eps ** (-gamma - 0.5)
        self.Ru = -s * smp("Ru", xu, yu)
        self.Rv = -s * smp("Rv", xv, yv)
        self.cu = {"up1": smp("up1", xu, yu), "up1_x": smp("up1", xu, yu, 1, 0),
                   "vp1": smp("vp1", xu, yu), "up1_y": smp("up1", xu, yu, 0, 1)}
        self.cv = {"up1": smp("up1", xv, yv), "vp1_x": smp("vp1", xv, yv, 1, 0),
                   "vp1": smp("vp1", xv, yv), "vp1_y": smp("vp1", xv, yv, 0, 1)}

    def __call__(self, u, v):
        eps, eg = self.eps, self.eps**self.gamma
        se = np.sqrt(eps)
        d = derivative_fields(self.mac, u, v)
        cu, cv = self.cu, self.cv
        R1 = self.Ru - se * ((cu["up1"] + eg * u) * d["u_x"] + u * cu["up1_x"]
                             + (cu["vp1"] + eg * d["v_at_u"]) * d["u_y"] + d["v_at_u"] * cu["up1_y"])
        R2 = self.Rv.copy()
        ua = d["u_at_v"]
        vi = v[:, 1:-1]
        R2[:, 1:-1] -= se * ((cv["up1"][:, 1:-1] + eg * ua) * d["v_x"] + ua * cv["vp1_x"][:, 1:-1]
                             + (cv["vp1"][:, 1:-1] + eg * vi) * d["v_y"] + vi * cv["vp1_y"][:, 1:-1])
        return R1, R2


def _difference_norm(a: RemainderSolution, b: RemainderSolution, gamma):
    diff = RemainderSolution(a.mac, a.eps, a.u - b.u, a.v - b.v, a.p - b.p)
    return x_norm(diff, a.eps, gamma).value


def nonlinear_iterate(approx, residual_u, residual_v, bg: ShearBackground, mac: MACGrid,
                      gamma=0.2, kappa=0.01, tol=1e-8, max_iter=50, tol_linear=1e-9):
    """Picard iteration for the remainder of the full expansion.

    Starting from zero, ``R_1, R_2`` are evaluated at the current iterate
    (residual of the approximation scaled by ``eps^(-gamma-1/2)`` plus the
    first-order layer and the quadratic terms) and the linearised problem is
    solved again.  Stops when the X-norm of the change is ``<= tol``.

    Raises
    ------
    DivergenceError
        When the change grows for three consecutive iterations.
    """
    if gamma + kappa >= 0.25:
        raise PreconditionError("need gamma + kappa < 1/4")
    eps = approx.eps
    op = LinearizedOperator(bg, mac, eps, tol_linear)
    src = _RemainderSources(approx, residual_u, residual_v, mac, gamma)
    cur = RemainderSolution(mac, eps, np.zeros(mac.u_shape()), np.zeros(mac.v_shape()),
                            np.zeros((mac.nx, mac.ny)))
    trace, growth, converged = [], 0, False
    for k in range(1, max_iter + 1):
        R1, R2 = src(cur.u, cur.v)
        new = op.solve(R1, R2)
        dnorm = _difference_norm(new, cur, gamma)
        xn = x_norm(new, eps, gamma).value
        ratio = dnorm / trace[-1]["change"] if trace and trace[-1]["change"] > 0 else float("nan")
        trace.append({"iteration": k, "x_norm": xn, "change": dnorm, "ratio": ratio})
        log.info("iterate %d: X=%.6e change=%.3e", k, xn, dnorm)
        cur = new
        if dnorm <= tol:
            converged = True
            break
        growth = growth + 1 if np.isfinite(ratio) and ratio > 1.0 else 0
        if growth >= 3 or not np.isfinite(xn):
            raise DivergenceError("remainder iteration diverges; try a smaller L or a larger eps",
                                  trace)
    ratios = [t["ratio"] for t in trace if np.isfinite(t["ratio"]) and t["change"] > 0]
    contraction = float(np.max(ratios)) if ratios else 0.0
    # fixed-point consistency: one more evaluation and solve
    R1, R2 = src(cur.u, cur.v)
    again = op.solve(R1, R2)
    consistency = abs(x_norm(again, eps, gamma).value - x_norm(cur, eps, gamma).value)
    cur.diagnostics["iterations"] = len(trace)
    return IterationResult(cur, trace, converged, contraction, consistency)
