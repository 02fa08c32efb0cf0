"""Leading-order nonlinear boundary layer via the von Mises transformation.

With ``eta = int_0^y (u_e + u_p^0)`` and ``W(x, eta) = u_e + u_p^0`` the layer
equation becomes the quasilinear heat equation ``W_x = (W W_eta)_eta``.
We march the shifted unknown

    w = W - u_e - (u_b - u_e) exp(-eta),

which vanishes at ``eta = 0`` and decays at infinity, and satisfies

    w_x = [W w_eta]_eta - (u_b - u_e)[w exp(-eta)]_eta - F_eta,
    F(eta) = (u_b - u_e)(u_e + (u_b - u_e) exp(-eta)) exp(-eta).

The march is implicit in x (second-order BDF started by an extrapolated
implicit Euler step) with Picard iteration on the frozen coefficient ``W``; every Picard step is
a tridiagonal solve.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad, trapezoid
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded
from scipy.optimize import minimize_scalar

from .errors import PreconditionError, SolverError
from .grid import Grid2D, cumulative, stretched_nodes, tail_integral

log = logging.getLogger(__name__)


@dataclass
class PrandtlLayer0:
    """Leading-order layer on the (x, y) grid and its von Mises state."""

    grid: Grid2D
    u_e: float
    u_b: float
    u_p0: np.ndarray          # (nx, ny)
    v_p0: np.ndarray          # (nx, ny)
    u_px0: np.ndarray         # (nx, ny)
    eta: np.ndarray           # (n_eta,)
    W: np.ndarray             # (nx, n_eta) at the output x nodes
    w_shift: np.ndarray       # (nx, n_eta)
    F_src: np.ndarray         # (n_eta,)
    min_W: np.ndarray         # running minimum of W after every march step
    x_steps: np.ndarray       # x location of every march step
    inflow_min: float         # min{u_b, min(u_e + ubar0)}
    picard_iterations: np.ndarray

    @property
    def x(self):
        return self.grid.x_nodes

    @property
    def y(self):
        return self.grid.y_nodes


def source_F(eta, u_e, u_b):
    """``F(eta)`` and ``F'(eta)`` of the shifted equation."""
    c = u_b - u_e
    e = np.exp(-eta)
    F = c * (u_e + c * e) * e
    F_eta = c * (-u_e * e - 2.0 * c * e * e)
    return F, F_eta


def _profile_min(pd, u_e, y):
    """``min(u_e + ubar0)`` on ``[0, y[-1]]``: sampled, then polished between neighbours."""
    vals = u_e + pd.ubar0(y)
    k = int(np.argmin(vals))
    lo, hi = y[max(k - 1, 0)], y[min(k + 1, y.size - 1)]
    res = minimize_scalar(lambda t: float(u_e + pd.ubar0(t)), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-12})
    return float(min(vals[k], res.fun))


def _inflow_state(pd, eta, Ymax, n_fine=20001):
    """W(0, eta) from the inflow trace, by inverting eta(y)."""
    u_e = pd.u_e
    y = np.linspace(0.0, Ymax, n_fine)
    speed = u_e + pd.ubar0(y)
    eta_of_y = cumulative(speed, y)
    # spline in y keeps the inversion accurate near the wall
    y_of_eta = CubicSpline(eta_of_y, y)
    y_e = y_of_eta(np.clip(eta, 0.0, eta_of_y[-1]))
    W0 = u_e + pd.ubar0(y_e)
    W0[eta > eta_of_y[-1]] = u_e + pd.ubar0(Ymax)
    return W0


def _tridiag_system(W, eta, dt_coef, c):
    """Banded matrix of ``dt_coef*w - [W w']' + c [e^{-eta} w]'`` on interior nodes.

    Conservative three-point stencil on a possibly non-uniform eta grid.
    """
    h = np.diff(eta)
    Wh = 0.5 * (W[1:] + W[:-1])            # W at half nodes
    e = np.exp(-eta)
    hm, hp = h[:-1], h[1:]
    vol = 0.5 * (hm + hp)
    n = eta.size - 2
    lower = -Wh[:-1] / (hm * vol)
    upper = -Wh[1:] / (hp * vol)
    diag = dt_coef + Wh[:-1] / (hm * vol) + Wh[1:] / (hp * vol)
    # central first derivative of e^{-eta} w, second order on smooth grids
    cl = -hp / (hm * (hm + hp))
    cd = (hp - hm) / (hm * hp)
    cu = hm / (hp * (hm + hp))
    lower = lower + c * cl * e[:-2]
    diag = diag + c * cd * e[1:-1]
    upper = upper + c * cu * e[2:]
    ab = np.zeros((3, n))
    ab[0, 1:] = upper[:-1]
    ab[1, :] = diag
    ab[2, :-1] = lower[1:]
    return ab


def march_prandtl0(pd, grid: Grid2D, n_eta=None, substeps=4, scheme="bdf2",
                   eta_margin=1.25, eta_beta=2.0, max_picard=50) -> PrandtlLayer0:
    """Solve the leading-order layer on ``grid``.

    Parameters
    ----------
    pd : ProblemData
    grid : Grid2D
        Output grid; the march uses ``substeps`` steps per x interval.
    n_eta : int, optional
        von Mises nodes (default ``8 (ny - 1) + 1``).
    scheme : {"bdf2", "euler"}
        Second-order BDF or plain implicit Euler in x.
    eta_margin : float
        The eta domain covers ``eta_margin * Ymax`` in y so that the
        displaced layer still spans the output grid.
    eta_beta : float or None
        tanh clustering of the eta nodes toward the wall (None for uniform).
    """
    u_e, u_b = pd.u_e, pd.u_b
    tol = pd.tolerances.tol_newton
    Ymax = grid.Ymax
    if u_b <= 0:
        raise PreconditionError("plate speed must be positive")
    y_fine = np.linspace(0.0, eta_margin * Ymax, 20001)
    if np.min(u_e + pd.ubar0(y_fine)) <= 0:
        raise PreconditionError("u_e + ubar0 must stay positive")
    eta_max = quad(lambda s: u_e + float(pd.ubar0(s)), 0.0, eta_margin * Ymax, limit=200)[0]
    n_eta = n_eta or 8 * (grid.ny - 1) + 1
    eta = stretched_nodes(eta_max, n_eta, eta_beta)
    c = u_b - u_e
    F, F_eta = source_F(eta, u_e, u_b)
    lift = u_e + c * np.exp(-eta)

    W0 = _inflow_state(pd, eta, eta_margin * Ymax)
    w = W0 - lift
    w[0] = 0.0
    w[-1] = 0.0
    inflow_min = min(u_b, _profile_min(pd, u_e, y_fine[y_fine <= Ymax]))

    nx = grid.nx
    dx = np.diff(grid.x_nodes)
    W_out = np.empty((nx, n_eta))
    W_out[0] = w + lift
    min_W, x_steps, picard = [float(np.min(w + lift))], [0.0], []

    def step(w_old, rhs0, dt_coef, x_new):
        rhs = (rhs0 - F_eta)[1:-1]
        w_new = w_old.copy()
        for k in range(max_picard):
            ab = _tridiag_system(w_new + lift, eta, dt_coef, c)
            sol = solve_banded((1, 1), ab, rhs)
            change = float(np.max(np.abs(sol - w_new[1:-1])))
            w_new[1:-1] = sol
            if change <= tol * max(1.0, float(np.max(np.abs(sol)))):
                break
        else:
            raise SolverError("Picard iteration did not converge", x=x_new, residual=change)
        picard.append(k + 1)
        return w_new

    def euler_step(w_old, h, x_new):
        return step(w_old, w_old / h, 1.0 / h, x_new)

    w_prev = None
    x = 0.0
    for i in range(nx - 1):
        dxs = dx[i] / substeps
        for _ in range(substeps):
            if scheme == "bdf2" and w_prev is not None:
                w_new = step(w, (2.0 * w - 0.5 * w_prev) / dxs, 1.5 / dxs, x + dxs)
            elif scheme == "bdf2":
                # second-order start: Richardson extrapolation of implicit Euler,
                # otherwise the start-up error shows up in second x-differences
                half = euler_step(euler_step(w, 0.5 * dxs, x + 0.5 * dxs), 0.5 * dxs, x + dxs)
                w_new = 2.0 * half - euler_step(w, dxs, x + dxs)
            else:
                w_new = euler_step(w, dxs, x + dxs)
            w_prev, w = w, w_new
            x += dxs
            Wn = w + lift
            if np.min(Wn) <= 0:
                raise SolverError("von Mises velocity lost positivity", x=x, residual=float(np.min(Wn)))
            min_W.append(float(np.min(Wn)))
            x_steps.append(x)
        W_out[i + 1] = w + lift

    u_p0 = np.empty(grid.shape)
    for i in range(nx):
        u_p0[i] = _to_physical(W_out[i], eta, grid.y_nodes, u_e)
    u_px0 = grid.dx(u_p0)
    v_p0 = tail_integral(u_px0, grid.y_nodes, axis=1)
    margin = min(min_W) - inflow_min
    if margin < -1e-8:
        log.warning("maximum principle violated by %.3e", margin)
    return PrandtlLayer0(grid, u_e, u_b, u_p0, v_p0, u_px0, eta, W_out, W_out - lift,
                         F, np.minimum.accumulate(min_W), np.asarray(x_steps), inflow_min,
                         np.asarray(picard))


def _to_physical(W, eta, y_out, u_e):
    """Resample ``W(eta) - u_e`` onto physical heights ``y_out``."""
    inv = CubicSpline(eta, 1.0 / W)
    y_of_eta = inv.antiderivative()(eta)
    if np.any(np.diff(y_of_eta) <= 0):
        raise SolverError("inverse von Mises map is not monotone")
    if y_of_eta[-1] < y_out[-1]:
        raise SolverError("eta domain too short to cover the y grid", residual=y_of_eta[-1])
    spline = CubicSpline(y_of_eta, W - u_e)
    return spline(y_out)


def weighted_norm_values(eta, x, w, n=0, j=0):
    """``N_j(L)`` of a sampled ``w(x, eta)`` (rows are x slices)."""
    weight = (1.0 + eta**2) ** (n / 2.0)
    total = 0.0
    deriv = np.asarray(w, dtype=float)
    for k in range(j + 1):
        if k > 0:
            deriv = np.gradient(deriv, x, axis=0, edge_order=2)
        total += trapezoid(weight * deriv[-1] ** 2, eta)
        dk_eta = np.gradient(deriv, eta, axis=1, edge_order=2)
        inner = trapezoid(weight * dk_eta**2, eta, axis=1)
        total += trapezoid(inner, x)
    return float(total)


def weighted_norms(layer0: PrandtlLayer0, n=0, j=0) -> float:
    """Weighted iterative norm ``N_j`` of the shifted unknown at ``x = L``."""
    if j not in (0, 1, 2):
        raise ValueError("j must be 0, 1 or 2")
    return weighted_norm_values(layer0.eta, layer0.x, layer0.w_shift, n, j)


def check_max_principle(layer0: PrandtlLayer0) -> float:
    """``min W - min{u_b, min(u_e + ubar0)}`` over all march steps."""
    return float(np.min(layer0.min_W) - layer0.inflow_min)
