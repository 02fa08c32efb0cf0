"""Tensor-product grids, finite-difference operators and weighted norms.

Every solver in the package works on node-centred arrays of shape
``(nx, ny)`` attached to a :class:`Grid2D`.  Derivatives are second order
(three-point central stencils in the interior, one-sided stencils at the
ends) and integrals use the trapezoid rule, so the whole toolbox is
consistently second order.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError

CENTERINGS = ("node", "xface", "yface", "cell")


def fd_weights(x0: float, xs, m: int) -> np.ndarray:
    """Weights of the ``m``-th derivative at ``x0`` from samples at ``xs``.

    Solves the small Vandermonde system so the stencil is exact on
    polynomials of degree ``len(xs) - 1``.
    """
    xs = np.asarray(xs, dtype=float) - x0
    n = len(xs)
    scale = np.max(np.abs(xs))
    powers = np.vander(xs / scale, n, increasing=True).T
    rhs = np.zeros(n)
    rhs[m] = np.prod(np.arange(1, m + 1))
    return np.linalg.solve(powers, rhs) / scale**m


def _as_key(c):
    return tuple(np.asarray(c, dtype=float).tolist())


@lru_cache(maxsize=64)
def _d1_cached(key):
    c = np.asarray(key)
    n = len(c)
    if n < 3:
        h = c[-1] - c[0]
        return sp.csr_matrix(np.array([[-1.0, 1.0], [-1.0, 1.0]]) / h)
    rows, cols, vals = [], [], []
    for i in range(n):
        idx = [0, 1, 2] if i == 0 else ([n - 3, n - 2, n - 1] if i == n - 1 else [i - 1, i, i + 1])
        w = fd_weights(c[i], c[idx], 1)
        rows += [i] * 3
        cols += idx
        vals += list(w)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


@lru_cache(maxsize=64)
def _d2_cached(key):
    c = np.asarray(key)
    n = len(c)
    if n < 4:
        raise ConfigurationError("second derivative needs at least 4 nodes")
    rows, cols, vals = [], [], []
    for i in range(n):
        if i == 0:
            idx = [0, 1, 2, 3]
        elif i == n - 1:
            idx = [n - 4, n - 3, n - 2, n - 1]
        else:
            idx = [i - 1, i, i + 1]
        w = fd_weights(c[i], c[idx], 2)
        rows += [i] * len(idx)
        cols += idx
        vals += list(w)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def first_derivative_matrix(c) -> sp.csr_matrix:
    """Sparse second-order first-derivative matrix on nodes ``c``."""
    return _d1_cached(_as_key(c))


def second_derivative_matrix(c) -> sp.csr_matrix:
    """Sparse second-derivative matrix (3-point interior, 4-point ends)."""
    return _d2_cached(_as_key(c))


def _apply(mat, f, axis):
    f = np.asarray(f, dtype=float)
    moved = np.moveaxis(f, axis, 0)
    shape = moved.shape
    out = mat @ moved.reshape(shape[0], -1)
    return np.moveaxis(out.reshape(shape), 0, axis)


def diff1(f, c, axis=-1):
    """First derivative of samples ``f`` along ``axis`` with coordinates ``c``."""
    return _apply(first_derivative_matrix(c), f, axis)


def diff2(f, c, axis=-1):
    """Second derivative of samples ``f`` along ``axis`` with coordinates ``c``."""
    return _apply(second_derivative_matrix(c), f, axis)


def trapezoid_weights(c) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    h = np.diff(c)
    w = np.zeros_like(c)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


def cumulative(f, c, axis=-1):
    """Cumulative trapezoid integral from the first node (value 0 there)."""
    from scipy.integrate import cumulative_trapezoid

    return cumulative_trapezoid(f, c, axis=axis, initial=0.0)


def _tail_estimate(f_tail, c_tail):
    """Integral from the last node to infinity of an exponential fit."""
    if f_tail.size < 2:
        return 0.0
    fend = f_tail[-1]
    if not np.all(np.abs(f_tail) > 1e-300) or not (np.all(f_tail > 0) or np.all(f_tail < 0)):
        return 0.0
    slope = np.polyfit(c_tail, np.log(np.abs(f_tail)), 1)[0]
    if not np.isfinite(slope) or slope >= 0.0:
        return 0.0
    return fend / (-slope)


def tail_integral(f, c, axis=-1, fraction=0.1):
    """``int_c^inf f`` at every node.

    The integral to the last node is done by the trapezoid rule; beyond it
    an exponential ``A exp(-lam c)`` is fitted to the last ``fraction`` of
    the samples and integrated analytically.  Tails that do not decay
    monotonically contribute nothing.
    """
    f = np.asarray(f, dtype=float)
    c = np.asarray(c, dtype=float)
    moved = np.moveaxis(f, axis, -1)
    flat = moved.reshape(-1, moved.shape[-1])
    k = max(2, int(round(fraction * len(c))))
    tails = np.array([_tail_estimate(row[-k:], c[-k:]) for row in flat])
    total = cumulative(flat, c, axis=-1)
    out = (total[:, -1:] - total) + tails[:, None]
    return np.moveaxis(out.reshape(moved.shape), -1, axis)


def stretched_nodes(length: float, n: int, beta: float | None = None) -> np.ndarray:
    """Nodes on ``[0, length]``; tanh-clustered toward 0 when ``beta`` is given.

    The map is ``y(s) = length * (1 - tanh(beta (1 - s)) / tanh(beta))`` on a
    uniform ``s`` grid.
    """
    s = np.linspace(0.0, 1.0, n)
    if beta is None:
        return length * s
    y = length * (1.0 - np.tanh(beta * (1.0 - s)) / np.tanh(beta))
    y[0], y[-1] = 0.0, length
    return y


def parse_stretch(stretch) -> float | None:
    """Turn ``"uniform"``, ``"tanh(3)"``, ``("tanh", 3)`` or a number into beta."""
    if stretch is None or stretch == "uniform":
        return None
    if isinstance(stretch, (int, float)):
        beta = float(stretch)
    elif isinstance(stretch, (tuple, list)) and len(stretch) == 2 and stretch[0] == "tanh":
        beta = float(stretch[1])
    else:
        m = re.fullmatch(r"\s*tanh\s*\(\s*([0-9.eE+-]+)\s*\)\s*", str(stretch))
        if not m:
            raise ConfigurationError(f"unknown stretch {stretch!r}")
        beta = float(m.group(1))
    if not beta > 0:
        raise ConfigurationError("tanh stretch needs beta > 0")
    return beta


@dataclass(frozen=True, eq=False)
class Grid2D:
    """Tensor grid on ``[0, L] x [0, Ymax]`` with trapezoid weights."""

    x_nodes: np.ndarray
    y_nodes: np.ndarray
    stretch: str = "uniform"

    def __post_init__(self):
        for name in ("x_nodes", "y_nodes"):
            c = np.asarray(getattr(self, name), dtype=float)
            if c.ndim != 1 or c.size < 2 or c[0] != 0.0 or np.any(np.diff(c) <= 0):
                raise ConfigurationError(f"{name} must start at 0 and increase strictly")
            c.setflags(write=False)
            object.__setattr__(self, name, c)
        object.__setattr__(self, "wx", trapezoid_weights(self.x_nodes))
        object.__setattr__(self, "wy", trapezoid_weights(self.y_nodes))

    @property
    def nx(self):
        return self.x_nodes.size

    @property
    def ny(self):
        return self.y_nodes.size

    @property
    def L(self):
        return float(self.x_nodes[-1])

    @property
    def Ymax(self):
        return float(self.y_nodes[-1])

    @property
    def shape(self):
        return (self.nx, self.ny)

    @property
    def X(self):
        return np.broadcast_to(self.x_nodes[:, None], self.shape)

    @property
    def Y(self):
        return np.broadcast_to(self.y_nodes[None, :], self.shape)

    # array-level helpers used by the solvers
    def dx(self, f):
        return diff1(f, self.x_nodes, axis=0)

    def dy(self, f):
        return diff1(f, self.y_nodes, axis=1)

    def dxx(self, f):
        return diff2(f, self.x_nodes, axis=0)

    def dyy(self, f):
        return diff2(f, self.y_nodes, axis=1)

    def integrate(self, f, n=0):
        weight = (1.0 + self.y_nodes**2) ** (0.5 * n)
        return float(np.einsum("i,j,ij->", self.wx, self.wy * weight, np.asarray(f, dtype=float)))

    def l2(self, f, n=0):
        return float(np.sqrt(max(self.integrate(np.asarray(f) ** 2, n), 0.0)))

    def refined(self, factor=2):
        """Grid with every interval split into ``factor`` equal parts in s."""
        beta = parse_stretch(self.stretch)
        return make_grid(self.L, self.Ymax, factor * (self.nx - 1) + 1,
                         factor * (self.ny - 1) + 1, self.stretch if beta else "uniform")


def make_grid(L, Ymax, nx, ny, stretch="uniform") -> Grid2D:
    """Build a :class:`Grid2D`.

    Parameters
    ----------
    L, Ymax : float
        Domain extents.
    nx, ny : int
        Node counts (at least 2).
    stretch : str or tuple
        ``"uniform"`` or ``"tanh(beta)"`` clustering nodes near ``y = 0``.
    """
    if not (L > 0 and Ymax > 0):
        raise ConfigurationError("L and Ymax must be positive")
    if int(nx) != nx or int(ny) != ny or nx < 2 or ny < 2:
        raise ConfigurationError("nx and ny must be integers >= 2")
    beta = parse_stretch(stretch)
    x = np.linspace(0.0, float(L), int(nx))
    y = stretched_nodes(float(Ymax), int(ny), beta)
    label = "uniform" if beta is None else f"tanh({beta:g})"
    return Grid2D(x, y, label)


@dataclass(frozen=True, eq=False)
class Field2D:
    """Samples on a grid, tagged with their centring.

    Node fields have shape ``(nx, ny)``; x-face fields ``(nx, ny-1)``,
    y-face fields ``(nx-1, ny)`` and cell fields ``(nx-1, ny-1)`` when the
    grid nodes are read as cell corners.
    """

    grid: Grid2D
    values: np.ndarray
    centering: str = "node"

    def __post_init__(self):
        if self.centering not in CENTERINGS:
            raise ConfigurationError(f"unknown centering {self.centering!r}")
        v = np.asarray(self.values, dtype=float)
        nx, ny = self.grid.shape
        expected = {"node": (nx, ny), "xface": (nx, ny - 1),
                    "yface": (nx - 1, ny), "cell": (nx - 1, ny - 1)}[self.centering]
        if v.shape != expected:
            raise ValueError(f"shape {v.shape} does not match {self.centering} {expected}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field contains non-finite values")
        object.__setattr__(self, "values", v)

    def _node(self):
        if self.centering != "node":
            raise ValueError("operator requires a node-centred field")
        return self.values

    def like(self, values):
        return Field2D(self.grid, values, self.centering)


def ddx(f: Field2D) -> Field2D:
    return f.like(f.grid.dx(f._node()))


def ddy(f: Field2D) -> Field2D:
    return f.like(f.grid.dy(f._node()))


def laplace_eps(f: Field2D, eps: float) -> Field2D:
    """``f_yy + eps f_xx`` with second-order stencils."""
    v = f._node()
    return f.like(f.grid.dyy(v) + eps * f.grid.dxx(v))


def norm_L2(f: Field2D, n: int = 0) -> float:
    """``|| <y>^{n/2} f ||_{L^2}`` by tensor trapezoid quadrature."""
    if n < 0:
        raise ValueError("weight power must be non-negative")
    return f.grid.l2(f._node(), n)


def norm_sup(f: Field2D) -> float:
    return float(np.max(np.abs(f.values))) if f.values.size else 0.0


def norm_grad_eps(f: Field2D, eps: float) -> float:
    """``(eps ||f_x||^2 + ||f_y||^2)^{1/2}``."""
    return float(np.sqrt(eps * norm_L2(ddx(f)) ** 2 + norm_L2(ddy(f)) ** 2))
