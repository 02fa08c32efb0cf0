"""Problem data: profiles, validation and compatibility at the corners.

A :class:`ProblemData` bundles everything the expansion needs: the
viscosity, the box length, the exponents of the remainder, the plate speed
and the one-dimensional profiles (outer shear flow, inflow traces and the
cut-off).  Profiles are :class:`Profile` objects that return values and
derivatives, either from a symbolic expression or from samples.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import sympy
from scipy.interpolate import CubicSpline

from .errors import ConfigurationError

log = logging.getLogger(__name__)

_SYMPY_NS = {name: getattr(sympy, name) for name in (
    "exp", "log", "sin", "cos", "tan", "sinh", "cosh", "tanh", "sqrt", "pi", "erf", "Abs")}


class Profile:
    """A smooth scalar function of one variable with derivatives.

    Call as ``p(s)`` or ``p(s, nu)`` for the ``nu``-th derivative.
    """

    def __init__(self, fn: Callable, spec=None, support=None):
        self._fn = fn
        self.spec = spec if spec is not None else {"type": "callable"}
        self.support = support

    def __call__(self, s, nu=0):
        s = np.asarray(s, dtype=float)
        out = np.asarray(self._fn(s, nu), dtype=float)
        out = np.broadcast_to(out, s.shape).copy() if out.shape != s.shape else out
        if self.support is not None:
            lo, hi = self.support
            out = np.where((s >= lo) & (s <= hi), out, 0.0)
        return out

    @classmethod
    def from_expr(cls, expr: str, support=None, max_order=4):
        try:
            sym = sympy.sympify(expr, locals=_SYMPY_NS)
        except (sympy.SympifyError, SyntaxError, TypeError) as exc:
            raise ConfigurationError(f"cannot parse profile {expr!r}: {exc}") from exc
        free = sorted(sym.free_symbols, key=str)
        if len(free) > 1:
            raise ConfigurationError(f"profile {expr!r} has more than one variable")
        var = free[0] if free else sympy.Symbol("s")
        funcs = [sympy.lambdify(var, sympy.diff(sym, var, k), "numpy") for k in range(max_order + 1)]

        def fn(s, nu):
            if nu > max_order:
                raise ValueError(f"derivative order {nu} not available")
            return funcs[nu](s)

        spec = {"type": "expr", "expr": expr}
        if support is not None:
            spec["support"] = list(support)
        return cls(fn, spec, support)

    @classmethod
    def from_samples(cls, s, values):
        s = np.asarray(s, dtype=float)
        values = np.asarray(values, dtype=float)
        if s.ndim != 1 or s.size < 4 or np.any(np.diff(s) <= 0):
            raise ConfigurationError("sampled profile needs >= 4 increasing abscissae")
        spline = CubicSpline(s, values)

        def fn(t, nu):
            inside = spline(np.clip(t, s[0], s[-1]), nu)
            # constant continuation outside the sampled range
            if nu == 0:
                return np.where(t < s[0], values[0], np.where(t > s[-1], values[-1], inside))
            return np.where((t < s[0]) | (t > s[-1]), 0.0, inside)

        return cls(fn, {"type": "samples", "s": s.tolist(), "values": values.tolist()})

    @classmethod
    def constant(cls, c):
        return cls.from_expr(repr(float(c)))

    @classmethod
    def from_spec(cls, spec):
        if isinstance(spec, (int, float)):
            return cls.constant(spec)
        if isinstance(spec, str):
            return cls.from_expr(spec)
        kind = spec.get("type")
        if kind == "expr":
            return cls.from_expr(spec["expr"], spec.get("support"))
        if kind == "samples":
            return cls.from_samples(spec["s"], spec["values"])
        if kind == "sum":
            terms = [(float(c), cls.from_spec(t)) for c, t in spec["terms"]]
            return Profile.combine(terms)
        raise ConfigurationError(f"unknown profile type {kind!r}")

    @staticmethod
    def combine(terms):
        """Linear combination ``sum c_k p_k`` of profiles."""
        def fn(s, nu):
            return sum(c * p(s, nu) for c, p in terms)

        return Profile(fn, {"type": "sum", "terms": [[c, p.spec] for c, p in terms]})

    def plus(self, coef, other):
        return Profile.combine([(1.0, self), (float(coef), other)])


def default_chi() -> Profile:
    """Polynomial bump ``(1-s)^4 (1+4s)`` on ``[0, 1]``, zero beyond."""
    return Profile.from_expr("(1 - s)**4*(1 + 4*s)", support=(-np.inf, 1.0))


@dataclass(frozen=True)
class Tolerances:
    tol_newton: float = 1e-11
    tol_linear: float = 1e-9
    tol_compat: float = 1e-6
    tol_lift: float = 1e-12


@dataclass(frozen=True)
class ProblemData:
    """All given data of the expansion problem.

    ``u_e0`` is a function of the outer variable ``Y``; ``ubar0`` and
    ``ubar1`` are functions of the layer variable ``y``; ``Vb0``, ``VbL``
    and ``ub1`` are functions of ``z``; ``chi`` is the cut-off.
    """

    eps: float
    L: float
    u_b: float
    u_e0: Profile
    ubar0: Profile
    ubar1: Profile
    Vb0: Profile
    VbL: Profile
    ub1: Profile
    chi: Profile = field(default_factory=default_chi)
    gamma: float = 0.2
    kappa: float = 0.01
    tolerances: Tolerances = field(default_factory=Tolerances)
    lipschitz_C: float = 10.0
    auto_compat: bool = False

    @property
    def u_e(self):
        """Outer velocity at the wall, ``u_e^0(0)``."""
        return float(self.u_e0(0.0))

    def with_eps(self, eps):
        return replace(self, eps=float(eps))

    def describe(self):
        return {
            "eps": self.eps, "L": self.L, "u_b": self.u_b, "gamma": self.gamma,
            "kappa": self.kappa, "lipschitz_C": self.lipschitz_C,
            "auto_compat": self.auto_compat,
            "profiles": {k: getattr(self, k).spec for k in
                         ("u_e0", "ubar0", "ubar1", "Vb0", "VbL", "ub1", "chi")},
            "tolerances": vars(self.tolerances),
        }


def default_problem(eps=1e-3, L=0.1) -> ProblemData:
    """Demo data: ``u_e^0 = 1 + exp(-Y)``, ``u_b = 1.7`` and Gaussian traces.

    The inflow trace is ``(u_b - u_e)(1 + s^2) exp(-s^2)`` with
    ``s = y / 3.5``: it matches ``u_b - u_e`` at the wall, has zero
    curvature there (so the layer equation is compatible at the leading
    corner) and is wide enough that the layer evolves slowly over ``[0, L]``.
    The corner values of the Euler traces and of the first-order inflow are
    fixed by :func:`enforce_corner_compatibility` and
    :func:`enforce_inflow_compatibility` (``auto_compat=True``).
    """
    u_b, u_e, width = 1.7, 2.0, 3.5
    return ProblemData(
        eps=eps, L=L, u_b=u_b,
        u_e0=Profile.from_expr("1 + exp(-Y)"),
        ubar0=Profile.from_expr(f"{u_b - u_e}*(1 + (y/{width})**2)*exp(-(y/{width})**2)"),
        ubar1=Profile.from_expr("-0.2*exp(-y**2)"),
        Vb0=Profile.from_expr("0.1*z*exp(-z**2)"),
        VbL=Profile.from_expr(f"{0.1 + 0.5 * L}*z*exp(-z**2)"),
        ub1=Profile.from_expr("0.2*exp(-z**2)"),
        auto_compat=True,
    )


def trivial_problem(eps=1e-3, L=0.1) -> ProblemData:
    """Zero-mismatch data: the wall moves with the outer flow, no corrections."""
    zero = Profile.constant(0.0)
    return ProblemData(
        eps=eps, L=L, u_b=2.0, u_e0=Profile.from_expr("1 + exp(-Y)"),
        ubar0=zero, ubar1=zero, Vb0=zero, VbL=zero, ub1=zero,
    )


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    message: str = ""


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def get(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def as_dict(self):
        return {c.name: {"passed": c.passed, "value": c.value, "message": c.message}
                for c in self.checks}


def nozero_margin(pd: ProblemData, y) -> float:
    """``min_y u_e^0(sqrt(eps) y) + ubar0(y)`` over the given nodes."""
    y = np.asarray(y, dtype=float)
    return float(np.min(pd.u_e0(np.sqrt(pd.eps) * y) + pd.ubar0(y)))


def validate(pd: ProblemData, grid, Zmax=10.0) -> ValidationReport:
    """Run the structural checks on the data; never raises."""
    rep = ValidationReport()
    y = grid.y_nodes
    z = np.linspace(0.0, Zmax, 2001)

    def add(name, ok, value, msg=""):
        rep.checks.append(Check(name, bool(ok), float(value), msg))

    add("eps_positive", pd.eps > 0, pd.eps)
    add("L_positive", pd.L > 0, pd.L)
    add("u_b_positive", pd.u_b > 0, pd.u_b)
    ue_min = float(np.min(pd.u_e0(np.sqrt(pd.eps) * y)))
    add("u_e0_positive", ue_min > 0, ue_min)
    m = nozero_margin(pd, y)
    add("nozero", m > 0, m, "min of u_e^0(sqrt(eps) y) + ubar0(y)")
    add("gamma_range", 0 < pd.gamma < 0.25, pd.gamma, "need 0 < gamma < 1/4")
    add("kappa_range", 0 < pd.kappa < 0.25 - pd.gamma, pd.kappa, "need 0 < kappa < 1/4 - gamma")
    lip = float(np.max(np.abs(pd.VbL(z) - pd.Vb0(z))))
    add("trace_lipschitz", lip <= pd.lipschitz_C * pd.L, lip, f"max|VbL-Vb0| <= {pd.lipschitz_C}*L")
    add("ubar0_decay", abs(float(pd.ubar0(grid.Ymax))) <= 1e-6, float(pd.ubar0(grid.Ymax)))
    add("ubar1_decay", abs(float(pd.ubar1(grid.Ymax))) <= 1e-6, float(pd.ubar1(grid.Ymax)))
    for name in ("Vb0", "VbL", "ub1"):
        val = float(getattr(pd, name)(Zmax))
        add(f"{name}_decay", abs(val) <= 1e-6, val)
    s = np.linspace(0.0, 1.5, 3001)
    chi0 = float(pd.chi(0.0))
    add("chi_at_zero", abs(chi0 - 1.0) <= 1e-12, chi0)
    tail = float(np.max(np.abs(pd.chi(s[s >= 1.0]))))
    add("chi_support", tail <= 1e-12, tail)
    chi2 = float(np.max(np.abs(pd.chi(s, 2))))
    add("chi_c2", np.isfinite(chi2), chi2, "sampled second derivative bounded")
    return rep


def compat_check(pd: ProblemData, layer0):
    """Corner mismatches ``|Vb0(0) + v_p^0(0,0)|`` and ``|VbL(0) + v_p^0(L,0)|``."""
    m0 = abs(float(pd.Vb0(0.0)) + layer0.v_p0[0, 0])
    mL = abs(float(pd.VbL(0.0)) + layer0.v_p0[-1, 0])
    return m0, mL, (m0 <= pd.tolerances.tol_compat and mL <= pd.tolerances.tol_compat)


def enforce_corner_compatibility(pd: ProblemData, layer0) -> ProblemData:
    """Shift the Euler traces by Gaussians so their wall values match ``-v_p^0``."""
    bump = Profile.from_expr("exp(-z**2)")
    d0 = -layer0.v_p0[0, 0] - float(pd.Vb0(0.0))
    dL = -layer0.v_p0[-1, 0] - float(pd.VbL(0.0))
    return replace(pd, Vb0=pd.Vb0.plus(d0, bump), VbL=pd.VbL.plus(dL, bump))


def enforce_inflow_compatibility(pd: ProblemData, ubar1_0: float, ubar1_yy0: float) -> ProblemData:
    """Adjust ``ubar1`` so its wall value and curvature take the given values.

    Adds ``a exp(-y^2) + b y^2 exp(-y)``; the second term changes only the
    curvature at the wall.
    """
    p0 = float(pd.ubar1(0.0))
    a = ubar1_0 - p0
    g = Profile.from_expr("exp(-y**2)")
    q = Profile.from_expr("y**2*exp(-y)")
    shifted = pd.ubar1.plus(a, g)
    b = 0.5 * (ubar1_yy0 - float(shifted(0.0, 2)))
    return replace(pd, ubar1=shifted.plus(b, q))
