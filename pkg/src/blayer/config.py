"""JSON configuration of a study: problem data, grids and solver settings."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace

from .data import ProblemData, Profile, Tolerances, default_problem, trivial_problem
from .errors import ConfigurationError

log = logging.getLogger(__name__)

DEFAULT_EPS_LIST = (4e-3, 2e-3, 1e-3, 5e-4)
PROFILE_KEYS = ("u_e0", "ubar0", "ubar1", "Vb0", "VbL", "ub1", "chi")
SCALAR_KEYS = ("L", "u_b", "gamma", "kappa", "lipschitz_C", "auto_compat")


@dataclass
class GridSpec:
    nx: int = 65
    ny: int = 257
    Ymax: float = 20.0
    stretch: str = "tanh(3)"
    Zmax: float = 10.0
    nz: int = 513
    drift_check: bool = True
    drift_tol: float = 0.10


@dataclass
class RemainderSpec:
    nx: int = 16
    ny: int = 128
    H: float | None = None          # defaults to Ymax
    n_random: int = 20
    C_energy: float = 10.0
    C_vort: float = 20.0
    min_eps: float = 5e-4
    tol: float = 1e-8
    max_iter: int = 50


@dataclass
class StudyConfig:
    problem: dict = field(default_factory=lambda: {"base": "default"})
    eps_list: tuple = DEFAULT_EPS_LIST
    grid: GridSpec = field(default_factory=GridSpec)
    remainder: RemainderSpec = field(default_factory=RemainderSpec)
    include_euler_p2: bool = False
    seed: int = 0
    tolerances: dict = field(default_factory=dict)

    def problem_data(self, eps) -> ProblemData:
        return build_problem(self.problem, eps, self.tolerances)

    def as_dict(self):
        d = asdict(self)
        d["eps_list"] = list(self.eps_list)
        return d


def build_problem(spec: dict, eps, tolerances=None) -> ProblemData:
    """Problem data from a config block: a base data set plus overrides."""
    spec = dict(spec or {})
    base = spec.pop("base", "default")
    L = float(spec.get("L", 0.1))
    if base == "default":
        pd = default_problem(eps, L)
    elif base == "trivial":
        pd = trivial_problem(eps, L)
    else:
        raise ConfigurationError(f"unknown problem base {base!r}")
    updates = {}
    for k, v in spec.items():
        if k in PROFILE_KEYS:
            updates[k] = Profile.from_spec(v)
        elif k in SCALAR_KEYS:
            updates[k] = bool(v) if k == "auto_compat" else float(v)
        else:
            raise ConfigurationError(f"unknown problem key {k!r}")
    if tolerances:
        try:
            updates["tolerances"] = Tolerances(**{k: float(v) for k, v in tolerances.items()})
        except TypeError as exc:
            raise ConfigurationError(f"bad tolerances: {exc}") from exc
    return replace(pd, **updates)


def _section(cls, raw, name):
    raw = raw or {}
    known = set(cls.__dataclass_fields__)
    extra = set(raw) - known
    if extra:
        raise ConfigurationError(f"unknown keys in {name}: {sorted(extra)}")
    return cls(**raw)


def config_from_dict(raw: dict) -> StudyConfig:
    raw = dict(raw or {})
    known = {"problem", "eps_list", "grid", "remainder", "include_euler_p2", "seed", "tolerances"}
    extra = set(raw) - known
    if extra:
        raise ConfigurationError(f"unknown config keys: {sorted(extra)}")
    eps_list = tuple(float(e) for e in raw.get("eps_list", DEFAULT_EPS_LIST))
    if not eps_list or min(eps_list) <= 0:
        raise ConfigurationError("eps_list must hold positive values")
    return StudyConfig(
        problem=raw.get("problem", {"base": "default"}),
        eps_list=eps_list,
        grid=_section(GridSpec, raw.get("grid"), "grid"),
        remainder=_section(RemainderSpec, raw.get("remainder"), "remainder"),
        include_euler_p2=bool(raw.get("include_euler_p2", False)),
        seed=int(raw.get("seed", 0)),
        tolerances=raw.get("tolerances", {}),
    )


def load_config(path) -> StudyConfig:
    if path is None:
        return StudyConfig()
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)
