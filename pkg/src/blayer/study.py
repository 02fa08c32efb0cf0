"""Per-eps pipeline, rate fits, inviscid-limit surrogates and report files."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .assembly import CLAIMED_EXPONENTS, assemble, euler_only_norm, residual_report, residuals
from .config import GridSpec, RemainderSpec, StudyConfig
from .data import compat_check, enforce_corner_compatibility, enforce_inflow_compatibility, validate
from .errors import BlayerError, ConfigurationError, DivergenceError, StageError, ValidationError
from .euler1 import EulerSampler, solve_euler_corrector
from .grid import make_grid
from .pipeline import inflow_targets
from .prandtl0 import check_max_principle, march_prandtl0, weighted_norms
from .prandtl1 import layer_fields, solve_prandtl1
from .remainder import (GridSampler, LinearizedOperator, energy_check,
                        make_mac_grid, nonlinear_iterate, random_forcing, shear_background,
                        stability_ratio, vorticity_check)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STAGES = ("validate", "prandtl0", "euler1", "prandtl1", "residual", "remainder", "iterate")
DRIFT_KEYS = ("combined", "E0", "Ru1", "Rv0", "px2")
SUMMARY_COLUMNS = (
    "schema_version", "eps", "status", "failed_stage", "nozero_margin", "max_principle_margin",
    "norm_Ru", "norm_Rv", "sqrt_eps_Rv", "combined", "euler_only",
    "E0", "Ru0", "Ru1", "Rv0", "Ru1p", "px2", "epsilon_order_terms", "div_p1", "max_drift",
    "stability_ratio_min", "stability_ratio_max", "energy_ratio_max", "vorticity_ratio_max",
    "remainder_divergence", "iterate_status", "iterations", "contraction", "x_norm",
    "sup_u_diff", "sup_v_diff",
)
FIT_QUANTITIES = ("combined", "norm_Ru", "sqrt_eps_Rv", "E0", "Ru1", "Rv0", "px2", "Ru1p")


# ---------------------------------------------------------------- fits

def fit_rate(points):
    """Least-squares slope of ``log(value)`` against ``log(eps)``.

    Non-positive or non-finite values are dropped with a warning; fewer than
    three usable points raise :class:`ConfigurationError`.
    """
    pts = []
    for e, v in points:
        if v is None or not np.isfinite(v) or v <= 0 or e <= 0:
            log.warning("fit_rate: dropping point (%r, %r)", e, v)
            continue
        pts.append((float(e), float(v)))
    if len(pts) < 3:
        raise ConfigurationError(f"need >= 3 positive points to fit a rate, got {len(pts)}")
    le = np.log([p[0] for p in pts])
    lv = np.log([p[1] for p in pts])
    A = np.vstack([le, np.ones_like(le)]).T
    (slope, intercept), *_ = np.linalg.lstsq(A, lv, rcond=None)
    pred = A @ np.array([slope, intercept])
    ss_res = float(np.sum((lv - pred) ** 2))
    ss_tot = float(np.sum((lv - lv.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {"slope": float(slope), "intercept": float(intercept), "r2": float(r2), "n": len(pts)}


# ---------------------------------------------------------------- stages

def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except DivergenceError:
        raise
    except (BlayerError, ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
        raise StageError(name, exc) from exc


def build_chain(pd, grid, gs: GridSpec, include_euler_p2=False, until="residual"):
    """Run the profile stages up to ``until``; returns a dict of artifacts."""
    out = {"pd": pd, "grid": grid}
    stop = STAGES.index(until)
    layer0 = _stage("prandtl0", march_prandtl0, pd, grid)
    out["layer0"] = layer0
    if pd.auto_compat:
        pd = enforce_corner_compatibility(pd, layer0)
    out["compat"] = compat_check(pd, layer0)
    if stop < STAGES.index("euler1"):
        out["pd"] = pd
        return out
    euler = _stage("euler1", solve_euler_corrector, pd, layer0, Zmax=gs.Zmax, nz=gs.nz)
    out["euler"] = euler
    if pd.auto_compat:
        pd = enforce_inflow_compatibility(pd, *inflow_targets(pd, layer0, euler))
    out["pd"] = pd
    if stop < STAGES.index("prandtl1"):
        return out
    sampler = EulerSampler(euler)
    lf = _stage("prandtl1", layer_fields, pd, layer0, sampler)
    corr = _stage("prandtl1", solve_prandtl1, pd, layer0, lf, include_euler_p2=include_euler_p2,
                  sources=False)
    out.update(sampler=sampler, lf=lf, corr=corr)
    if stop < STAGES.index("residual"):
        return out
    approx = assemble(pd, lf, corr)
    out["approx"] = approx
    out["report"] = _stage("residual", residual_report, pd, lf, corr, sampler, approx)
    return out


def residual_numbers(pd, grid, chain):
    rep = chain["report"]
    b = rep.budget
    rec = {"norm_Ru": rep.norm_Ru, "norm_Rv": rep.norm_Rv,
           "sqrt_eps_Rv": math.sqrt(pd.eps) * rep.norm_Rv, "combined": rep.combined,
           "euler_only": euler_only_norm(pd, grid)}
    rec.update({k: float(v) for k, v in b.items()})
    corr = chain["corr"]
    rec["div_p1"] = float(np.max(np.abs(grid.dx(corr.u_p1) + grid.dy(corr.v_p1))))
    return rec


def linear_battery(bg, mac, eps, n_random, seed, C_energy=10.0, C_vort=20.0):
    """Stability ratios and energy/vorticity checks for random smooth forcing."""
    op = LinearizedOperator(bg, mac, eps)
    rng = np.random.default_rng(seed)
    ratios, en, vo, div, passes = [], [], [], [], True
    for _ in range(n_random):
        sol = op.solve(*random_forcing(mac, rng, eps=eps))
        ratios.append(stability_ratio(sol))
        e = energy_check(sol, bg, C_energy)
        v = vorticity_check(sol, bg, C_vort)
        en.append(e["ratio"])
        vo.append(v["ratio"])
        div.append(sol.diagnostics["max_divergence"])
        passes = passes and e["pass"] and v["pass"]
    return {"stability_ratio_min": float(np.min(ratios)), "stability_ratio_max": float(np.max(ratios)),
            "stability_ratio_median": float(np.median(ratios)),
            "energy_ratio_max": float(np.max(en)), "vorticity_ratio_max": float(np.max(vo)),
            "energy_vorticity_pass": bool(passes), "C_energy": C_energy, "C_vort": C_vort,
            "remainder_divergence": float(np.max(div)), "n_random": n_random,
            "mac": {"nx": mac.nx, "ny": mac.ny, "L": mac.L, "H": mac.H}}


def corollary_sups(approx, sol, gamma):
    """``sup|U - u_e^0 - u_p^0|`` and ``sup|V - sqrt(eps)(v_p^0 + v_e^1)|`` in original variables.

    ``U = u_app + eps^(gamma+1/2) u`` and ``V = sqrt(eps)(v_app + eps^(gamma+1/2) v)``,
    evaluated at the staggered velocity points of the remainder grid.
    """
    eps, m, p = approx.eps, sol.mac, approx.parts
    se = math.sqrt(eps)
    smp = GridSampler(approx.grid, {"du": se * (p["ue1"] + p["up1"]), "dv": se * p["vp1"]})
    s = eps ** (gamma + 0.5)
    du = smp("du", m.xu, m.yu) + s * sol.u
    dv = se * (smp("dv", m.xv, m.yv) + s * sol.v)
    return float(np.max(np.abs(du))), float(np.max(np.abs(dv)))


def _drift(pd, gs, include_euler_p2, base):
    grid = make_grid(pd.L, gs.Ymax, 2 * (gs.nx - 1) + 1, 2 * (gs.ny - 1) + 1, gs.stretch)
    fine = build_chain(pd, grid, gs, include_euler_p2)
    fine_rec = residual_numbers(fine["pd"], grid, fine)
    return {k: abs(fine_rec[k] - base[k]) / max(abs(fine_rec[k]), 1e-300) for k in DRIFT_KEYS}


def run_pipeline(pd, gs: GridSpec, rs: RemainderSpec | None = None, seed=0, until="iterate",
                 include_euler_p2=False, force=False, skip_remainder=False, out_dir=None):
    """Full per-eps record; failures are recorded, never raised.

    Stages run in the order of :data:`STAGES` up to ``until``.  The
    remainder stages run when ``eps >= rs.min_eps`` and ``skip_remainder``
    is false.  With ``out_dir`` the record and profile slices are written
    under ``out_dir/eps_<eps>``.
    """
    rs = rs or RemainderSpec()
    t0 = time.perf_counter()
    rec = {"eps": float(pd.eps), "status": "ok", "failed_stage": "", "message": "", "times": {}}
    stop = STAGES.index(until)
    grid = make_grid(pd.L, gs.Ymax, gs.nx, gs.ny, gs.stretch)
    rec["grid"] = {"nx": gs.nx, "ny": gs.ny, "Ymax": gs.Ymax, "stretch": grid.stretch,
                   "Zmax": gs.Zmax, "nz": gs.nz}
    chain = {}
    try:
        rep = validate(pd, grid, gs.Zmax)
        rec["validation"] = rep.as_dict()
        rec["nozero_margin"] = rep.get("nozero").value
        if not rep.passed and not force:
            raise StageError("validate", ValidationError(rep))
        if stop == 0:
            return _finish(rec, t0, out_dir, chain)
        chain_until = STAGES[min(stop, STAGES.index("residual"))]
        chain = build_chain(pd, grid, gs, include_euler_p2, chain_until)
        pd_in, pd = pd, chain["pd"]
        layer0 = chain["layer0"]
        rec["max_principle_margin"] = check_max_principle(layer0)
        rec["weighted_norms"] = {f"N{j}": weighted_norms(layer0, 0, j) for j in (0, 1, 2)}
        m0, mL, ok = chain["compat"]
        rec["compat"] = {"corner_inflow": m0, "corner_outflow": mL, "ok": bool(ok)}
        rec["times"]["profiles"] = time.perf_counter() - t0
        if "euler" in chain:
            rec["euler"] = chain["euler"].norms()
        if "corr" in chain:
            rec["prandtl1"] = dict(chain["corr"].diagnostics)
        if "report" not in chain:
            return _finish(rec, t0, out_dir, chain)
        rec.update(residual_numbers(pd, grid, chain))
        if gs.drift_check:
            t1 = time.perf_counter()
            drift = _stage("residual", _drift, pd_in, gs, include_euler_p2, rec)
            rec["drift"] = drift
            rec["max_drift"] = max(drift.values())
            rec["drift_ok"] = bool(rec["max_drift"] <= gs.drift_tol)
            rec["times"]["drift"] = time.perf_counter() - t1
        if stop < STAGES.index("remainder") or skip_remainder or pd.eps < rs.min_eps:
            if stop >= STAGES.index("remainder"):
                rec["iterate_status"] = "skipped"
            return _finish(rec, t0, out_dir, chain)
        t1 = time.perf_counter()
        approx = chain["approx"]
        bg = _stage("remainder", shear_background, approx)
        mac = make_mac_grid(pd.L, rs.H or gs.Ymax, rs.nx, rs.ny)
        rec.update(_stage("remainder", linear_battery, bg, mac, pd.eps, rs.n_random, seed,
                          rs.C_energy, rs.C_vort))
        rec["times"]["remainder"] = time.perf_counter() - t1
        if stop < STAGES.index("iterate"):
            return _finish(rec, t0, out_dir, chain)
        t1 = time.perf_counter()
        Ru, Rv = residuals(approx)
        try:
            it = nonlinear_iterate(approx, Ru, Rv, bg, mac, pd.gamma, pd.kappa, rs.tol, rs.max_iter)
        except DivergenceError as exc:
            rec.update(iterate_status="diverged", trace=exc.trace, iterations=len(exc.trace))
        else:
            rec.update(iterate_status="converged" if it.converged else "max_iter",
                       iterations=len(it.trace), contraction=it.contraction,
                       consistency=it.consistency, x_norm=it.trace[-1]["x_norm"], trace=it.trace)
            rec["sup_u_diff"], rec["sup_v_diff"] = corollary_sups(approx, it.solution, pd.gamma)
            chain["remainder"] = it.solution
        rec["times"]["iterate"] = time.perf_counter() - t1
    except StageError as exc:
        rec.update(status="failed", failed_stage=exc.stage, message=str(exc))
        log.error("eps=%g failed: %s", pd.eps, exc)
    return _finish(rec, t0, out_dir, chain)


def _finish(rec, t0, out_dir, chain):
    rec["times"]["total"] = time.perf_counter() - t0
    if out_dir is not None:
        write_eps_artifacts(rec, chain, out_dir)
    return rec


def eps_dir(out_dir, eps):
    return Path(out_dir) / f"eps_{eps:.6e}"


def write_eps_artifacts(rec, chain, out_dir):
    d = eps_dir(out_dir, rec["eps"])
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "record.json", "w") as fh:
        json.dump(to_jsonable(rec), fh, indent=1, sort_keys=True)
    _write_field_csvs(d, chain)
    approx = chain.get("approx")
    if approx is not None:
        g = approx.grid
        cols = np.column_stack([g.y_nodes, approx.u_app[-1], approx.v_app[-1], approx.p_app[-1],
                                approx.parts["up0"][-1], approx.parts["up1"][-1]])
        np.savetxt(d / "outflow_profiles.dat", cols, fmt="%.17g",
                   header="y u_app v_app p_app u_p0 u_p1   (x = L)")
    trace = rec.get("trace")
    if trace:
        np.savetxt(d / "iteration.dat",
                   np.array([[t["iteration"], t["x_norm"], t["change"]] for t in trace]),
                   fmt="%.17g", header="iteration x_norm change")


def _field_csv(path, x, y, fields):
    """Long-format ``x,y,<name>...`` table of node fields."""
    X, Y = np.meshgrid(x, y, indexing="ij")
    cols = [X.ravel(), Y.ravel()] + [np.asarray(f).ravel() for f in fields.values()]
    np.savetxt(path, np.column_stack(cols), fmt="%.17g", delimiter=",",
               header=",".join(["x", "y", *fields]), comments="")


def _write_field_csvs(d, chain):
    if "layer0" in chain:
        l0 = chain["layer0"]
        _field_csv(d / "prandtl0_fields.csv", l0.x, l0.y, {"u_p0": l0.u_p0, "v_p0": l0.v_p0})
        _field_csv(d / "prandtl0_vonmises.csv", l0.x, l0.eta, {"W": l0.W, "w_shift": l0.w_shift})
    if "euler" in chain:
        e = chain["euler"]
        _field_csv(d / "euler1_fields.csv", e.x, e.z,
                   {"v_e1": e.v_e1, "u_e1": e.u_e1, "p_e1": e.p_e1, "E_b": e.E_b})
    if "corr" in chain:
        c = chain["corr"]
        g = c.grid
        _field_csv(d / "prandtl1_fields.csv", g.x_nodes, g.y_nodes,
                   {"v_p": c.v_p, "u_p": c.u_p, "u_p1": c.u_p1, "v_p1": c.v_p1, "p_p2": c.p_p2})


# ---------------------------------------------------------------- sweep

def _worker(args):
    cfg, eps, until, force, skip_remainder, out_dir = args
    pd = cfg.problem_data(eps)
    return run_pipeline(pd, cfg.grid, cfg.remainder, cfg.seed, until, cfg.include_euler_p2,
                        force, skip_remainder, out_dir)


def pool_width(n_jobs):
    try:
        width = int(os.environ.get("BLAYER_THREADS", "1"))
    except ValueError:
        width = 1
    return max(1, min(width, n_jobs))


def run_study(cfg: StudyConfig, until="iterate", force=False, skip_remainder=False, out_dir=None):
    """Run every eps of the config and collect the report (records by decreasing eps)."""
    t0 = time.perf_counter()
    eps_list = sorted(set(cfg.eps_list), reverse=True)
    jobs = [(cfg, e, until, force, skip_remainder, out_dir) for e in eps_list]
    width = pool_width(len(jobs))
    if width > 1:
        with ProcessPoolExecutor(max_workers=width) as ex:
            records = list(ex.map(_worker, jobs))
    else:
        records = [_worker(j) for j in jobs]
    records.sort(key=lambda r: -r["eps"])
    report = {"schema_version": SCHEMA_VERSION, "stage": until, "config": cfg.as_dict(),
              "records": records, "fits": fit_records(records),
              "claimed_exponents": dict(CLAIMED_EXPONENTS)}
    report["corollary"] = corollary_check(records)
    report["wall_time"] = time.perf_counter() - t0
    return report


def fit_records(records):
    ok = [r for r in records if r.get("status") == "ok"]
    fits = {}
    for q in FIT_QUANTITIES:
        pts = [(r["eps"], r[q]) for r in ok if q in r]
        if len(pts) >= 3:
            try:
                fits[q] = fit_rate(pts)
            except ConfigurationError as exc:
                log.warning("no fit for %s: %s", q, exc)
    return fits


def corollary_check(records):
    """Rate fits of the sup-differences when at least three iterations converged."""
    conv = [r for r in records if r.get("iterate_status") == "converged" and "sup_u_diff" in r]
    if len(conv) < 3:
        diverged = [r["eps"] for r in records if r.get("iterate_status") == "diverged"]
        return {"status": "skipped", "converged_count": len(conv), "diverged_eps": diverged,
                "notice": "fewer than 3 converged remainder iterations"}
    fu = fit_rate([(r["eps"], r["sup_u_diff"]) for r in conv])
    fv = fit_rate([(r["eps"], r["sup_v_diff"]) for r in conv])
    return {"status": "ok", "converged_count": len(conv), "u_fit": fu, "v_fit": fv,
            "max_contraction": max(r["contraction"] for r in conv)}


# ---------------------------------------------------------------- output

def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    return obj


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def emit_report(report, out_dir):
    """Write ``report.json``, ``summary.csv``, ``fits.csv`` and ``*.dat`` files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = report.get("records", [])
    with open(out / "report.json", "w") as fh:
        json.dump(to_jsonable(report), fh, indent=1, sort_keys=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for r in records:
            row = dict(r, schema_version=SCHEMA_VERSION)
            w.writerow([_fmt(row.get(c)) for c in SUMMARY_COLUMNS])
    with open(out / "fits.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("schema_version", "quantity", "slope", "intercept", "r2", "n_points", "claimed"))
        fits = dict(report.get("fits", {}))
        cor = report.get("corollary", {})
        if cor.get("status") == "ok":
            fits["sup_u_diff"], fits["sup_v_diff"] = cor["u_fit"], cor["v_fit"]
        for q, f in fits.items():
            w.writerow([SCHEMA_VERSION, q, _fmt(f["slope"]), _fmt(f["intercept"]), _fmt(f["r2"]),
                        f["n"], _fmt(CLAIMED_EXPONENTS.get(q))])
    if any("combined" in r for r in records):
        cols = ("eps", "norm_Ru", "norm_Rv", "combined", "E0", "Ru0", "Ru1", "Rv0", "Ru1p", "px2")
        with open(out / "residuals.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in records:
                if "combined" in r:
                    w.writerow([_fmt(r.get(c)) for c in cols])
        with open(out / "residuals.json", "w") as fh:
            json.dump(to_jsonable({"records": [{c: r.get(c) for c in cols} for r in records
                                               if "combined" in r],
                                   "fits": report.get("fits", {})}), fh, indent=1, sort_keys=True)
    _write_dat(out / "residuals.dat", records,
               ("eps", "norm_Ru", "sqrt_eps_Rv", "combined", "euler_only"))
    _write_dat(out / "budget.dat", records, ("eps", "E0", "Ru0", "Ru1", "Rv0", "Ru1p", "px2"))
    _write_dat(out / "remainder.dat", records,
               ("eps", "stability_ratio_min", "stability_ratio_max", "x_norm", "sup_u_diff", "sup_v_diff"))
    return [out / n for n in ("report.json", "summary.csv", "fits.csv", "residuals.dat",
                              "budget.dat", "remainder.dat")]


def _write_dat(path, records, cols):
    with open(path, "w") as fh:
        fh.write("# " + " ".join(cols) + "\n")
        for r in records:
            if all(c in r and r[c] is not None for c in cols):
                fh.write(" ".join(_fmt(r[c]) for c in cols) + "\n")
