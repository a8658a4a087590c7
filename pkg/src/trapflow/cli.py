"""``trapflow`` command line: batch experiments with CSV artifacts and JSON run manifests.

Usage: ``trapflow <subcommand> --config run.json [--seed n] [--out dir] [--emit-gnuplot]``.

A config is a JSON object with ``scene`` and ``field`` (inline documents or paths
relative to the config file), an optional ``seed``, a ``params`` block for the
subcommand and a ``checks`` block of verdict thresholds.  Exit status is 0 iff every
declared check passes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .geometry import TWO_PI, GeometryError, Scene, boundary_samples, sdist, torus_dist
from .parallel import apply_thread_cap

SUBCOMMANDS = ("geometry-check", "exit-stats", "splitting", "aux1d", "kj-solve", "resolvent-check",
               "glue-vs-pde", "trace-converge", "metastable", "metastable-sim")


class ConfigError(ValueError):
    pass


# -- configuration ----------------------------------------------------------------

@dataclass
class ExperimentConfig:
    subcommand: str
    raw: dict
    base: Path
    seed: int
    out: Path

    @property
    def params(self) -> dict:
        return self.raw.get("params", {})

    @property
    def checks(self) -> dict:
        return self.raw.get("checks", {})

    def param(self, key: str, default: Any = ...) -> Any:
        if key in self.params:
            return self.params[key]
        if default is ...:
            raise ConfigError(f"params.{key}: required field missing")
        return default

    def _doc(self, key: str):
        val = self.raw.get(key)
        if val is None:
            raise ConfigError(f"{key}: required field missing")
        if isinstance(val, str):
            path = (self.base / val).resolve()
            if not path.exists():
                raise ConfigError(f"{key}: file {path} does not exist")
            return json.loads(path.read_text())
        return val

    def scene(self) -> Scene:
        try:
            return Scene.from_dict(self._doc("scene"))
        except GeometryError as exc:
            raise ConfigError(f"scene: {exc}") from exc

    def spec(self):
        from .trapfield import FieldError, FieldSpec
        scene = self.scene()
        try:
            return FieldSpec.from_list(scene, self._doc("field"))
        except (FieldError, KeyError) as exc:
            raise ConfigError(f"field: {exc}") from exc

    def digest(self) -> str:
        return hashlib.sha256(canonical(self.raw).encode()).hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)


def canonical(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def load_config(path, subcommand: str, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    raw = json.loads(path.read_text())
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if seed is not None:
        raw["seed"] = int(seed)
    out_dir = Path(out) if out else Path(raw.get("out", "trapflow-out")) / subcommand
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise ConfigError(f"out: directory {out_dir} is not writable")
    return ExperimentConfig(subcommand, raw, path.parent, int(raw.get("seed", 0)), out_dir)


# -- artifacts -----------------------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    value: Any = None
    threshold: Any = None

    def to_dict(self) -> dict:
        return {"name": self.name, "verdict": "PASS" if self.passed else "FAIL",
                "value": _jsonable(self.value), "threshold": _jsonable(self.threshold)}


@dataclass
class Result:
    summary: dict = field(default_factory=dict)
    checks: list[Check] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)
    plots: list[tuple[str, str]] = field(default_factory=list)


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


def write_csv(path: Path, columns: list[tuple[str, str]], rows) -> None:
    """CSV with a ``# column: definition [units]`` header block."""
    with open(path, "w") as fh:
        for name, desc in columns:
            fh.write(f"# {name}: {desc}\n")
        fh.write(",".join(c for c, _ in columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _gnuplot(path: Path, csv_name: str, using: str, title: str) -> None:
    path.write_text(
        "set datafile separator ','\nset datafile commentschars '#'\nset key autotitle columnhead\n"
        f"set title '{title}'\nplot '{csv_name}' every ::1 using {using} with linespoints\n")


# -- subcommands ------------------------------------------------------------------

def cmd_geometry_check(cfg: ExperimentConfig) -> Result:
    scene = cfg.scene()
    rng = np.random.default_rng(cfg.seed)
    n_pts = int(cfg.param("points", 200))
    tol = float(cfg.checks.get("sdist_tol", 1e-4))
    res = Result()
    rows = []
    worst_sdist = 0.0
    min_gap = math.inf
    for t in scene.traps:
        pts = rng.random((n_pts, 2))
        bnd = boundary_samples(t, 720)
        brute = np.array([float(np.min(torus_dist(p, bnd))) for p in pts])
        # the sampled oracle is only sharp away from the circle (error ~ spacing^2 / 8d)
        far = brute >= float(cfg.param("min_distance", 0.01))
        err = float(np.max(np.abs(np.abs(sdist(pts[far], t)) - brute[far]), initial=0.0))
        worst_sdist = max(worst_sdist, err)
        gap = math.inf
        for o in scene.traps:
            if o.id != t.id:
                ob = boundary_samples(o, 720)
                gap = min(gap, float(np.min([np.min(torus_dist(p, ob)) for p in bnd[::4]])))
        min_gap = min(min_gap, gap)
        rows.append((t.id, t.center.x, t.center.y, t.radius, err, gap))
    name = "traps.csv"
    write_csv(cfg.out / name, [("id", "trap id"), ("cx", "center x [torus units]"),
                               ("cy", "center y [torus units]"), ("radius", "disk radius [torus units]"),
                               ("sdist_err", "max |sdist| error vs 720-point boundary sampling, points >= min_distance away [torus units]"),
                               ("min_gap", "min sampled distance to other trap boundaries [torus units]")], rows)
    res.artifacts.append(name)
    res.summary = {"traps": scene.n, "sdist_max_err": worst_sdist, "min_gap": min_gap}
    res.checks.append(Check("sdist_vs_sampling", worst_sdist <= tol, worst_sdist, tol))
    if scene.n > 1:
        res.checks.append(Check("disjointness_witness", min_gap > 0, min_gap, 0.0))
    return res


def cmd_exit_stats(cfg: ExperimentConfig) -> Result:
    from .sde_sim import SimConfig, exit_experiment
    from .stats import chi2_uniform, ks_uniform_angle
    spec = cfg.spec()
    k = int(cfg.param("trap", 1))
    eps_list = cfg.param("eps")
    eps_list = eps_list if isinstance(eps_list, list) else [eps_list]
    N = int(cfg.param("N", 10_000))
    bins = int(cfg.param("bins", 36))
    res = Result()
    rows_sum = []
    hist_rows = []
    for i, eps in enumerate(eps_list):
        sc = SimConfig.for_spec(spec, float(eps), N=N, seed=cfg.seed,
                                max_real_time=float(cfg.param("max_real_time", 1e3)))
        st = exit_experiment(spec, k, sc, bins=bins)
        h = st.histogram
        for b in range(bins):
            hist_rows.append((eps, b, (b + 0.5) * TWO_PI / bins, int(h[b])))
        p_chi = chi2_uniform(st.angles, bins)
        ks = ks_uniform_angle(st.angles)
        quad = _quadrant_ratio(st.angles)
        rows_sum.append((eps, st.times.size, st.censored, st.mean_time, st.median_time,
                         eps * st.log_mean, p_chi, ks, quad))
    write_csv(cfg.out / "exit_hist.csv", [("eps", "noise scale"), ("bin", "angle bin index"),
                                          ("theta", "bin midpoint [rad]"), ("count", "exits in bin")], hist_rows)
    write_csv(cfg.out / "exit_summary.csv",
              [("eps", "noise scale"), ("n", "completed exits"), ("censored", "paths over budget"),
               ("mean_time", "mean exit time [time units]"), ("median_time", "median exit time [time units]"),
               ("eps_log_mean", "eps * log(mean exit time)"), ("chi2_p", "chi-square p-value vs uniform"),
               ("ks", "KS distance vs uniform"), ("quadrant_ratio", "mass near pi / mass near 0")], rows_sum)
    res.artifacts += ["exit_hist.csv", "exit_summary.csv"]
    res.plots.append(("exit_hist.gp", "exit_hist.csv"))
    res.summary = {"rows": [_jsonable(list(r)) for r in rows_sum]}
    kind = spec.profile(k).kind
    if kind == "radial":
        thr = float(cfg.checks.get("chi2_p_min", 0.01))
        for r in rows_sum:
            res.checks.append(Check(f"uniform_exit_eps={r[0]}", r[6] > thr, r[6], thr))
        if len(rows_sum) > 1 and cfg.checks.get("log_mean_trend", True):
            vals = [r[5] for r in sorted(rows_sum, key=lambda r: -r[0])]
            res.checks.append(Check("eps_log_mean_increasing", all(b > a for a, b in zip(vals, vals[1:])), vals))
    else:
        thr = float(cfg.checks.get("quadrant_ratio_min", 3.0))
        for r in rows_sum:
            res.checks.append(Check(f"concentration_eps={r[0]}", r[8] >= thr, r[8], thr))
    return res


def _quadrant_ratio(angles) -> float:
    a = np.mod(angles, TWO_PI)
    near_pi = np.sum(np.abs(a - math.pi) <= math.pi / 4)
    near_0 = np.sum((a <= math.pi / 4) | (a >= 7 * math.pi / 4))
    return float(near_pi / near_0) if near_0 else math.inf


def cmd_splitting(cfg: ExperimentConfig) -> Result:
    from .sde_sim import splitting_experiment
    from .trapfield import inflow
    spec = cfg.spec()
    k = int(cfg.param("trap", 1))
    eps_list = [float(e) for e in cfg.param("eps")]
    N = int(cfg.param("N", 50_000))
    theta = cfg.param("theta", None)
    delta = cfg.param("delta", None)
    th_eval = np.linspace(0, TWO_PI, 361)[:-1] if theta is None else np.array([float(theta)])
    a = inflow(spec, k, th_eval)
    target = float(np.mean(1.0 / (1.0 + 2.0 * a)))
    rows = []
    for eps in eps_list:
        r = splitting_experiment(spec, k, eps, delta=delta, N=N, theta=theta, seed=cfg.seed)
        rows.append((eps, r.delta, r.estimate.p, r.estimate.se, r.estimate.p - target))
    write_csv(cfg.out / "splitting.csv",
              [("eps", "noise scale"), ("delta", "inner level depth [torus units]"),
               ("p_hat", "fraction reaching S_eps first"), ("se", "binomial standard error"),
               ("error", "p_hat minus (1+2a)^-1")], rows)
    res = Result(artifacts=["splitting.csv"], plots=[("splitting.gp", "splitting.csv")])
    res.summary = {"target": target, "rows": [_jsonable(list(r)) for r in rows]}
    errs = [abs(r[4]) for r in rows]
    tol = float(cfg.checks.get("final_abs_error", 0.03))
    res.checks.append(Check("final_error", errs[-1] <= tol, errs[-1], tol))
    if len(errs) > 1:
        res.checks.append(Check("error_decreasing", all(b < a for a, b in zip(errs, errs[1:])), errs))
    return res


def cmd_aux1d(cfg: ExperimentConfig) -> Result:
    from .sde_sim import aux1d_experiment, splitting_limit
    vs = cfg.param("v")
    vs = vs if isinstance(vs, list) else [vs]
    N = int(cfg.param("N", 200_000))
    nsig = float(cfg.checks.get("nsigma", 3.0))
    res = Result()
    rows = []
    for v in vs:
        z0 = cfg.param("z0", None)
        est = aux1d_experiment(float(v), z0=None if z0 is None else float(z0), N=N, seed=cfg.seed,
                               dt_zero=float(cfg.param("dt_zero", 1e-4)))
        target = splitting_limit(float(v))
        rows.append((v, est.p, est.se, target, (est.p - target) / est.se if est.se else math.nan))
        res.checks.append(Check(f"aux1d_v={v}", est.within(target, nsig), est.p, [target, nsig * est.se]))
    write_csv(cfg.out / "aux1d.csv", [("v", "drift below zero"), ("p_hat", "fraction reaching 1 first"),
                                      ("se", "binomial standard error"), ("target", "(1+2v)^-1"),
                                      ("z", "standardized deviation")], rows)
    res.artifacts.append("aux1d.csv")
    res.summary = {"rows": [_jsonable(list(r)) for r in rows]}
    return res


def _nus_from_config(cfg: ExperimentConfig, spec=None):
    """Glue measures from ``params.nu`` (list of measure documents or ``"uniform"``), else from the field."""
    from .trapfield import BoundaryMeasure, glue_measures
    docs = cfg.param("nu", None)
    if docs is None:
        return glue_measures(spec if spec is not None else cfg.spec())
    n = cfg.scene().n
    if docs == "uniform":
        return [BoundaryMeasure.uniform(k) for k in range(1, n + 1)]
    try:
        nus = [BoundaryMeasure.from_dict(d) for d in docs]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"params.nu: {exc}") from exc
    if [nu.trap for nu in nus] != list(range(1, n + 1)):
        raise ConfigError(f"params.nu: need one measure per trap 1..{n}")
    return nus


def cmd_kj_solve(cfg: ExperimentConfig) -> Result:
    from .kj_solver import build_grid, solve_kj
    scene = cfg.scene()
    m = int(cfg.param("m", 256))
    g = build_grid(scene, m)
    nus = _nus_from_config(cfg)
    k = int(cfg.param("k", 1))
    js = cfg.param("j", list(range(k, scene.n + 1)))
    js = js if isinstance(js, list) else [js]
    res = Result()
    total = np.zeros((m, m))
    consts = {}
    worst_flux = 0.0
    in_range = True
    for j in js:
        sol = solve_kj(g, k, int(j), nus)
        total += sol.u.values
        consts[int(j)] = sol.constants.tolist()
        worst_flux = max(worst_flux, float(np.max(np.abs(sol.flux_residuals), initial=0.0)) / max(sol.u.sup, 1e-300))
        in_range &= bool(sol.u.values.min() >= 0.0 and sol.u.values.max() <= 1.0)
        name = f"u_k{k}_j{j}"
        sol.u.to_csv(cfg.out / f"{name}.csv")
        sol.u.save_binary(cfg.out / f"{name}.tfld")
        res.artifacts += [f"{name}.csv", f"{name}.tfld"]
    res.summary = {"m": m, "k": k, "j": js, "constants": consts}
    res.checks.append(Check("max_principle", in_range, in_range))
    ftol = float(cfg.checks.get("flux_residual", 1e-8))
    res.checks.append(Check("flux_residual", worst_flux <= ftol, worst_flux, ftol))
    if sorted(int(j) for j in js) == list(range(k, scene.n + 1)):
        ctol = float(cfg.checks.get("conservation", 1e-6))
        dev = float(np.max(np.abs(total[g.label == 0] - 1.0)))
        cdev = float(np.max(np.abs(np.sum([consts[j] for j in consts], axis=0) - 1.0))) if k > 1 else 0.0
        res.checks.append(Check("conservation", max(dev, cdev) <= ctol, max(dev, cdev), ctol))
    sym = cfg.param("symmetric_point", None)
    if sym is not None:
        target = float(cfg.param("symmetric_value", 0.5))
        tol = float(cfg.checks.get("symmetric_tol", 1e-2))
        jj = int(cfg.param("symmetric_j", js[-1]))
        u = solve_kj(g, k, jj, nus).at([sym])[0]
        res.summary["u_symmetric"] = float(u)
        res.checks.append(Check("symmetric_point", abs(u - target) <= tol, float(u), [target, tol]))
    return res


def _psi(cfg: ExperimentConfig):
    from .glue_process import Psi
    return Psi.from_dict(cfg.param("psi"))


def _glue_config(cfg: ExperimentConfig, N: int):
    from .glue_process import GlueConfig
    return GlueConfig(delta=float(cfg.param("delta")), dt=float(cfg.param("dt", 1e-3)), seed=cfg.seed, N=N,
                      kappa=float(cfg.param("kappa", 0.5)))


def _grid_budget(values_fine, values_coarse, floor: float) -> np.ndarray:
    return 2.0 * np.abs(np.asarray(values_fine) - np.asarray(values_coarse)) + floor


def cmd_resolvent_check(cfg: ExperimentConfig) -> Result:
    from .glue_process import resolvent_mc
    from .kj_solver import build_grid, resolvent_solve
    scene = cfg.scene()
    lam = float(cfg.param("lam", 1.0))
    psi = _psi(cfg)
    nus = _nus_from_config(cfg)
    m = int(cfg.param("m", 256))
    fine = resolvent_solve(build_grid(scene, m), lam, psi, nus)
    coarse = resolvent_solve(build_grid(scene, m // 2), lam, psi, nus)
    probes = [tuple(p) for p in cfg.param("probes")]
    N = int(cfg.param("N", 10_000))
    gc = _glue_config(cfg, N)
    nsig = float(cfg.checks.get("nsigma", 3.0))
    floor = float(cfg.checks.get("budget_floor", 0.0))
    res = Result()
    rows = []
    for i, p in enumerate(probes):
        est = resolvent_mc(p, lam, psi, gc, scene, nus)
        u = float(fine.u(p)[0])
        budget = float(_grid_budget(u, coarse.u(p)[0], floor))
        ok = abs(est.mean - u) <= nsig * est.se + budget
        rows.append((i, p[0], p[1], est.mean, est.se, u, budget))
        res.checks.append(Check(f"resolvent_probe_{i}", ok, [est.mean, u], [nsig * est.se, budget]))
    write_csv(cfg.out / "resolvent.csv",
              [("probe", "probe index"), ("x", "probe x [torus units]"), ("y", "probe y [torus units]"),
               ("mc", "Monte Carlo discounted functional"), ("se", "Monte Carlo standard error"),
               ("pde", "finite-difference resolvent value"), ("grid_budget", "calibrated grid error budget")], rows)
    res.artifacts.append("resolvent.csv")
    res.summary = {"lam": lam, "constants": fine.constants.tolist(), "sup_u": fine.u.sup, "sup_psi": psi.sup}
    res.checks.append(Check("contraction", fine.u.sup <= psi.sup / lam + 1e-12, fine.u.sup, psi.sup / lam))
    return res


def cmd_glue_vs_pde(cfg: ExperimentConfig) -> Result:
    from .glue_process import first_trap_hit
    from .kj_solver import build_grid, harmonic_measure
    scene = cfg.scene()
    m = int(cfg.param("m", 256))
    probes = [tuple(p) for p in cfg.param("probes")]
    H = harmonic_measure(build_grid(scene, m), probes)
    Hc = harmonic_measure(build_grid(scene, m // 2), probes)
    N = int(cfg.param("N", 10_000))
    gc = _glue_config(cfg, N)
    nsig = float(cfg.checks.get("nsigma", 3.0))
    floor = float(cfg.checks.get("budget_floor", 0.0))
    res = Result()
    rows = []
    for i, p in enumerate(probes):
        f = first_trap_hit(p, gc, scene)
        se = np.sqrt(np.clip(f * (1 - f), 0, None) / N)
        budget = _grid_budget(H[i], Hc[i], floor)
        ok = bool(np.all(np.abs(f - H[i]) <= nsig * se + budget))
        for k in range(scene.n):
            rows.append((i, p[0], p[1], k + 1, f[k], se[k], H[i, k], budget[k]))
        res.checks.append(Check(f"first_hit_probe_{i}", ok, [f.tolist(), H[i].tolist()]))
    write_csv(cfg.out / "first_hit.csv",
              [("probe", "probe index"), ("x", "probe x [torus units]"), ("y", "probe y [torus units]"),
               ("trap", "trap id"), ("mc", "Monte Carlo first-hit probability"), ("se", "binomial standard error"),
               ("pde", "harmonic measure from the finite-difference solve"),
               ("grid_budget", "calibrated grid error budget")], rows)
    res.artifacts.append("first_hit.csv")
    return res


def cmd_trace_converge(cfg: ExperimentConfig) -> Result:
    from .glue_process import trap_sequence
    from .sde_sim import SimConfig, trace_ensemble
    from .stats import energy_distance, tv_distance, tv_sigma
    from .trapfield import glue_measures
    spec = cfg.spec()
    scene = spec.scene
    eps_list = [float(e) for e in cfg.param("eps")]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ConfigError("params.eps: list must be strictly decreasing")
    N = int(cfg.param("N", 10_000))
    start_trap = int(cfg.param("start_trap", 0))
    x0 = cfg.param("x0", None)
    gc = _glue_config(cfg, N)
    nus = _nus_from_config(cfg, spec) if scene.n else []
    trace_times = [float(t) for t in cfg.param("trace_times", [])]
    res = Result()
    rows = []
    ref = None
    if scene.n:
        start = f"d{start_trap}" if start_trap else tuple(x0)
        ref = trap_sequence(start, 1, gc, scene, nus).first_law(scene.n)
    glue_Y = _glue_marginals(gc, scene, nus, start_trap, x0, trace_times, N) if trace_times else None
    tvs = []
    for eps in eps_list:
        sc = SimConfig.for_spec(spec, eps, N=N, seed=cfg.seed, max_real_time=float(cfg.param("max_real_time", 1e4)))
        ens = trace_ensemble(spec, sc, x0=x0, start_trap=start_trap, m=1, trace_times=trace_times)
        row = [eps, int(ens.complete.sum())]
        if ref is not None:
            law = ens.next_trap_law(scene.n)
            tv = tv_distance(law, ref)
            tvs.append(tv)
            row += [tv, tv_sigma(ref, N)]
        for q, t in enumerate(trace_times):
            row.append(energy_distance(ens.Y[:, q, :], glue_Y[q]))
        rows.append(tuple(row))
    cols = [("eps", "noise scale"), ("complete", "paths finishing within budget")]
    if ref is not None:
        cols += [("tv_next_trap", "TV distance of next-trap law to the glue reference"),
                 ("tv_sigma", "noise scale of the TV distance")]
    cols += [(f"energy_t{t}", f"energy distance of Y at trace time {t} to the glue process") for t in trace_times]
    write_csv(cfg.out / "trace_converge.csv", cols, rows)
    res.artifacts.append("trace_converge.csv")
    res.summary = {"glue_reference": None if ref is None else ref.tolist(),
                   "rows": [_jsonable(list(r)) for r in rows]}
    if tvs:
        res.checks.append(Check("tv_trend", tvs[-1] <= tvs[0], tvs))
        tol = float(cfg.checks.get("final_tv", 0.05))
        res.checks.append(Check("final_tv", tvs[-1] <= tol, tvs[-1], tol))
    if trace_times and "energy_max" in cfg.checks:
        worst = max(max(r[-len(trace_times):]) for r in rows)
        res.checks.append(Check("energy_distance", worst <= float(cfg.checks["energy_max"]), worst,
                                cfg.checks["energy_max"]))
    return res


def _glue_marginals(gc, scene, nus, start_trap, x0, trace_times, N):
    """Positions of ``N`` glue paths at the requested times (grid spacing ``gc.dt``)."""
    from .glue_process import glue_step_run
    start = f"d{start_trap}" if start_trap else tuple(x0)
    idx = [int(round(t / gc.dt)) for t in trace_times]
    out = [np.empty((N, 2)) for _ in trace_times]
    for i in range(N):
        path = glue_step_run(start, max(trace_times), gc, scene, nus, grid_dt=gc.dt, path=i)
        for q, j in enumerate(idx):
            out[q][i] = path.points[min(j, path.points.shape[0] - 1)]
    return out


def cmd_metastable(cfg: ExperimentConfig) -> Result:
    from .kj_solver import metastable_profile
    spec = cfg.spec()
    lam = float(cfg.param("lam"))
    pts = [tuple(p) for p in cfg.param("points")]
    prof = metastable_profile(spec, lam, pts, m=int(cfg.param("m", 256)))
    P = prof.by_trap()
    rows = [(i, p[0], p[1]) + tuple(P[i]) for i, p in enumerate(pts)]
    n = spec.scene.n
    write_csv(cfg.out / "profile.csv", [("point", "query index"), ("x", "query x [torus units]"),
                                        ("y", "query y [torus units]")] +
              [(f"p{k}", f"limit probability of the neighbourhood of trap {k}") for k in range(1, n + 1)], rows)
    res = Result(artifacts=["profile.csv"])
    res.summary = {"lam": lam, "window": prof.k, "order": list(prof.order), "constants": prof.constants.tolist(),
                   "probs": P.tolist()}
    tol = float(cfg.checks.get("sum_tol", 1e-6))
    dev = float(np.max(np.abs(P.sum(axis=1) - 1.0)))
    res.checks.append(Check("rows_sum_to_one", dev <= tol, dev, tol))
    res.checks.append(Check("rows_in_unit_interval", bool(P.min() >= -1e-8 and P.max() <= 1 + 1e-8),
                            [float(P.min()), float(P.max())], [0.0, 1.0]))
    return res


def cmd_metastable_sim(cfg: ExperimentConfig) -> Result:
    from .kj_solver import metastable_profile
    from .sde_sim import coarse_metastable_sim
    from .stats import tv_distance, tv_sigma
    spec = cfg.spec()
    lam = float(cfg.param("lam"))
    eps = float(cfg.param("eps_model"))
    x0 = tuple(cfg.param("x0"))
    N = int(cfg.param("N", 10_000))
    delta = cfg.param("delta", None)
    prefactors = [float(p) for p in cfg.param("prefactors", [1.0])]
    nsig = float(cfg.checks.get("nsigma", 3.0))
    ref = metastable_profile(spec, lam, [x0], m=int(cfg.param("m", 256))).by_trap()[0]
    ref_u = np.concatenate([[0.0], ref])
    res = Result()
    rows = []
    dists = []
    for pf in prefactors:
        s = coarse_metastable_sim(lam, eps, spec, x0=x0, N=N, seed=cfg.seed, prefactor=pf, delta=delta)
        d = s.distribution
        dists.append(d)
        tv = tv_distance(d, ref_u)
        env = nsig * max(tv_sigma(ref_u, N), 1.0 / N)
        rows.append((pf, tv, env) + tuple(d))
        res.checks.append(Check(f"tv_vs_profile_prefactor={pf}", tv <= env, tv, env))
    base = dists[0]
    for pf, d in zip(prefactors[1:], dists[1:]):
        shift = tv_distance(d, base)
        env = nsig * max(tv_sigma(base, N), 1.0 / N)
        res.checks.append(Check(f"prefactor_shift_{pf}", shift <= env, shift, env))
    n = spec.scene.n
    write_csv(cfg.out / "metastable_sim.csv",
              [("prefactor", "sojourn prefactor"), ("tv", "TV distance to the PDE profile"),
               ("envelope", "nsigma TV envelope"), ("pU", "fraction in U at the horizon")] +
              [(f"p{k}", f"fraction in trap {k} at the horizon") for k in range(1, n + 1)], rows)
    res.artifacts.append("metastable_sim.csv")
    res.summary = {"lam": lam, "eps_model": eps, "profile": ref.tolist(), "rows": [_jsonable(list(r)) for r in rows]}
    return res


COMMANDS: dict[str, Callable[[ExperimentConfig], Result]] = {
    "geometry-check": cmd_geometry_check,
    "exit-stats": cmd_exit_stats,
    "splitting": cmd_splitting,
    "aux1d": cmd_aux1d,
    "kj-solve": cmd_kj_solve,
    "resolvent-check": cmd_resolvent_check,
    "glue-vs-pde": cmd_glue_vs_pde,
    "trace-converge": cmd_trace_converge,
    "metastable": cmd_metastable,
    "metastable-sim": cmd_metastable_sim,
}


def dispatch(subcommand: str, cfg: ExperimentConfig, emit_gnuplot: bool = False) -> dict:
    """Run one subcommand, write its artifacts and manifest, and return the manifest."""
    if subcommand not in COMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    threads = apply_thread_cap()
    t0 = time.time()
    res = COMMANDS[subcommand](cfg)
    wall = time.time() - t0
    if emit_gnuplot:
        for gp, csv_name in res.plots:
            _gnuplot(cfg.out / gp, csv_name, "1:3", f"{subcommand}: {csv_name}")
            res.artifacts.append(gp)
    manifest = {
        "subcommand": subcommand,
        "seed": cfg.seed,
        "config": cfg.raw,
        "config_hash": cfg.digest(),
        "code_version": __version__,
        "summary": _jsonable(res.summary),
        "checks": [c.to_dict() for c in res.checks],
        "passed": all(c.passed for c in res.checks),
        "artifacts": sorted(res.artifacts),
        "volatile": {"wall_time_s": wall, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
                     "threads": threads, "python": platform.python_version()},
    }
    for key, getter in (("scene_hash", lambda: cfg.scene().digest()), ("spec_hash", lambda: cfg.spec().digest())):
        try:
            manifest[key] = getter()
        except ConfigError:
            pass
    (cfg.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trapflow", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"trapflow {__version__}")
    sub = ap.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--emit-gnuplot", action="store_true", help="write gnuplot scripts next to the CSVs")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.subcommand, args.seed, args.out)
        manifest = dispatch(args.subcommand, cfg, args.emit_gnuplot)
    except ConfigError as exc:
        print(f"trapflow: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # infeasibility guards and solver diagnostics
        print(f"trapflow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    for c in manifest["checks"]:
        print(f"{c['verdict']}  {c['name']}  value={c['value']}")
    print(f"manifest: {cfg.out / 'manifest.json'}")
    return 0 if manifest["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())
