"""Monte Carlo for the stiff-drift diffusion ``dX = v(X)/eps dt + dW`` on the torus.

Single-path helpers (``em_step``, ``run_until``, ``trace_extract``) run in Python on top
of the compiled step functions; the ensemble experiments call the path-parallel kernels
in ``_kernels``.  All randomness comes from counter-based streams, so every result is a
function of the configuration and the seed only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from . import _kernels as K
from .geometry import TWO_PI, Region, Scene, TorusPoint, wrap
from .parallel import apply_thread_cap
from .rng import RngStream, seed_word
from .trapfield import (BoundaryMeasure, FieldSpec, exit_measure, inflow, max_speed,
                        quasi_potential, v_thresholds)

# stream tags keep experiments sharing a seed statistically independent
TAG_RUN, TAG_EXIT, TAG_SPLIT, TAG_AUX1D, TAG_TRACE, TAG_COARSE = 1, 2, 3, 4, 5, 6


class SimError(RuntimeError):
    pass


class InfeasibleError(SimError):
    pass


@lru_cache(maxsize=64)
def _model(spec: FieldSpec):
    return K.model_arrays(spec.scene, spec)


@dataclass(frozen=True)
class SimConfig:
    """Step sizes and budgets for the epsilon process.

    ``dt_trap`` applies inside traps, ``dt_U`` in U; both shrink as ``(kappa d)^2`` near a
    trap boundary, down to ``dt_zero``.  ``tol`` is the width of the boundary band.
    """

    eps: float
    dt_U: float = 1e-3
    dt_trap: float | None = None
    c_trap: float = 0.1
    dt_zero: float | None = None
    kappa: float = 0.2
    tol: float | None = None
    seed: int = 0
    N: int = 1000
    max_real_time: float = 1e3

    def __post_init__(self):
        if not self.eps > 0:
            raise SimError("eps must be positive")
        if self.dt_trap is None:
            object.__setattr__(self, "dt_trap", min(self.c_trap * self.eps**2, self.dt_U))
        if self.dt_zero is None:
            object.__setattr__(self, "dt_zero", min(1e-4 * self.eps**2, self.dt_trap))
        if self.tol is None:
            object.__setattr__(self, "tol", 0.05 * self.eps)
        if self.dt_trap > self.c_trap * self.eps**2 * (1 + 1e-12):
            raise SimError(f"dt_trap={self.dt_trap} exceeds c_trap*eps^2={self.c_trap * self.eps**2}")
        if self.dt_trap > self.dt_U:
            raise SimError("dt_trap must not exceed dt_U")
        if not 0 < self.kappa <= 0.5:
            raise SimError("kappa must lie in (0, 1/2]")

    @classmethod
    def for_spec(cls, spec: FieldSpec, eps: float, **kw) -> "SimConfig":
        """Largest ``dt_trap`` meeting both the ``c eps^2`` rule and the drift sub-step rule."""
        c = kw.get("c_trap", 0.1)
        dt = c * eps**2
        for k in range(1, spec.scene.n + 1):
            R = spec.scene.trap(k).radius
            dt = min(dt, R * eps / (10.0 * max_speed(spec, k)))
        kw.setdefault("dt_U", max(1e-3, dt))
        return cls(eps=eps, dt_trap=min(dt, kw["dt_U"]), **kw)

    def validate(self, spec: FieldSpec) -> None:
        for k in range(1, spec.scene.n + 1):
            R = spec.scene.trap(k).radius
            if self.dt_trap * max_speed(spec, k) / self.eps > R / 10.0 * (1 + 1e-9):
                raise SimError(f"trap {k}: drift sub-step dt_trap*|v|/eps exceeds R/10")

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


# -- single paths ---------------------------------------------------------------

def em_step(x, dt: float, eps: float, spec: FieldSpec, rng: RngStream, draw: int = 0) -> TorusPoint:
    """One Euler-Maruyama step using normals from draw ``draw`` of ``rng``."""
    p = TorusPoint.of(x)
    z0, z1, _, _ = rng.draw(draw)
    ex, ey = K.eps_move(p.x, p.y, eps, dt, z0, z1, _model(spec))
    return TorusPoint(p.x + ex, p.y + ey)


@dataclass
class PathRecord:
    times: np.ndarray
    points: np.ndarray
    regions: np.ndarray
    reason: str

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    def region(self, i: int) -> Region:
        return Region.from_code(int(self.regions[i]))

    def events(self) -> list[tuple[float, TorusPoint, Region]]:
        """Region transitions (first sample included)."""
        idx = [0] + [i for i in range(1, len(self.regions)) if self.regions[i] != self.regions[i - 1]]
        return [(float(self.times[i]), TorusPoint.of(self.points[i]), self.region(i)) for i in idx]


def _step_dt(x: float, y: float, cfg: SimConfig, model) -> float:
    k, d = K.nearest(x, y, model)
    if k < 0:
        return cfg.dt_U
    return K.eps_dt(d, cfg.dt_U, cfg.dt_trap, cfg.dt_zero, cfg.kappa)


def run_until(x0, stop: Callable[[float, TorusPoint, Region], bool], config: SimConfig,
              spec: FieldSpec, path: int = 0, max_steps: int = 10**7) -> PathRecord:
    """Simulate one path until ``stop(time, point, region)`` holds or the budget runs out.

    The final step is refined by bisection along the step segment so the terminal point
    sits within ``config.tol`` of where the stop condition switches on.
    """
    model = _model(spec)
    rng = RngStream(config.seed, path, TAG_RUN)
    p = TorusPoint.of(x0)
    x, y = p.x, p.y
    t = 0.0
    times = [0.0]
    pts = [(x, y)]
    regs = [K.region_code(x, y, model, config.tol)]
    reason = "budget exhausted"
    block = 4096
    table = rng.table(0, block)
    j = 0
    while t < config.max_real_time and j < max_steps:
        if j % block == 0 and j:
            table = rng.table(j, block)
        z0, z1 = table[j % block, 0], table[j % block, 1]
        j += 1
        dt = _step_dt(x, y, config, model)
        ex, ey = K.eps_move(x, y, config.eps, dt, z0, z1, model)
        xn, yn = float(wrap(x + ex)), float(wrap(y + ey))
        tn = t + dt
        rn = K.region_code(xn, yn, model, config.tol)
        if stop(tn, TorusPoint(xn, yn), Region.from_code(rn)):
            lo, hi = 0.0, 1.0
            length = math.hypot(ex, ey)
            while (hi - lo) * length > config.tol:
                mid = 0.5 * (lo + hi)
                xm, ym = float(wrap(x + mid * ex)), float(wrap(y + mid * ey))
                if stop(t + mid * dt, TorusPoint(xm, ym),
                        Region.from_code(K.region_code(xm, ym, model, config.tol))):
                    hi = mid
                else:
                    lo = mid
            xn, yn = float(wrap(x + hi * ex)), float(wrap(y + hi * ey))
            tn = t + hi * dt
            rn = K.region_code(xn, yn, model, config.tol)
            times.append(tn)
            pts.append((xn, yn))
            regs.append(rn)
            reason = "stopped"
            break
        x, y, t = xn, yn, tn
        times.append(t)
        pts.append((x, y))
        regs.append(rn)
    return PathRecord(np.array(times), np.array(pts), np.array(regs, dtype=np.int64), reason)


@dataclass(frozen=True)
class Excursion:
    trap: int
    capture_angle: float
    release_angle: float | None
    real_duration: float
    capture_index: int
    release_index: int | None


@dataclass
class TraceRecord:
    grid: np.ndarray
    Y: np.ndarray
    excursions: list[Excursion]
    trace_time: float
    real_time: float


def trace_extract(path: PathRecord, grid_dt: float, scene: Scene) -> TraceRecord:
    """Re-clock a path so time runs only while it is in the closure of U."""
    regs = path.regions
    dts = np.diff(path.times)
    ubar = regs <= 0
    clock = np.concatenate([[0.0], np.cumsum(np.where(ubar[:-1], dts, 0.0))])
    trace_total = float(clock[-1])

    idx_u = np.flatnonzero(ubar)
    grid = np.arange(0.0, trace_total + 0.5 * grid_dt, grid_dt)
    grid = grid[grid <= trace_total]
    if idx_u.size:
        pos = np.searchsorted(clock[idx_u], grid, side="right") - 1
        Y = path.points[idx_u[np.clip(pos, 0, None)]]
    else:
        grid = grid[:0]
        Y = np.empty((0, 2))

    excursions = []
    i = 0
    n = len(regs)
    while i < n:
        if regs[i] > 0:
            k = int(regs[i])
            start = i
            while i < n and regs[i] > 0:
                i += 1
            cap_idx = start - 1 if start > 0 else start
            rel_idx = i if i < n else None
            trap = scene.trap(k)
            cap_angle = _angle(path.points[cap_idx], trap)
            rel_angle = _angle(path.points[rel_idx], trap) if rel_idx is not None else None
            end_t = path.times[rel_idx] if rel_idx is not None else path.times[-1]
            excursions.append(Excursion(k, cap_angle, rel_angle, float(end_t - path.times[start]),
                                        cap_idx, rel_idx))
        else:
            i += 1
    return TraceRecord(grid, Y, excursions, trace_total, path.duration)


def _angle(p, trap) -> float:
    from .geometry import polar
    return float(polar(p, trap)[1])


# -- exit statistics ----------------------------------------------------------------

@dataclass
class ExitStats:
    trap: int
    eps: float
    times: np.ndarray
    angles: np.ndarray
    censored: int
    bins: int = 36

    @property
    def histogram(self) -> np.ndarray:
        return np.histogram(self.angles, bins=self.bins, range=(0.0, TWO_PI))[0]

    @property
    def mean_time(self) -> float:
        return float(np.mean(self.times))

    @property
    def median_time(self) -> float:
        return float(np.median(self.times))

    @property
    def log_mean(self) -> float:
        return math.log(self.mean_time)

    def measure(self) -> BoundaryMeasure:
        mids = (np.arange(self.bins) + 0.5) * (TWO_PI / self.bins)
        h = self.histogram
        return BoundaryMeasure(self.trap, mids, h / h.sum())


def predicted_exit_time(spec: FieldSpec, k: int, eps: float) -> float:
    """Arrhenius-scale estimate ``(eps R / a_min) exp(V_k / eps)``."""
    R = spec.scene.trap(k).radius
    th = np.linspace(0.0, TWO_PI, 73)[:-1]
    a_min = float(np.min(inflow(spec, k, th)))
    return eps * R / a_min * math.exp(quasi_potential(spec, k).V_min / eps)


def exit_experiment(spec: FieldSpec, k: int, config: SimConfig, start="equilibrium",
                    bins: int = 36, safety: float = 10.0) -> ExitStats:
    """``config.N`` independent exits from trap ``k``."""
    config.validate(spec)
    pred = predicted_exit_time(spec, k, config.eps)
    if pred * safety > config.max_real_time:
        raise InfeasibleError(
            f"infeasible eps={config.eps}: predicted exit time {pred:.3g} x safety {safety} "
            f"exceeds max_real_time={config.max_real_time}")
    trap = spec.scene.trap(k)
    if isinstance(start, str):
        if start != "equilibrium":
            raise SimError(f"unknown start {start!r}")
        p0 = trap.center.as_array()
    else:
        p0 = TorusPoint.of(start).as_array()
    N = config.N
    x0 = np.full(N, p0[0])
    y0 = np.full(N, p0[1])
    out_t = np.empty(N)
    out_th = np.empty(N)
    ok = np.empty(N, dtype=np.int64)
    apply_thread_cap()
    K.k_exit(_model(spec), k - 1, x0, y0, config.eps, config.dt_trap, config.dt_zero, config.kappa,
             config.tol * 1e-3, config.max_real_time, np.uint64(seed_word(config.seed)),
             np.uint64(TAG_EXIT), out_t, out_th, ok)
    done = ok == 1
    return ExitStats(k, config.eps, out_t[done], out_th[done], int(N - done.sum()), bins)


# -- one-dimensional auxiliary process ------------------------------------------------

@dataclass(frozen=True)
class BernoulliEstimate:
    p: float
    n: int
    hits: int

    @property
    def se(self) -> float:
        return math.sqrt(max(self.p * (1.0 - self.p), 0.0) / self.n) if self.n else math.nan

    def within(self, target: float, nsigma: float = 3.0) -> bool:
        return abs(self.p - target) <= nsigma * self.se


def aux1d_experiment(v: float, z0: float | None = None, N: int = 100_000, seed: int = 0,
                     dt_max: float = 1.0, dt_zero: float = 1e-4, dt_min: float = 1e-10,
                     kappa: float = 0.2) -> BernoulliEstimate:
    """Probability that ``dZ = dB - v 1{Z<0} dt`` from 0 reaches 1 before ``z0``."""
    if not v > 0:
        raise SimError("v must be positive")
    if z0 is None:
        z0 = -6.0 / v
    if z0 > -6.0 / v:
        raise SimError(f"z0={z0} must be <= -6/v={-6.0 / v} to keep truncation bias negligible")
    hit = np.empty(N, dtype=np.int64)
    steps = np.empty(N, dtype=np.int64)
    apply_thread_cap()
    K.k_aux1d(float(v), float(z0), N, dt_max, dt_zero, dt_min, kappa, 10**9,
              np.uint64(seed_word(seed)), np.uint64(TAG_AUX1D), hit, steps)
    h = int((hit == 1).sum())
    return BernoulliEstimate(h / N, N, h)


def splitting_limit(a: float) -> float:
    return 1.0 / (1.0 + 2.0 * a)


# -- boundary splitting --------------------------------------------------------------

@dataclass(frozen=True)
class SplitResult:
    eps: float
    delta: float
    estimate: BernoulliEstimate
    theta: float | None


def splitting_experiment(spec: FieldSpec, k: int, eps: float, delta: float | None = None,
                         N: int = 10_000, theta: float | None = None, seed: int = 0,
                         c_trap: float = 0.1, dt_zero_c: float = 1e-4, dt_min_c: float = 1e-8,
                         kappa: float = 0.2) -> SplitResult:
    """Fraction of paths from the boundary reaching ``S_eps`` before ``S_-delta``.

    ``theta=None`` spreads starting points uniformly over the boundary circle.
    Step floors are given relative to ``eps^2``.
    """
    trap = spec.scene.trap(k)
    if delta is None:
        delta = trap.radius / 4.0
    if theta is None:
        th = (np.arange(N) + 0.5) * (TWO_PI / N)
    else:
        th = np.full(N, float(theta))
    dt_trap = c_trap * eps**2
    dt_trap = min(dt_trap, trap.radius * eps / (10.0 * max_speed(spec, k)))
    hit = np.empty(N, dtype=np.int64)
    dd = np.empty(N)
    steps = np.empty(N, dtype=np.int64)
    apply_thread_cap()
    K.k_split(_model(spec), k - 1, th, eps, delta, dt_trap, dt_zero_c * eps**2, dt_min_c * eps**2,
              kappa, 1e-3 * eps, 10**9, np.uint64(seed_word(seed)), np.uint64(TAG_SPLIT),
              hit, dd, steps)
    h = int((hit == 1).sum())
    return SplitResult(eps, delta, BernoulliEstimate(h / N, N, h), theta)


def splitting_sweep(spec: FieldSpec, k: int, eps_list: Sequence[float], **kw) -> list[SplitResult]:
    return [splitting_experiment(spec, k, e, **kw) for e in eps_list]


# -- trace ensembles -----------------------------------------------------------------

@dataclass
class TraceEnsemble:
    eps: float
    sequences: np.ndarray
    Y: np.ndarray
    clocks: np.ndarray
    complete: np.ndarray

    def next_trap_law(self, n_traps: int) -> np.ndarray:
        first = self.sequences[self.complete, 0]
        return np.bincount(first, minlength=n_traps + 1)[1:] / max(first.size, 1)


def trace_ensemble(spec: FieldSpec, config: SimConfig, x0=None, start_trap: int = 0, m: int = 1,
                   trace_times: Sequence[float] = ()) -> TraceEnsemble:
    """Ensemble of trace statistics: first ``m`` distinct traps hit and ``Y`` at trace times.

    ``start_trap = k`` starts every path at the equilibrium of trap ``k`` (the trace then
    begins on the trap boundary); otherwise paths start at ``x0``.
    """
    N = config.N
    if start_trap:
        p0 = spec.scene.trap(start_trap).center.as_array()
    else:
        p0 = TorusPoint.of(x0).as_array()
    x = np.full(N, p0[0])
    y = np.full(N, p0[1])
    start = np.full(N, int(start_trap), dtype=np.int64)
    tt = np.asarray(sorted(trace_times), dtype=float)
    if spec.scene.n == 0:
        m = 0  # no trap statistic exists; stop on the trace clock alone
    seq = np.zeros((N, max(m, 1)), dtype=np.int64)
    Y = np.zeros((N, tt.size, 2))
    clocks = np.zeros((N, 2))
    status = np.zeros(N, dtype=np.int64)
    apply_thread_cap()
    K.k_trace(_model(spec), x, y, start, config.eps, config.dt_U, config.dt_trap, config.dt_zero,
              config.kappa, config.tol, config.max_real_time, tt, m, np.uint64(seed_word(config.seed)),
              np.uint64(TAG_TRACE), seq, Y, clocks, status)
    return TraceEnsemble(config.eps, seq, Y, clocks, status == 1)


# -- coarse-grained metastable simulator -------------------------------------------

@dataclass
class MetastableSample:
    lam: float
    eps_model: float
    counts: np.ndarray

    @property
    def N(self) -> int:
        return int(self.counts.sum())

    @property
    def distribution(self) -> np.ndarray:
        """Index 0 is U, index k is trap k."""
        return self.counts / self.N


def coarse_metastable_sim(lam: float, eps_model: float, spec: FieldSpec, x0=None, N: int = 10_000,
                          start_trap: int = 0, seed: int = 0, prefactor: float = 1.0,
                          delta: float | None = None, dt_U: float = 1e-3, kappa: float = 0.25,
                          tol: float | None = None, mus: Sequence[BoundaryMeasure] | None = None,
                          window_margin: float = 0.01) -> MetastableSample:
    """Location at horizon ``exp(lam/eps_model)`` of the jump-chain caricature.

    Brownian motion in U; each trap visit costs ``prefactor exp(V_k/eps_model) Exp(1)``
    and releases at a point drawn from the exit law, offset by ``delta`` into U.
    """
    ladder = v_thresholds(spec)
    vals = np.asarray(ladder.values)
    kwin = ladder.window(lam)
    lo = vals[kwin - 2] if kwin >= 2 else 0.0
    hi = vals[kwin - 1] if kwin <= vals.size else math.inf
    if math.isfinite(hi):
        width = hi - lo
        if min(lam - lo, hi - lam) < window_margin * width:
            raise SimError(f"lambda too close to threshold (window [{lo:.6g}, {hi:.6g}])")
    elif lam - lo < window_margin * lo:
        raise SimError(f"lambda too close to threshold V_n={lo:.6g}")
    scene = spec.scene
    rmin = float(scene.radii.min())
    if delta is None:
        delta = rmin / 20.0
    if tol is None:
        tol = delta / 10.0
    if mus is None:
        mus = [exit_measure(spec, k) for k in range(1, scene.n + 1)]
    depth = np.array([quasi_potential(spec, k).V_min for k in range(1, scene.n + 1)])
    if start_trap:
        p0 = scene.trap(start_trap).center.as_array()
    else:
        p0 = TorusPoint.of(x0).as_array()
    xs = np.full(N, p0[0])
    ys = np.full(N, p0[1])
    start = np.full(N, int(start_trap), dtype=np.int64)
    where = np.empty(N, dtype=np.int64)
    visits = np.empty(N, dtype=np.int64)
    apply_thread_cap()
    K.k_coarse(_model(spec), K.measure_arrays(mus, scene.n), xs, ys, start, depth, eps_model,
               prefactor, math.exp(lam / eps_model), delta, dt_U, kappa, tol,
               np.uint64(seed_word(seed)), np.uint64(TAG_COARSE), where, visits)
    return MetastableSample(lam, eps_model, np.bincount(where, minlength=scene.n + 1))
