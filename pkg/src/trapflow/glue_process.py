"""Delta-reinjection approximation of the glued limit process.

Brownian motion in U; on reaching the boundary band of trap ``k`` the path is moved to
``boundary_point(k, theta) + delta * e_r(theta)`` with ``theta ~ nu_bar_k``.  Time spent
at the collapsed boundary is zero.  Steps are ``min(dt, (kappa d)^2)`` with ``d`` the
distance to the nearest trap; with ``kappa <= 1/2`` this keeps ``dt <= delta^2 / 4`` at the
release distance.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels as K
from .geometry import TorusPoint, nearest_trap
from .parallel import apply_thread_cap
from .rng import seed_word
from .trapfield import BoundaryMeasure, FieldSpec

TAG_SEQ, TAG_RES, TAG_REC = 11, 12, 13


class GlueError(ValueError):
    pass


@dataclass(frozen=True)
class GlueConfig:
    delta: float
    dt: float = 1e-3
    seed: int = 0
    N: int = 10_000
    kappa: float = 0.5
    tol: float | None = None
    max_time: float = 1e4

    def __post_init__(self):
        if not self.delta > 0:
            raise GlueError("delta must be positive")
        if not 0 < self.kappa <= 0.5:
            raise GlueError("kappa must lie in (0, 1/2] so steps resolve the release layer")
        if self.tol is None:
            object.__setattr__(self, "tol", self.delta / 10.0)
        if not 0 < self.tol < self.delta:
            raise GlueError("tol must lie in (0, delta)")

    def validate(self, spec_or_scene) -> None:
        scene = getattr(spec_or_scene, "scene", spec_or_scene)
        if scene.n and not self.delta < float(scene.radii.min()) / 4.0:
            raise GlueError(f"delta={self.delta} must be below min radius / 4")

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


def _model(spec_or_scene):
    scene = getattr(spec_or_scene, "scene", spec_or_scene)
    return scene, K.model_arrays(scene, None)


def _meas(scene, nus):
    if nus is None:
        nus = [BoundaryMeasure.uniform(k) for k in range(1, scene.n + 1)]
    if len(nus) != scene.n:
        raise GlueError(f"need {scene.n} glue measures, got {len(nus)}")
    return K.measure_arrays([nu.normalized() for nu in nus], scene.n)


def _start(scene, x0, N):
    """``x0`` is a point of U or a trap label ``"d<k>"`` / ``("d", k)``."""
    k = _label(x0)
    if k:
        if not 1 <= k <= scene.n:
            raise GlueError(f"no trap {k}")
        p = scene.trap(k).center.as_array()
    else:
        p = TorusPoint.of(x0).as_array()
        if scene.n:
            kk, d = nearest_trap(p, scene)
            if d < 0:
                raise GlueError(f"start point lies inside trap {kk}")
    return np.full(N, p[0]), np.full(N, p[1]), np.full(N, k, dtype=np.int64)


def _label(x0) -> int:
    if isinstance(x0, str):
        if not x0.startswith("d"):
            raise GlueError(f"bad start label {x0!r}")
        return int(x0[1:])
    if isinstance(x0, tuple) and len(x0) == 2 and x0[0] == "d":
        return int(x0[1])
    return 0


# -- single path -----------------------------------------------------------------

@dataclass
class GluePath:
    times: np.ndarray
    points: np.ndarray
    hit_times: np.ndarray
    hit_traps: np.ndarray
    hit_angles: np.ndarray

    def hit_counts(self, n: int) -> np.ndarray:
        return np.bincount(self.hit_traps, minlength=n + 1)[1:]


def glue_step_run(x0, T: float, config: GlueConfig, spec_or_scene, nus=None, grid_dt: float | None = None,
                  path: int = 0, max_hits: int = 1_000_000) -> GluePath:
    """One path of the limit process on ``[0, T]`` sampled every ``grid_dt``."""
    config.validate(spec_or_scene)
    scene, model = _model(spec_or_scene)
    meas = _meas(scene, nus)
    grid_dt = config.dt if grid_dt is None else grid_dt
    ng = int(math.floor(T / grid_dt + 1e-9)) + 1
    out_grid = np.zeros((ng, 2))
    ht = np.zeros(max_hits)
    hk = np.zeros(max_hits, dtype=np.int64)
    hth = np.zeros(max_hits)
    x, y, s = _start(scene, x0, 1)
    n_g, n_h = K.k_glue_record(model, meas, x[0], y[0], int(s[0]), config.delta, config.dt, config.kappa,
                               config.tol, T, grid_dt, np.uint64(seed_word(config.seed)),
                               np.uint64(TAG_REC), path, out_grid, ht, hk, hth)
    if n_h > max_hits:
        raise GlueError(f"hit log overflow ({n_h} > {max_hits})")
    return GluePath(np.arange(n_g) * grid_dt, out_grid[:n_g], ht[:n_h], hk[:n_h], hth[:n_h])


# -- ensembles -----------------------------------------------------------------------

@dataclass
class SequenceSample:
    sequences: np.ndarray
    hits: np.ndarray
    times: np.ndarray

    @property
    def complete(self) -> np.ndarray:
        return np.all(self.sequences > 0, axis=1)

    def law(self) -> dict[tuple[int, ...], float]:
        rows = self.sequences[self.complete]
        c = Counter(map(tuple, rows.tolist()))
        n = max(rows.shape[0], 1)
        return {k: v / n for k, v in sorted(c.items())}

    def first_law(self, n: int) -> np.ndarray:
        first = self.sequences[self.complete, 0]
        return np.bincount(first, minlength=n + 1)[1:] / max(first.size, 1)


def _sequences(x0, m: int, config: GlueConfig, spec_or_scene, nus, N: int | None = None) -> SequenceSample:
    config.validate(spec_or_scene)
    scene, model = _model(spec_or_scene)
    if scene.n == 0:
        raise GlueError("trap sequences need at least one trap")
    N = config.N if N is None else N
    meas = _meas(scene, nus)
    x, y, s = _start(scene, x0, N)
    seq = np.zeros((N, m), dtype=np.int64)
    hits = np.zeros(N, dtype=np.int64)
    tt = np.zeros(N)
    apply_thread_cap()
    K.k_glue_seq(model, meas, x, y, s, config.delta, config.dt, config.kappa, config.tol, m,
                 config.max_time, np.uint64(seed_word(config.seed)), np.uint64(TAG_SEQ), seq, hits, tt)
    return SequenceSample(seq, hits, tt)


def first_trap_hit(x0, config: GlueConfig, spec_or_scene, N: int | None = None) -> np.ndarray:
    """Empirical law of the first trap boundary reached from ``x0`` in U."""
    if _label(x0):
        raise GlueError("first_trap_hit starts from a point of U")
    sample = _sequences(x0, 1, config, spec_or_scene, None, N)
    return sample.first_law(getattr(spec_or_scene, "scene", spec_or_scene).n)


def trap_sequence(x0, m: int, config: GlueConfig, spec_or_scene, nus=None, N: int | None = None
                  ) -> SequenceSample:
    """First ``m`` distinct traps visited (consecutive repeats collapsed).

    From a collapsed point ``"d<k>"`` the current trap is ``k``, so the first entry is
    the next trap different from ``k``.
    """
    if m < 1:
        raise GlueError("m must be >= 1")
    return _sequences(x0, m, config, spec_or_scene, nus, N)


# -- resolvent functional -----------------------------------------------------------------

@dataclass(frozen=True)
class Psi:
    """``const + sum_b amp_b * bump((x - c_b) / w_b)`` with the standard C-infinity bump."""

    const: float = 0.0
    bumps: tuple[tuple[float, float, float, float], ...] = ()

    def array(self):
        b = np.array(self.bumps, dtype=float).reshape(-1, 4)
        return (float(self.const), b)

    def __call__(self, X, Y):
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        out = np.full(np.broadcast(X, Y).shape, float(self.const))
        for cx, cy, w, amp in self.bumps:
            dx = X - cx
            dy = Y - cy
            dx -= np.floor(dx + 0.5)
            dy -= np.floor(dy + 0.5)
            q = (dx * dx + dy * dy) / (w * w)
            inside = q < 1.0
            val = np.zeros_like(q)
            val[inside] = amp * np.exp(1.0 - 1.0 / (1.0 - q[inside]))
            out = out + val
        return out

    @property
    def sup(self) -> float:
        return abs(self.const) + sum(abs(b[3]) for b in self.bumps)

    def __add__(self, other: "Psi") -> "Psi":
        return Psi(self.const + other.const, self.bumps + other.bumps)

    def check(self, scene, delta: float = 0.0) -> None:
        """Bump supports must stay clear of traps so psi is constant on each boundary."""
        for cx, cy, w, amp in self.bumps:
            if not w > 0:
                raise GlueError("bump width must be positive")
            for t in scene.traps:
                dx = cx - t.center.x
                dy = cy - t.center.y
                dx -= math.floor(dx + 0.5)
                dy -= math.floor(dy + 0.5)
                if math.hypot(dx, dy) - t.radius < w + delta:
                    raise GlueError(f"psi bump at ({cx}, {cy}) overlaps trap {t.id}")

    @classmethod
    def from_dict(cls, doc: dict) -> "Psi":
        return cls(float(doc.get("const", 0.0)),
                   tuple(tuple(float(v) for v in (b["center"][0], b["center"][1], b["width"], b["amp"]))
                         for b in doc.get("bumps", [])))

    def to_dict(self) -> dict:
        return {"const": self.const,
                "bumps": [{"center": [b[0], b[1]], "width": b[2], "amp": b[3]} for b in self.bumps]}


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    se: float
    n: int
    samples: np.ndarray | None = None


def resolvent_mc(x0, lam: float, psi: Psi, config: GlueConfig, spec_or_scene, nus=None,
                 N: int | None = None) -> MCEstimate:
    """``E int_0^inf exp(-lam t) psi(X_t) dt``, truncated where ``exp(-lam t) < 1e-8``."""
    if not lam > 0:
        raise GlueError("lam must be positive")
    config.validate(spec_or_scene)
    scene, model = _model(spec_or_scene)
    psi.check(scene)
    N = config.N if N is None else N
    meas = _meas(scene, nus)
    x, y, s = _start(scene, x0, N)
    if np.any(s):
        raise GlueError("resolvent_mc starts from a point of U")
    t_max = math.log(1e8) / lam
    val = np.zeros(N)
    hits = np.zeros(N, dtype=np.int64)
    apply_thread_cap()
    K.k_glue_resolvent(model, meas, x, y, float(lam), psi.array(), config.delta, config.dt, config.kappa,
                       config.tol, t_max, np.uint64(seed_word(config.seed)), np.uint64(TAG_RES), val, hits)
    return MCEstimate(float(val.mean()), float(val.std(ddof=1) / math.sqrt(N)) if N > 1 else math.nan, N, val)
