"""Gradient trap fields, boundary inflow, quasi-potential tables and boundary measures.

Inside trap k the drift is ``v = -grad U`` with ``U(r, theta) = G(r) (1 + beta cos theta)``
in polar coordinates about the trap center (``beta = 0`` for radial profiles).  ``G`` is a
polynomial with no constant or linear term.  Outside the closed disks ``v = 0``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .geometry import TWO_PI, DiskTrap, Scene, min_image_delta, polar

QUADRATURE_M = 360
TIE_TOL = 1e-12


class FieldError(ValueError):
    pass


@dataclass(frozen=True)
class TrapProfile:
    """``G`` holds polynomial coefficients from degree 2 upward."""

    kind: str
    G: tuple[float, ...]
    beta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "G", tuple(float(c) for c in self.G))
        if self.kind not in ("radial", "tilted"):
            raise FieldError(f"unknown profile kind {self.kind!r}")
        if self.kind == "radial" and self.beta != 0.0:
            raise FieldError("radial profiles carry beta = 0")
        if not self.G:
            raise FieldError("G needs at least one coefficient")

    @classmethod
    def radial(cls, *G: float) -> "TrapProfile":
        return cls("radial", tuple(G))

    @classmethod
    def tilted(cls, G: Sequence[float], beta: float) -> "TrapProfile":
        return cls("tilted", tuple(G), float(beta))

    @classmethod
    def quadratic(cls, a: float, R: float, beta: float = 0.0) -> "TrapProfile":
        """``G = a r^2 / (2R)``, i.e. ``G'(R) = a``."""
        c2 = a / (2.0 * R)
        return cls.radial(c2) if beta == 0.0 else cls.tilted((c2,), beta)

    def coeffs(self) -> np.ndarray:
        """Full coefficient vector, index = degree."""
        return np.concatenate([[0.0, 0.0], np.asarray(self.G)])

    def g(self, r):
        return np.polynomial.polynomial.polyval(r, self.coeffs())

    def dg(self, r):
        c = self.coeffs()
        return np.polynomial.polynomial.polyval(r, np.polynomial.polynomial.polyder(c))

    def potential(self, r, theta):
        return self.g(r) * (1.0 + self.beta * np.cos(theta))

    def to_dict(self, trap: int) -> dict:
        d = {"trap": trap, "kind": self.kind, "G": list(self.G)}
        if self.kind == "tilted":
            d["beta"] = self.beta
        return d


def _check_profile(profile: TrapProfile, trap: DiskTrap, n_r: int = 64, n_th: int = 72) -> None:
    R = trap.radius
    r = np.linspace(R / n_r, R, n_r)
    dg = profile.dg(r)
    if np.any(dg <= 0.0):
        bad = float(r[np.argmax(dg <= 0.0)])
        raise FieldError(f"trap {trap.id}: G'(r) <= 0 at r={bad:.6g}")
    if abs(profile.beta) >= 1.0:
        # inflow G'(R)(1 + beta cos theta) vanishes somewhere
        witness = 0.0 if profile.beta <= -1.0 else math.pi
        raise FieldError(
            f"trap {trap.id}: inflow not positive, beta={profile.beta} (witness theta={witness:.6g})")
    th = np.arange(n_th) * (TWO_PI / n_th)
    rr, tt = np.meshgrid(r, th, indexing="ij")
    gr, gt = _polar_gradient(profile, rr, tt)
    if np.any(np.hypot(gr, gt) <= 0.0):
        raise FieldError(f"trap {trap.id}: grad U vanishes away from the center")


def _polar_gradient(profile: TrapProfile, r, theta):
    """Radial and tangential components of grad U."""
    g = profile.g(r)
    dg = profile.dg(r)
    c, s = np.cos(theta), np.sin(theta)
    gr = dg * (1.0 + profile.beta * c)
    with np.errstate(divide="ignore", invalid="ignore"):
        gt = np.where(r > 0, -g * profile.beta * s / np.where(r > 0, r, 1.0), 0.0)
    return gr, gt


@dataclass(frozen=True)
class FieldSpec:
    scene: Scene
    profiles: tuple[TrapProfile, ...]

    def __post_init__(self):
        object.__setattr__(self, "profiles", tuple(self.profiles))
        if len(self.profiles) != self.scene.n:
            raise FieldError(
                f"need one profile per trap: {len(self.profiles)} profiles, {self.scene.n} traps")
        for prof, trap in zip(self.profiles, self.scene.traps):
            _check_profile(prof, trap)

    def profile(self, k: int) -> TrapProfile:
        return self.profiles[k - 1]

    def to_list(self) -> list[dict]:
        return [p.to_dict(k + 1) for k, p in enumerate(self.profiles)]

    @classmethod
    def from_list(cls, scene: Scene, items) -> "FieldSpec":
        if isinstance(items, dict):
            items = items.get("profiles", items.get("fields"))
        by_trap = {}
        for it in items:
            kind = it.get("kind", "radial")
            G = it["G"]
            prof = TrapProfile.radial(*G) if kind == "radial" else TrapProfile.tilted(G, it["beta"])
            by_trap[int(it["trap"])] = prof
        if sorted(by_trap) != list(range(1, scene.n + 1)):
            raise FieldError(f"field file covers traps {sorted(by_trap)}, scene has {scene.n}")
        return cls(scene, tuple(by_trap[k] for k in range(1, scene.n + 1)))

    def digest(self) -> str:
        import hashlib
        blob = json.dumps({"scene": self.scene.to_dict(), "fields": self.to_list()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_field(scene: Scene, path) -> FieldSpec:
    return FieldSpec.from_list(scene, json.loads(Path(path).read_text()))


def potential(spec: FieldSpec, k: int, x) -> np.ndarray:
    trap = spec.scene.trap(k)
    r, th = polar(x, trap)
    return spec.profile(k).potential(r, th)


def eval_field(spec: FieldSpec, x) -> np.ndarray:
    """Drift ``v(x)``: ``-grad U`` of the owning trap on its closed disk, zero elsewhere."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1] + (2,))
    for k, (trap, prof) in enumerate(zip(spec.scene.traps, spec.profiles)):
        d = min_image_delta(trap.center, x)
        r = np.hypot(d[..., 0], d[..., 1])
        inside = r <= trap.radius
        if not np.any(inside):
            continue
        th = np.arctan2(d[..., 1], d[..., 0])
        gr, gt = _polar_gradient(prof, r, th)
        c, s = np.cos(th), np.sin(th)
        vx = -(gr * c - gt * s)
        vy = -(gr * s + gt * c)
        out[..., 0] = np.where(inside, vx, out[..., 0])
        out[..., 1] = np.where(inside, vy, out[..., 1])
    return out


def inflow(spec: FieldSpec, k: int, theta):
    """``a(theta) = <v, n> = dU/dr`` at ``r = R``."""
    trap = spec.scene.trap(k)
    prof = spec.profile(k)
    a = prof.dg(trap.radius) * (1.0 + prof.beta * np.cos(theta))
    a_arr = np.atleast_1d(a)
    if np.any(a_arr <= 0.0):
        th = np.broadcast_to(np.atleast_1d(theta), a_arr.shape)
        raise FieldError(f"trap {k}: inflow a <= 0 at theta={float(th[np.argmax(a_arr <= 0)]):.6g}")
    return a


def max_speed(spec: FieldSpec, k: int, n_r: int = 128, n_th: int = 72) -> float:
    trap = spec.scene.trap(k)
    prof = spec.profile(k)
    r = np.linspace(0.0, trap.radius, n_r + 1)[1:]
    th = np.arange(n_th) * (TWO_PI / n_th)
    rr, tt = np.meshgrid(r, th, indexing="ij")
    gr, gt = _polar_gradient(prof, rr, tt)
    return float(np.max(np.hypot(gr, gt)))


# -- boundary measures -------------------------------------------------------

@dataclass(frozen=True)
class BoundaryMeasure:
    """Either ``uniform`` with total ``mass`` or explicit atoms ``(theta_i, w_i)``."""

    trap: int
    theta: np.ndarray = field(default_factory=lambda: np.empty(0))
    weights: np.ndarray = field(default_factory=lambda: np.empty(0))
    uniform_mass: float | None = None

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=float).reshape(-1)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "weights", w)
        if self.uniform_mass is not None:
            if not self.uniform_mass > 0.0:
                raise FieldError("uniform measure needs positive mass")
            if th.size:
                raise FieldError("uniform measure carries no atoms")
            return
        if th.size == 0 or th.size != w.size:
            raise FieldError("atoms need matching, nonempty theta and weight arrays")
        if np.any(w < 0) or not w.sum() > 0:
            raise FieldError("atom weights must be non-negative with positive total")
        if np.any(th < 0) or np.any(th >= TWO_PI) or np.any(np.diff(th) <= 0):
            raise FieldError("atom angles must lie in [0, 2pi) and increase strictly")

    @classmethod
    def uniform(cls, trap: int, mass: float = 1.0) -> "BoundaryMeasure":
        return cls(trap, uniform_mass=float(mass))

    @classmethod
    def atoms(cls, trap: int, theta, weights) -> "BoundaryMeasure":
        th = np.mod(np.asarray(theta, dtype=float).reshape(-1), TWO_PI)
        order = np.argsort(th, kind="stable")
        return cls(trap, th[order], np.asarray(weights, dtype=float).reshape(-1)[order])

    @classmethod
    def point(cls, trap: int, theta: float, mass: float = 1.0) -> "BoundaryMeasure":
        return cls.atoms(trap, [theta], [mass])

    @property
    def is_uniform(self) -> bool:
        return self.uniform_mass is not None

    @property
    def mass(self) -> float:
        return self.uniform_mass if self.is_uniform else float(self.weights.sum())

    def normalized(self) -> "BoundaryMeasure":
        if self.is_uniform:
            return BoundaryMeasure.uniform(self.trap, 1.0)
        return BoundaryMeasure(self.trap, self.theta, self.weights / self.weights.sum())

    def scaled(self, c: float) -> "BoundaryMeasure":
        if self.is_uniform:
            return BoundaryMeasure.uniform(self.trap, self.uniform_mass * c)
        return BoundaryMeasure(self.trap, self.theta, self.weights * c)

    def quadrature(self, M: int = QUADRATURE_M) -> tuple[np.ndarray, np.ndarray]:
        """Angles and weights; a uniform measure becomes ``M`` equal atoms."""
        if self.is_uniform:
            th = np.arange(M) * (TWO_PI / M)
            return th, np.full(M, self.uniform_mass / M)
        return self.theta, self.weights

    def support(self) -> np.ndarray:
        return self.theta[self.weights > 0] if not self.is_uniform else np.empty(0)

    def to_dict(self) -> dict:
        if self.is_uniform:
            return {"trap": self.trap, "uniform": self.uniform_mass}
        return {"trap": self.trap, "atoms": [[float(t), float(w)] for t, w in zip(self.theta, self.weights)]}

    @classmethod
    def from_dict(cls, doc: dict) -> "BoundaryMeasure":
        if "uniform" in doc:
            return cls.uniform(int(doc["trap"]), float(doc["uniform"]))
        th, w = zip(*doc["atoms"])
        return cls.atoms(int(doc["trap"]), th, w)


def nu_measure(mu: BoundaryMeasure, a: Callable | float, M: int = QUADRATURE_M) -> BoundaryMeasure:
    """Glue measure ``nu(d theta) = mu(d theta) / (2 a(theta))``."""
    if callable(a):
        a_fun = a
    else:
        a_const = float(a)
        a_fun = None
    if mu.is_uniform:
        if a_fun is None:
            if not a_const > 0:
                raise FieldError("inflow must be positive")
            return BoundaryMeasure.uniform(mu.trap, mu.uniform_mass / (2.0 * a_const))
        th, w = mu.quadrature(M)
        av = np.asarray(a_fun(th), dtype=float) * np.ones_like(th)
        if np.allclose(av, av[0], rtol=0, atol=1e-14):
            return BoundaryMeasure.uniform(mu.trap, mu.uniform_mass / (2.0 * av[0]))
    else:
        th, w = mu.theta, mu.weights
        av = np.asarray(a_fun(th), dtype=float) * np.ones_like(th) if a_fun else np.full(th.shape, a_const)
    support = w > 0
    if np.any(av[support] <= 0):
        raise FieldError("inflow must be positive on the support of mu")
    return BoundaryMeasure(mu.trap, th, w / (2.0 * av))


# -- quasi-potential and thresholds -----------------------------------------

@dataclass(frozen=True)
class QuasiPotentialTable:
    trap: int
    theta: np.ndarray
    V: np.ndarray
    V_min: float
    argmin: np.ndarray


def quasi_potential(spec: FieldSpec, k: int, M: int = QUADRATURE_M, radius: float | None = None
                    ) -> QuasiPotentialTable:
    """``V(theta) = 2 U(R, theta)`` for gradient profiles (``radius`` overrides ``R``)."""
    trap = spec.scene.trap(k)
    prof = spec.profile(k)
    R = trap.radius if radius is None else float(radius)
    th = np.arange(M) * (TWO_PI / M)
    V = 2.0 * prof.potential(R, th)
    vmin = float(V.min())
    arg = th[V <= vmin + TIE_TOL * max(1.0, abs(vmin))]
    return QuasiPotentialTable(k, th, V, vmin, arg)


def exit_measure(spec: FieldSpec, k: int, mode: str = "asymptotic", angles=None,
                 bins: int = QUADRATURE_M) -> BoundaryMeasure:
    """Exit law on the trap boundary.

    ``asymptotic``: uniform for radial profiles, a point mass at the quasi-potential
    argmin for tilted ones.  ``empirical``: histogram of observed exit ``angles``.
    """
    prof = spec.profile(k)
    if mode == "asymptotic":
        if prof.kind == "radial":
            return BoundaryMeasure.uniform(k, 1.0)
        table = quasi_potential(spec, k)
        if table.argmin.size != 1:
            raise FieldError(f"trap {k}: quasi-potential minimizer is not unique")
        return BoundaryMeasure.point(k, float(table.argmin[0]))
    if mode == "empirical":
        if angles is None:
            raise FieldError("empirical exit measure needs sampled angles")
        counts, edges = np.histogram(np.mod(angles, TWO_PI), bins=bins, range=(0.0, TWO_PI))
        mids = 0.5 * (edges[:-1] + edges[1:])
        return BoundaryMeasure(k, mids, counts / counts.sum())
    raise FieldError(f"unknown exit-measure mode {mode!r}")


def glue_measures(spec: FieldSpec, mus: Sequence[BoundaryMeasure] | None = None) -> list[BoundaryMeasure]:
    """``nu_k`` for every trap, from the asymptotic exit laws unless ``mus`` is given."""
    out = []
    for k in range(1, spec.scene.n + 1):
        mu = mus[k - 1] if mus is not None else exit_measure(spec, k)
        out.append(nu_measure(mu, lambda th, k=k: inflow(spec, k, th)))
    return out


@dataclass(frozen=True)
class ThresholdLadder:
    """``values[i]`` is the depth of trap ``order[i]``; ``relabel[old_id] = new_id``."""

    values: tuple[float, ...]
    order: tuple[int, ...]

    @property
    def relabel(self) -> dict[int, int]:
        return {old: new + 1 for new, old in enumerate(self.order)}

    def window(self, lam: float) -> int:
        """Index ``k`` with ``V_{k-1} < lam < V_k``; ``n + 1`` when ``lam >= V_n``."""
        for i, v in enumerate(self.values):
            if lam < v:
                return i + 1
        return len(self.values) + 1


def v_thresholds(spec: FieldSpec) -> ThresholdLadder:
    depths = [quasi_potential(spec, k).V_min for k in range(1, spec.scene.n + 1)]
    order = sorted(range(1, spec.scene.n + 1), key=lambda k: (depths[k - 1], k))
    vals = [depths[k - 1] for k in order]
    for (ka, va), (kb, vb) in zip(zip(order, vals), zip(order[1:], vals[1:])):
        if vb - va <= TIE_TOL:
            raise FieldError(f"threshold tie between traps {ka} and {kb} (V = {va:.12g})")
    return ThresholdLadder(tuple(vals), tuple(order))


def action_oracle(spec: FieldSpec, k: int, theta: float, n_steps: int = 200) -> float:
    """Minimized discretized Freidlin-Wentzell action along the ray at angle ``theta``.

    Piecewise-linear paths from the center to the boundary point with ``n_steps``
    uniform time steps; node radii and the total time are optimized.
    """
    from scipy.optimize import minimize

    trap = spec.scene.trap(k)
    R = trap.radius
    e = np.array([math.cos(theta), math.sin(theta)])
    c = trap.center.as_array()

    def drift_along(r):
        pts = c + np.outer(r, e)
        return eval_field(spec, pts) @ e

    def action(z):
        inner = R / (1.0 + np.exp(-z[:-1]))
        T = math.exp(z[-1])
        r = np.concatenate([[0.0], np.sort(inner), [R]])
        dt = T / n_steps
        mid = 0.5 * (r[1:] + r[:-1])
        return 0.5 * np.sum(((r[1:] - r[:-1]) / dt - drift_along(mid)) ** 2) * dt

    # start from the time-reversed relaxation r(t) ~ R exp(t - T) on a moderate horizon
    t = np.linspace(0.0, 1.0, n_steps + 1)[1:-1]
    r0 = R * np.exp(8.0 * (t - 1.0))
    z0 = np.concatenate([np.log(r0 / (R - r0)), [math.log(8.0)]])
    res = minimize(action, z0, method="L-BFGS-B", options={"maxiter": 20000, "maxfun": 10**7})
    return float(res.fun)
