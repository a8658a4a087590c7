"""Periodic geometry of the unit 2-torus with disjoint disk traps.

Points are stored as canonical representatives in [0, 1)^2.  Minimum-image
differences use the half-open convention [-1/2, 1/2), so ties resolve to -1/2.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


class GeometryError(ValueError):
    """Invalid scene or trap definition."""


def wrap(x):
    """Map coordinates onto [0, 1).  Works on scalars and arrays."""
    x = np.asarray(x, dtype=float)
    w = x - np.floor(x)
    # x - floor(x) rounds to 1.0 for tiny negative x
    return np.where(w >= 1.0, 0.0, w)


@dataclass(frozen=True)
class TorusPoint:
    x: float
    y: float

    def __post_init__(self):
        wx, wy = wrap([self.x, self.y])
        object.__setattr__(self, "x", float(wx))
        object.__setattr__(self, "y", float(wy))

    @classmethod
    def of(cls, p) -> "TorusPoint":
        if isinstance(p, TorusPoint):
            return p
        px, py = p
        return cls(px, py)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def __iter__(self):
        yield self.x
        yield self.y


def _xy(p) -> np.ndarray:
    if isinstance(p, TorusPoint):
        return p.as_array()
    return np.asarray(p, dtype=float)


def min_image_delta(x, y) -> np.ndarray:
    """Representative of ``y - x`` with each component in [-1/2, 1/2)."""
    d = _xy(y) - _xy(x)
    return d - np.floor(d + 0.5)


def torus_dist(x, y):
    return np.linalg.norm(min_image_delta(x, y), axis=-1)


@dataclass(frozen=True)
class DiskTrap:
    id: int
    center: TorusPoint
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", TorusPoint.of(self.center))
        if not 0.0 < self.radius < 0.5:
            raise GeometryError(f"trap {self.id}: radius {self.radius} outside (0, 1/2)")


class Region(NamedTuple):
    """Region tag: ``kind`` is 'U', 'trap' or 'boundary'; ``trap`` is the trap id or None."""

    kind: str
    trap: int | None = None

    @property
    def code(self) -> int:
        # integer encoding shared with the compiled kernels
        if self.kind == "U":
            return 0
        return self.trap if self.kind == "trap" else -self.trap

    @classmethod
    def from_code(cls, code: int) -> "Region":
        if code == 0:
            return cls("U")
        return cls("trap", code) if code > 0 else cls("boundary", -code)


@dataclass(frozen=True)
class Scene:
    traps: tuple[DiskTrap, ...] = field(default_factory=tuple)

    def __post_init__(self):
        traps = tuple(self.traps)
        object.__setattr__(self, "traps", traps)
        ids = [t.id for t in traps]
        if ids != list(range(1, len(traps) + 1)):
            raise GeometryError(f"trap ids must be 1..n in order, got {ids}")
        for i, a in enumerate(traps):
            for b in traps[i + 1:]:
                gap = float(torus_dist(a.center, b.center)) - a.radius - b.radius
                if gap <= 0.0:
                    raise GeometryError(
                        f"traps {a.id} and {b.id} overlap (boundary gap {gap:.6g})")

    @property
    def n(self) -> int:
        return len(self.traps)

    def trap(self, k: int) -> DiskTrap:
        return self.traps[k - 1]

    @property
    def centers(self) -> np.ndarray:
        return np.array([t.center.as_array() for t in self.traps]).reshape(-1, 2)

    @property
    def radii(self) -> np.ndarray:
        return np.array([t.radius for t in self.traps], dtype=float)

    def translated(self, shift) -> "Scene":
        s = _xy(shift)
        return Scene(tuple(DiskTrap(t.id, TorusPoint.of(t.center.as_array() + s), t.radius)
                           for t in self.traps))

    def to_dict(self) -> dict:
        return {"traps": [{"id": t.id, "center": [t.center.x, t.center.y], "radius": t.radius}
                          for t in self.traps]}

    @classmethod
    def from_dict(cls, doc: dict) -> "Scene":
        try:
            items = doc["traps"]
            traps = [DiskTrap(int(it["id"]), TorusPoint.of(it["center"]), float(it["radius"]))
                     for it in items]
        except (KeyError, TypeError) as exc:
            raise GeometryError(f"malformed scene document: {exc!r}") from exc
        return cls(tuple(traps))

    @classmethod
    def disks(cls, centers: Iterable[Sequence[float]], radii: Iterable[float]) -> "Scene":
        return cls(tuple(DiskTrap(k + 1, TorusPoint.of(c), float(r))
                         for k, (c, r) in enumerate(zip(centers, radii))))

    def digest(self) -> str:
        import hashlib
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def load_scene(path) -> Scene:
    return Scene.from_dict(json.loads(Path(path).read_text()))


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2))


def sdist(x, trap: DiskTrap):
    """Signed distance to the trap boundary: positive in U, negative inside the disk."""
    return torus_dist(trap.center, x) - trap.radius


def e_r(theta):
    theta = np.asarray(theta, dtype=float)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def boundary_point(trap: DiskTrap, theta) -> np.ndarray:
    return wrap(trap.center.as_array() + trap.radius * e_r(theta))


def normal_into_trap(trap: DiskTrap, theta) -> np.ndarray:
    """Unit normal at the boundary point, exterior with respect to U (points at the center)."""
    return -e_r(theta)


def polar(x, trap: DiskTrap) -> tuple[np.ndarray, np.ndarray]:
    """Radius and angle in [0, 2pi) of ``x`` about the trap center (min-image)."""
    d = min_image_delta(trap.center, x)
    r = np.hypot(d[..., 0], d[..., 1])
    th = np.mod(np.arctan2(d[..., 1], d[..., 0]), TWO_PI)
    return r, th


def nearest_trap(x, scene: Scene) -> tuple[int, float]:
    """Id and signed distance of the trap whose boundary is closest (0 for an empty scene)."""
    if scene.n == 0:
        return 0, math.inf
    d = np.array([float(sdist(x, t)) for t in scene.traps])
    k = int(np.argmin(d))
    return k + 1, float(d[k])


def classify(x, scene: Scene, tol: float = 0.0) -> Region:
    if tol < 0:
        raise GeometryError("tol must be non-negative")
    k, d = nearest_trap(x, scene)
    if k == 0:
        return Region("U")
    if abs(d) <= tol:
        return Region("boundary", k)
    if d < 0:
        return Region("trap", k)
    return Region("U")


def boundary_samples(trap: DiskTrap, m: int = 720) -> np.ndarray:
    theta = np.arange(m) * (TWO_PI / m)
    return boundary_point(trap, theta)
