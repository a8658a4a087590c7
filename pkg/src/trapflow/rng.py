"""Counter-based random streams (Philox-4x64-10).

Every draw is a pure function of ``(seed, stream tag, path index, draw index)``, so
results do not depend on how paths are scheduled across workers.  The block function
is bitwise identical to numpy's ``Philox`` bit generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_LO32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0
TWO_PI = 2.0 * math.pi


@nb.njit(inline="always", cache=True)
def _mulhilo(a, b):
    a_lo = a & _LO32
    a_hi = a >> _S32
    b_lo = b & _LO32
    b_hi = b >> _S32
    ll = a_lo * b_lo
    lh = a_lo * b_hi
    hl = a_hi * b_lo
    hh = a_hi * b_hi
    mid = (ll >> _S32) + (lh & _LO32) + (hl & _LO32)
    hi = hh + (lh >> _S32) + (hl >> _S32) + (mid >> _S32)
    return hi, a * b


@nb.njit(cache=True)
def philox4x64(c0, c1, c2, c3, k0, k1):
    for rnd in range(10):
        hi0, lo0 = _mulhilo(_M0, c0)
        hi1, lo1 = _mulhilo(_M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        if rnd < 9:
            k0 = k0 + _W0
            k1 = k1 + _W1
    return c0, c1, c2, c3


@nb.njit(inline="always", cache=True)
def _u01(bits):
    # 53-bit uniform on [0, 1)
    return np.float64(bits >> _S11) * _INV53


@nb.njit(cache=True)
def draw(seed, tag, path, j):
    """Two standard normals and two uniforms in [0, 1) for draw ``j`` of ``path``."""
    r0, r1, r2, r3 = philox4x64(np.uint64(j), np.uint64(path), np.uint64(tag), np.uint64(0),
                                np.uint64(seed), np.uint64(0x5EED))
    u0 = _u01(r0)
    u1 = _u01(r1)
    rad = math.sqrt(-2.0 * math.log1p(-u0))
    ang = TWO_PI * u1
    return rad * math.cos(ang), rad * math.sin(ang), _u01(r2), _u01(r3)


@nb.njit(cache=True)
def _draw_many(seed, tag, path, j0, count, out):
    for i in range(count):
        z0, z1, v0, v1 = draw(seed, tag, path, j0 + i)
        out[i, 0] = z0
        out[i, 1] = z1
        out[i, 2] = v0
        out[i, 3] = v1


def block(counter, key) -> np.ndarray:
    """Raw Philox-4x64-10 block for a 4-word counter and 2-word key."""
    c = [np.uint64(v) for v in counter]
    k = [np.uint64(v) for v in key]
    return np.array(philox4x64(c[0], c[1], c[2], c[3], k[0], k[1]), dtype=np.uint64)


def seed_word(seed: int) -> int:
    return int(seed) & 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class RngStream:
    """Deterministic stream for one path: draw ``j`` depends only on ``(seed, tag, path, j)``."""

    seed: int
    path: int = 0
    tag: int = 0

    def draw(self, j: int) -> tuple[float, float, float, float]:
        return draw(np.uint64(seed_word(self.seed)), np.uint64(self.tag), np.uint64(self.path),
                    np.uint64(j))

    def normals(self, j: int) -> np.ndarray:
        z0, z1, _, _ = self.draw(j)
        return np.array([z0, z1])

    def table(self, j0: int, count: int) -> np.ndarray:
        """Rows ``(z0, z1, u0, u1)`` for draws ``j0 .. j0 + count - 1``."""
        out = np.empty((count, 4))
        _draw_many(np.uint64(seed_word(self.seed)), np.uint64(self.tag), np.uint64(self.path),
                   np.uint64(j0), count, out)
        return out
