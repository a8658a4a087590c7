"""Small statistics used by the verdicts: binomial envelopes, TV, chi-square, KS, energy distance."""

from __future__ import annotations

import math

import numpy as np
from scipy import stats as sps

from .geometry import TWO_PI


def binom_se(p: float, n: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 0.0) / n) if n else math.nan


def tv_distance(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return 0.5 * float(np.abs(p - q).sum())


def tv_sigma(p, n: int) -> float:
    """Noise scale of the TV distance of an ``n``-sample empirical law around ``p``."""
    p = np.asarray(p, dtype=float)
    return 0.5 * float(np.sum(np.sqrt(np.clip(p * (1.0 - p), 0.0, None) / n)))


def chi2_uniform(angles, bins: int = 36) -> float:
    """p-value of a chi-square test of angles against the uniform law on the circle."""
    counts = np.histogram(np.mod(angles, TWO_PI), bins=bins, range=(0.0, TWO_PI))[0]
    return float(sps.chisquare(counts).pvalue)


def chi2_homogeneity(a, b, bins: int = 36) -> float:
    """p-value that two angle samples share one law (two-row contingency table)."""
    ca = np.histogram(np.mod(a, TWO_PI), bins=bins, range=(0.0, TWO_PI))[0]
    cb = np.histogram(np.mod(b, TWO_PI), bins=bins, range=(0.0, TWO_PI))[0]
    keep = (ca + cb) > 0
    return float(sps.chi2_contingency(np.vstack([ca[keep], cb[keep]]))[1])


def ks_uniform_angle(angles) -> float:
    """Kolmogorov-Smirnov distance of angles to the uniform law on ``[0, 2 pi)``."""
    return float(sps.kstest(np.mod(angles, TWO_PI) / TWO_PI, "uniform").statistic)


def torus_pdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :] - b[None, :, :]
    d -= np.floor(d + 0.5)
    return np.sqrt((d * d).sum(-1))


def energy_distance(a, b, max_n: int = 2000) -> float:
    """Energy distance between two point clouds on the torus (first ``max_n`` points each)."""
    a = np.asarray(a, dtype=float)[:max_n]
    b = np.asarray(b, dtype=float)[:max_n]
    ab = torus_pdist(a, b).mean()
    aa = torus_pdist(a, a).sum() / max(a.shape[0] * (a.shape[0] - 1), 1)
    bb = torus_pdist(b, b).sum() / max(b.shape[0] * (b.shape[0] - 1), 1)
    return float(2.0 * ab - aa - bb)
