import math

import numpy as np
import pytest

from trapflow.stats import (binom_se, chi2_homogeneity, chi2_uniform, energy_distance,
                            ks_uniform_angle, torus_pdist, tv_distance, tv_sigma)


def test_tv_and_sigma():
    assert tv_distance([0.5, 0.5], [1.0, 0.0]) == pytest.approx(0.5)
    assert tv_distance([0.2, 0.8], [0.2, 0.8]) == 0.0
    assert tv_sigma([0.5, 0.5], 100) == pytest.approx(0.05)
    assert binom_se(0.5, 100) == pytest.approx(0.05)


def test_uniform_angle_tests():
    rng = np.random.default_rng(1)
    ang = rng.uniform(0, 2 * math.pi, 20_000)
    assert chi2_uniform(ang) > 1e-3
    assert ks_uniform_angle(ang) < 0.02
    assert chi2_uniform(np.full(1000, 1.0)) < 1e-10
    assert chi2_homogeneity(ang[:10_000], ang[10_000:]) > 1e-3


def test_energy_distance():
    rng = np.random.default_rng(2)
    a = rng.random((800, 2))
    b = rng.random((800, 2))
    assert abs(energy_distance(a, b)) < 5e-3
    assert energy_distance(a, 0.1 * b) > 0.05
    d = torus_pdist(np.array([[0.05, 0.5]]), np.array([[0.95, 0.5]]))
    assert d[0, 0] == pytest.approx(0.1)
