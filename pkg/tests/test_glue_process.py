import math

import numpy as np
import pytest
from scipy import stats

from trapflow.geometry import Scene
from trapflow.glue_process import (GlueConfig, GlueError, Psi, first_trap_hit, glue_step_run,
                                   resolvent_mc, trap_sequence)
from trapflow.kj_solver import build_grid, harmonic_measure
from trapflow.sde_sim import SimConfig, trace_ensemble
from trapflow.stats import chi2_uniform
from trapflow.trapfield import BoundaryMeasure, FieldSpec, TrapProfile

ONE = Scene.disks([(0.5, 0.5)], [0.1])
PAIR = Scene.disks([(0.3, 0.5), (0.7, 0.5)], [0.1, 0.1])


def test_config_validation():
    with pytest.raises(GlueError):
        GlueConfig(delta=0.0)
    with pytest.raises(GlueError):
        GlueConfig(delta=0.01, kappa=0.8)
    with pytest.raises(GlueError, match="min radius"):
        GlueConfig(delta=0.03).validate(ONE)


def test_empty_scene_is_brownian():
    p = glue_step_run((0.5, 0.5), 20.0, GlueConfig(delta=0.005, seed=1), Scene(()), [], grid_dt=0.01)
    d = np.diff(p.points, axis=0)
    d -= np.floor(d + 0.5)
    n = d.shape[0]
    var = d.var(axis=0) / 0.01
    # sample variance of n Gaussian increments has relative sd sqrt(2/n)
    assert np.all(np.abs(var - 1.0) <= 3 * math.sqrt(2.0 / n))
    assert p.hit_times.size == 0


def test_variance_ratio_between_hits():
    p = glue_step_run((0.5, 0.5), 20.0, GlueConfig(delta=0.005, seed=2), Scene(()), [], grid_dt=0.01)
    d = np.diff(p.points, axis=0)
    d -= np.floor(d + 0.5)
    d2 = d[: d.shape[0] // 2 * 2].reshape(-1, 2, 2).sum(axis=1)
    ratio = d2.var(axis=0) / (2 * d.var(axis=0))
    assert np.all(np.abs(ratio - 1.0) < 0.15)


def test_uniform_reinjection_angles():
    p = glue_step_run((0.2, 0.2), 200.0, GlueConfig(delta=0.005, seed=3), ONE, None, grid_dt=0.1)
    assert p.hit_angles.size >= 10_000
    assert chi2_uniform(p.hit_angles, 36) > 0.01


def test_reinjection_ks_shrinks_with_hits():
    p = glue_step_run((0.2, 0.2), 200.0, GlueConfig(delta=0.005, seed=4), ONE, None, grid_dt=0.1)
    for n in (100, 1000, 10_000):
        ks = stats.kstest(p.hit_angles[:n] / (2 * math.pi), "uniform").statistic
        assert ks <= 1.63 / math.sqrt(n) * 1.5  # 1% KS critical value with slack


def test_point_mass_reinjection():
    nus = [BoundaryMeasure.point(1, math.pi)]
    p = glue_step_run((0.2, 0.2), 20.0, GlueConfig(delta=0.005, seed=5), ONE, nus, grid_dt=0.1)
    assert p.hit_angles.size > 100
    np.testing.assert_allclose(p.hit_angles, math.pi, atol=1e-12)


def test_first_hit_symmetric_pair():
    N = 10_000
    f = first_trap_hit((0.5, 0.5), GlueConfig(delta=0.005, seed=6, N=N), PAIR)
    assert f.sum() == 1.0
    assert abs(f[0] - 0.5) <= 3 * math.sqrt(0.25 / N)


def test_first_hit_near_boundary_matches_harmonic_measure():
    R, delta = 0.1, 0.005
    x = (0.3 + R + delta, 0.5)
    f = first_trap_hit(x, GlueConfig(delta=delta, seed=7, N=4000), PAIR)
    H = harmonic_measure(build_grid(PAIR, 256), [x])[0]
    assert f[0] >= 0.9 and H[0] >= 0.9
    assert abs(f[0] - H[0]) <= 3 * math.sqrt(f[0] * (1 - f[0]) / 4000) + 0.01


def test_first_hit_rejects_trap_start():
    with pytest.raises(GlueError):
        first_trap_hit((0.3, 0.5), GlueConfig(delta=0.005, N=10), PAIR)
    with pytest.raises(GlueError):
        first_trap_hit("d1", GlueConfig(delta=0.005, N=10), PAIR)


def test_sequence_m1_is_first_hit():
    cfg = GlueConfig(delta=0.005, seed=8, N=2000)
    np.testing.assert_array_equal(trap_sequence((0.5, 0.2), 1, cfg, PAIR).first_law(2),
                                  first_trap_hit((0.5, 0.2), cfg, PAIR))


def test_sequences_are_distinct_consecutive():
    s = trap_sequence("d1", 4, GlueConfig(delta=0.005, seed=9, N=500), PAIR)
    seq = s.sequences[s.complete]
    assert np.all(seq[:, 0] == 2)
    assert np.all(seq[:, 1:] != seq[:, :-1])
    assert sum(s.law().values()) == pytest.approx(1.0)


def _triple():
    scene = Scene.disks([(0.3, 0.5), (0.7, 0.5), (0.5, 0.15)], [0.1, 0.1, 0.1])
    spec = FieldSpec(scene, tuple(TrapProfile.quadratic(1.0, 0.1) for _ in range(3)))
    return scene, spec


def test_delta_halving_is_within_noise():
    scene, _ = _triple()
    N = 10_000
    a = trap_sequence("d1", 1, GlueConfig(delta=0.01, seed=10, N=N), scene).first_law(3)
    b = trap_sequence("d1", 1, GlueConfig(delta=0.005, seed=11, N=N), scene).first_law(3)
    se = np.sqrt(a * (1 - a) / N + b * (1 - b) / N)
    assert np.all(np.abs(a - b) <= 3 * se + 1e-12)


def test_next_trap_law_matches_eps_process():
    scene, spec = _triple()
    N = 3000
    glue = trap_sequence("d1", 1, GlueConfig(delta=0.005, seed=12, N=N), scene).first_law(3)
    ens = trace_ensemble(spec, SimConfig.for_spec(spec, 0.02, N=N, seed=13, max_real_time=1e4), start_trap=1)
    eps_law = ens.next_trap_law(3)
    p, q = glue[1], eps_law[1]
    assert ens.complete.mean() > 0.99
    assert abs(p - q) <= 3 * math.sqrt(p * (1 - p) / N + q * (1 - q) / N)


def test_psi_algebra_and_checks():
    a = Psi(0.5, ((0.5, 0.5, 0.1, 1.0),))
    assert float(a(0.5, 0.5)) == pytest.approx(1.5)
    assert float(a(0.75, 0.5)) == pytest.approx(0.5)
    assert (a + Psi(1.0)).sup == pytest.approx(2.5)
    assert Psi.from_dict(a.to_dict()) == a
    with pytest.raises(GlueError, match="overlaps"):
        Psi(0.0, ((0.35, 0.5, 0.1, 1.0),)).check(ONE)


def test_resolvent_of_constant():
    lam = 2.0
    est = resolvent_mc((0.2, 0.2), lam, Psi(1.0), GlueConfig(delta=0.005, N=200, seed=1), ONE)
    # the discounted integral of a constant is path independent
    assert est.se <= 1e-12
    assert est.mean == pytest.approx((1 - 1e-8) / lam, rel=1e-9)


def test_resolvent_linearity_common_random_numbers():
    cfg = GlueConfig(delta=0.01, N=500, seed=2)
    p1 = Psi(0.0, ((0.2, 0.2, 0.1, 1.0),))
    p2 = Psi(0.3, ((0.8, 0.8, 0.1, -0.5),))
    a = resolvent_mc((0.2, 0.25), 1.0, p1, cfg, ONE)
    b = resolvent_mc((0.2, 0.25), 1.0, p2, cfg, ONE)
    c = resolvent_mc((0.2, 0.25), 1.0, p1 + p2, cfg, ONE)
    np.testing.assert_allclose(c.samples, a.samples + b.samples, rtol=1e-10, atol=1e-12)
    assert abs(c.mean - a.mean - b.mean) <= 3 * c.se


def test_glue_deterministic():
    cfg = GlueConfig(delta=0.005, seed=3, N=300)
    a = trap_sequence("d1", 2, cfg, PAIR)
    b = trap_sequence("d1", 2, cfg, PAIR)
    assert a.sequences.tobytes() == b.sequences.tobytes() and a.times.tobytes() == b.times.tobytes()
