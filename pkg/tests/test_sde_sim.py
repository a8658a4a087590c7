import math

import numpy as np
import pytest
from scipy.integrate import quad

from trapflow.geometry import Region, Scene, TorusPoint, e_r, sdist
from trapflow.rng import RngStream
from trapflow.sde_sim import (InfeasibleError, PathRecord, SimConfig, SimError, aux1d_experiment,
                              coarse_metastable_sim, em_step, exit_experiment, run_until,
                              splitting_experiment, splitting_limit, trace_ensemble, trace_extract)
from trapflow.stats import chi2_homogeneity, chi2_uniform, ks_uniform_angle
from trapflow.trapfield import FieldSpec, TrapProfile

TWO_PI = 2 * math.pi


def escape_probability(G, R, eps, delta):
    """Exact radial splitting probability from r = R (scale function of the radial diffusion)."""
    GR = G(R)
    inner = quad(lambda r: math.exp(2 * (G(r) - GR) / eps) / r, R - delta, R, limit=200)[0]
    outer = math.log((R + eps) / R)
    return inner / (inner + outer)


def big_disk(a=1.0, R=0.4):
    # G'(R) = a and G''(R) = 0: no curvature correction at the boundary
    prof = TrapProfile.radial(a / R, -a / (3 * R * R))
    return FieldSpec(Scene.disks([(0.5, 0.5)], [R]), (prof,)), prof


# -- configuration -----------------------------------------------------------------

def test_sim_config_rules(single_radial):
    c = SimConfig(eps=0.05)
    assert c.dt_trap == pytest.approx(0.1 * 0.05**2)
    assert c.tol == pytest.approx(0.05 * 0.05)
    with pytest.raises(SimError):
        SimConfig(eps=0.05, dt_trap=1e-3)
    with pytest.raises(SimError):
        SimConfig(eps=0.05, kappa=0.7)
    with pytest.raises(SimError):
        SimConfig(eps=0.0)
    fs = SimConfig.for_spec(single_radial, 0.02)
    fs.validate(single_radial)
    with pytest.raises(SimError, match="drift sub-step"):
        SimConfig(eps=0.5, dt_trap=0.02, dt_U=0.02).validate(single_radial)


# -- single steps and paths ------------------------------------------------------------

def test_em_step_in_U_is_brownian(single_radial):
    rng = RngStream(3, 0, 99)
    dt = 1e-3
    x0 = TorusPoint(0.1, 0.1)
    inc = []
    for j in range(20_000):
        p = em_step(x0, dt, 0.05, single_radial, rng, j)
        d = np.array([p.x - x0.x, p.y - x0.y])
        inc.append(d - np.floor(d + 0.5))
    inc = np.array(inc)
    se = math.sqrt(dt / inc.shape[0])
    assert np.all(np.abs(inc.mean(axis=0)) <= 3 * se)
    assert np.var(inc[:, 0]) / dt == pytest.approx(1.0, abs=0.05)


def test_em_step_at_equilibrium_has_no_drift(single_radial):
    rng = RngStream(1, 0, 99)
    dt = 1e-5
    p = em_step((0.5, 0.5), dt, 0.05, single_radial, rng, 4)
    z0, z1, _, _ = rng.draw(4)
    np.testing.assert_allclose([p.x - 0.5, p.y - 0.5], [math.sqrt(dt) * z0, math.sqrt(dt) * z1], atol=1e-15)


def test_em_step_deterministic(single_radial):
    a = [em_step((0.55, 0.5), 1e-4, 0.05, single_radial, RngStream(5, 2, 1), j) for j in range(50)]
    b = [em_step((0.55, 0.5), 1e-4, 0.05, single_radial, RngStream(5, 2, 1), j) for j in range(50)]
    assert a == b


def test_run_until_boundary_from_inside(single_radial):
    cfg = SimConfig.for_spec(single_radial, 0.1, seed=2, max_real_time=1e3)
    rec = run_until((0.5, 0.5), lambda t, p, r: r.kind != "trap", cfg, single_radial)
    assert rec.reason == "stopped"
    assert rec.region(-1) == Region("boundary", 1)
    assert abs(float(sdist(rec.points[-1], single_radial.scene.trap(1)))) <= cfg.tol


def test_run_until_budget(single_radial):
    cfg = SimConfig.for_spec(single_radial, 0.1, seed=2, max_real_time=0.3)
    rec = run_until((0.1, 0.1), lambda t, p, r: False, cfg, single_radial)
    assert rec.reason == "budget exhausted"
    assert abs(rec.duration - 0.3) <= cfg.dt_U


def test_run_until_level_sets(single_radial):
    eps, delta = 0.05, 0.025
    cfg = SimConfig.for_spec(single_radial, eps, seed=8, max_real_time=100.0)
    trap = single_radial.scene.trap(1)

    def stop(t, p, r):
        s = float(sdist(p.as_array(), trap))
        return s >= eps or s <= -delta

    for path in range(20):
        rec = run_until(np.array([0.6, 0.5]), stop, cfg, single_radial, path=path)
        s = float(sdist(rec.points[-1], trap))
        assert min(abs(s - eps), abs(s + delta)) <= cfg.tol


def test_path_invariants(single_radial):
    cfg = SimConfig.for_spec(single_radial, 0.1, seed=4, max_real_time=2.0)
    rec = run_until((0.62, 0.5), lambda t, p, r: False, cfg, single_radial)
    regs = rec.regions
    # no U -> interior jump without a boundary-band tag in between
    assert not np.any((regs[:-1] == 0) & (regs[1:] > 0))
    tr = trace_extract(rec, 0.01, single_radial.scene)
    assert np.all(np.diff(tr.grid) > 0)
    assert tr.trace_time <= tr.real_time + 1e-12


# -- trace extraction on hand-built paths -------------------------------------------------

def _scene_one():
    return Scene.disks([(0.5, 0.5)], [0.1])


def test_trace_extract_without_traps():
    t = np.linspace(0.0, 1.0, 101)
    pts = np.column_stack([0.1 + 0.1 * t, np.full_like(t, 0.1)])
    rec = PathRecord(t, pts, np.zeros(101, dtype=np.int64), "budget exhausted")
    tr = trace_extract(rec, 0.1, _scene_one())
    assert tr.trace_time == pytest.approx(tr.real_time)
    np.testing.assert_allclose(tr.Y, pts[::10], atol=1e-12)
    assert tr.excursions == []


def test_trace_extract_one_sojourn():
    dt = 0.01
    t = np.arange(0, 301) * dt
    regs = np.zeros(301, dtype=np.int64)
    regs[100] = -1
    regs[101:200] = 1
    regs[200] = -1
    th_in, th_out = 0.3, 2.0
    pts = np.tile([0.2, 0.2], (301, 1)).astype(float)
    pts[100] = 0.5 + 0.1 * e_r(th_in)
    pts[101:200] = [0.5, 0.5]
    pts[200] = 0.5 + 0.1 * e_r(th_out)
    rec = PathRecord(t, pts, regs, "budget exhausted")
    tr = trace_extract(rec, dt, _scene_one())
    sojourn = t[200] - t[101]
    assert abs(tr.trace_time - (tr.real_time - sojourn)) <= 2 * dt
    (ex,) = tr.excursions
    assert ex.trap == 1
    assert ex.capture_angle == pytest.approx(th_in) and ex.release_angle == pytest.approx(th_out)
    # the samples straddling the visit both lie on the trap boundary
    k = int(np.searchsorted(tr.grid, t[100] - 1e-12))
    np.testing.assert_allclose(np.hypot(*(tr.Y[k] - 0.5)), 0.1, atol=1e-12)
    np.testing.assert_allclose(np.hypot(*(tr.Y[k + 1] - 0.5)), 0.1, atol=1e-12)


# -- exit statistics ------------------------------------------------------------------------

def test_radial_exit_uniform(single_radial):
    st = exit_experiment(single_radial, 1, SimConfig.for_spec(single_radial, 0.05, N=10_000, seed=1))
    assert st.censored == 0
    assert chi2_uniform(st.angles, 36) > 0.01
    assert ks_uniform_angle(st.angles) < 0.05


def test_exit_log_mean_trend(single_radial):
    vals = []
    for eps in (0.05, 0.04, 0.03):
        st = exit_experiment(single_radial, 1, SimConfig.for_spec(single_radial, eps, N=4000, seed=2))
        vals.append(eps * st.log_mean)
    assert vals[0] < vals[1] < vals[2] < 0.1


def test_tilted_exit_concentrates(single_tilted):
    st = exit_experiment(single_tilted, 1, SimConfig.for_spec(single_tilted, 0.04, N=4000, seed=3,
                                                              max_real_time=1e4))
    a = np.mod(st.angles, TWO_PI)
    near_pi = np.sum(np.abs(a - math.pi) <= math.pi / 4)
    near_0 = np.sum((a <= math.pi / 4) | (a >= 7 * math.pi / 4))
    assert near_pi >= 3 * near_0


def test_exit_rotation_invariance(single_radial):
    cfg = SimConfig.for_spec(single_radial, 0.05, N=6000, seed=4)
    a = exit_experiment(single_radial, 1, cfg, start=(0.53, 0.5)).angles
    b = exit_experiment(single_radial, 1, cfg, start=(0.5, 0.53)).angles
    assert chi2_homogeneity(a, np.mod(b - math.pi / 2, TWO_PI), 36) > 0.01


def test_exit_feasibility_guard():
    spec = FieldSpec(Scene.disks([(0.5, 0.5)], [0.1]), (TrapProfile.quadratic(1.0, 0.1),))
    with pytest.raises(InfeasibleError, match="infeasible eps"):
        exit_experiment(spec, 1, SimConfig.for_spec(spec, 0.004, max_real_time=100.0))


def test_exit_deterministic(single_radial):
    cfg = SimConfig.for_spec(single_radial, 0.05, N=300, seed=9)
    a = exit_experiment(single_radial, 1, cfg)
    b = exit_experiment(single_radial, 1, cfg)
    assert a.times.tobytes() == b.times.tobytes() and a.angles.tobytes() == b.angles.tobytes()


# -- splitting probabilities ------------------------------------------------------------------

def test_aux1d_small_drift_reaches_one():
    assert aux1d_experiment(1e-3, N=10_000, seed=1).p == pytest.approx(1.0, abs=0.01)


def test_aux1d_guard():
    with pytest.raises(SimError):
        aux1d_experiment(1.0, z0=-1.0)
    with pytest.raises(SimError):
        aux1d_experiment(0.0)


def test_aux1d_short_run_consistent():
    est = aux1d_experiment(2.0, N=20_000, seed=3)
    assert est.within(splitting_limit(2.0), 3.0)


def test_scale_function_oracle_limit():
    _, prof = big_disk(0.5)
    assert escape_probability(prof.g, 0.4, 1e-4, 0.1) == pytest.approx(0.5, abs=2e-3)
    _, prof = big_disk(1.0)
    assert escape_probability(prof.g, 0.4, 1e-4, 0.1) == pytest.approx(1 / 3, abs=2e-3)


def test_splitting_matches_exact_oracle():
    spec, prof = big_disk(0.5)
    eps = 0.02
    r = splitting_experiment(spec, 1, eps, N=20_000, seed=5)
    exact = escape_probability(prof.g, 0.4, eps, 0.1)
    assert abs(r.estimate.p - exact) <= 3 * r.estimate.se
    assert abs(r.estimate.p - 0.5) <= 0.03


def test_splitting_tilted_ordering(single_tilted):
    p0 = splitting_experiment(single_tilted, 1, 0.02, N=5000, theta=0.0, seed=3).estimate
    pp = splitting_experiment(single_tilted, 1, 0.02, N=5000, theta=math.pi, seed=3).estimate
    assert p0.p + 3 * math.hypot(p0.se, pp.se) < pp.p


# -- trace ensembles and the coarse simulator ---------------------------------------------------

def test_trace_ensemble_deterministic_and_complete(single_radial):
    cfg = SimConfig.for_spec(single_radial, 0.05, N=200, seed=1, max_real_time=100.0)
    a = trace_ensemble(single_radial, cfg, x0=(0.1, 0.1), trace_times=[0.05, 0.1])
    b = trace_ensemble(single_radial, cfg, x0=(0.1, 0.1), trace_times=[0.05, 0.1])
    assert a.complete.all()
    assert np.all(a.clocks[:, 1] <= a.clocks[:, 0] + 1e-12)
    assert a.Y.tobytes() == b.Y.tobytes() and a.sequences.tobytes() == b.sequences.tobytes()


def test_trace_ensemble_empty_scene_is_brownian():
    spec = FieldSpec(Scene(()), ())
    cfg = SimConfig.for_spec(spec, 0.3, N=2000, seed=2)
    ens = trace_ensemble(spec, cfg, x0=(0.5, 0.5), trace_times=[0.004, 0.01])
    assert ens.complete.all()
    np.testing.assert_allclose(ens.clocks[:, 1], 0.01, rtol=1e-12)
    for q, t in enumerate((0.004, 0.01)):
        d = ens.Y[:, q, :] - 0.5  # std 0.1 at most: wrapping is negligible
        np.testing.assert_allclose(d.var(axis=0) / t, 1.0, atol=0.1)


def test_coarse_deep_window(ladder_spec):
    s = coarse_metastable_sim(0.0102, 2e-4, ladder_spec, x0=(0.5, 0.5), N=1000, seed=1, delta=0.004)
    assert s.distribution[3] >= 0.95


def test_coarse_guards(ladder_spec):
    with pytest.raises(SimError, match="too close"):
        coarse_metastable_sim(0.0064, 1e-4, ladder_spec, x0=(0.5, 0.5), N=10)
    tie = FieldSpec(Scene.disks([(0.25, 0.5), (0.75, 0.5)], [0.1, 0.1]),
                    (TrapProfile.radial(0.5), TrapProfile.radial(0.5)))
    with pytest.raises(ValueError, match="threshold tie"):
        coarse_metastable_sim(0.005, 1e-4, tie, x0=(0.5, 0.1), N=10)
