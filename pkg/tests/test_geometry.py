import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trapflow.geometry import (DiskTrap, GeometryError, Region, Scene, TorusPoint, boundary_point,
                               boundary_samples, classify, e_r, load_scene, min_image_delta,
                               nearest_trap, normal_into_trap, polar, save_scene, sdist, torus_dist,
                               wrap)

coord = st.floats(-5.0, 5.0, allow_nan=False)
unit = st.floats(0.0, 1.0, allow_nan=False, exclude_max=True)
points = st.tuples(unit, unit)


def test_min_image_examples():
    np.testing.assert_allclose(min_image_delta((0.1, 0.1), (0.9, 0.1)), [-0.2, 0.0], atol=1e-15)
    np.testing.assert_array_equal(min_image_delta((0.3, 0.7), (0.3, 0.7)), [0.0, 0.0])
    np.testing.assert_array_equal(min_image_delta((0.0, 0.0), (0.5, 0.5)), [-0.5, -0.5])


def test_sdist_examples():
    t = DiskTrap(1, (0.5, 0.5), 0.1)
    assert sdist((0.5, 0.5), t) == pytest.approx(-0.1, abs=1e-15)
    for th in np.linspace(0, 2 * math.pi, 17):
        p = np.array([0.5, 0.5]) + 0.11 * e_r(th)
        assert sdist(p, t) == pytest.approx(0.01, abs=1e-12)


def test_sdist_matches_boundary_sampling():
    # the sampled oracle overestimates by ~ spacing^2 / (8 d); keep d >= 0.01 where that is < 1e-4
    rng = np.random.default_rng(4)
    checked = 0
    for t in (DiskTrap(1, (0.05, 0.95), 0.12), DiskTrap(1, (0.5, 0.5), 0.3)):
        bnd = boundary_samples(t, 720)
        for p in rng.random((300, 2)):
            brute = float(np.min(torus_dist(p, bnd)))
            if brute >= 0.01:
                checked += 1
                assert abs(abs(float(sdist(p, t))) - brute) <= 1e-4
            assert abs(float(sdist(p, t))) <= brute + 1e-12
    assert checked > 500


def test_boundary_point_and_normal():
    t = DiskTrap(1, (0.5, 0.5), 0.1)
    np.testing.assert_allclose(boundary_point(t, 0.0), [0.6, 0.5], atol=1e-15)
    np.testing.assert_allclose(normal_into_trap(t, 0.0), [-1.0, 0.0], atol=1e-15)
    th = np.linspace(0, 2 * math.pi, 50)
    np.testing.assert_allclose(np.sum(normal_into_trap(t, th) * e_r(th), axis=-1), -1.0, atol=1e-15)
    np.testing.assert_allclose(sdist(boundary_point(t, th), t), 0.0, atol=1e-12)


def test_boundary_point_wraps():
    t = DiskTrap(1, (0.98, 0.02), 0.05)
    p = boundary_point(t, 0.0)
    assert 0.0 <= p[0] < 1.0 and p[0] == pytest.approx(0.03)


def test_classify_examples(three_trap_scene):
    s = three_trap_scene
    assert classify((0.5, 0.02), s) == Region("U")
    assert classify((0.75, 0.3), s) == Region("trap", 2)
    tol = 1e-3
    p = np.array([0.25, 0.3]) + (0.08 + tol / 2) * e_r(1.0)
    assert classify(p, s, tol) == Region("boundary", 1)
    assert classify(p, s, 0.0) == Region("U")
    with pytest.raises(GeometryError):
        classify(p, s, -1.0)


def test_region_codes_roundtrip():
    for r in (Region("U"), Region("trap", 3), Region("boundary", 2)):
        assert Region.from_code(r.code) == r


def test_scene_validation():
    with pytest.raises(GeometryError, match="overlap"):
        Scene.disks([(0.1, 0.5), (0.9, 0.5)], [0.15, 0.1])
    with pytest.raises(GeometryError):
        DiskTrap(1, (0.5, 0.5), 0.5)
    with pytest.raises(GeometryError):
        Scene((DiskTrap(2, (0.5, 0.5), 0.1),))
    with pytest.raises(GeometryError, match="malformed"):
        Scene.from_dict({"traps": [{"id": 1}]})


def test_scene_json_roundtrip(tmp_path, three_trap_scene):
    path = tmp_path / "scene.json"
    save_scene(three_trap_scene, path)
    again = load_scene(path)
    assert again == three_trap_scene
    assert again.digest() == three_trap_scene.digest()


def test_nearest_trap_empty_scene():
    assert nearest_trap((0.3, 0.3), Scene(())) == (0, math.inf)
    assert classify((0.3, 0.3), Scene(())) == Region("U")


def test_disjointness_witness(three_trap_scene):
    traps = three_trap_scene.traps
    for a in traps:
        ba = boundary_samples(a, 720)
        for b in traps:
            if a.id != b.id:
                bb = boundary_samples(b, 720)
                assert min(float(np.min(torus_dist(p, bb))) for p in ba[::8]) > 0


@given(coord)
def test_wrap_idempotent_and_in_range(x):
    w = float(wrap(x))
    assert 0.0 <= w < 1.0
    assert float(wrap(w)) == w


@given(coord, coord)
def test_torus_point_canonical(x, y):
    p = TorusPoint(x, y)
    assert 0.0 <= p.x < 1.0 and 0.0 <= p.y < 1.0


@given(points, points)
def test_min_image_half_open(a, b):
    d = min_image_delta(a, b)
    assert np.all(d >= -0.5) and np.all(d < 0.5)


@given(points, points)
def test_metric_symmetry(a, b):
    assert float(torus_dist(a, b)) == pytest.approx(float(torus_dist(b, a)), abs=1e-15)


@given(points, points, points)
def test_triangle_inequality(a, b, c):
    assert float(torus_dist(a, c)) <= float(torus_dist(a, b)) + float(torus_dist(b, c)) + 1e-12


@given(points, points, st.floats(0.01, 0.45))
@settings(max_examples=50)
def test_sdist_lipschitz_on_segments(a, b, r):
    t = DiskTrap(1, (0.5, 0.5), r)
    s = np.linspace(0.0, 1.0, 41)[:, None]
    seg = np.asarray(a) + s * min_image_delta(a, b)
    vals = sdist(seg, t)
    step = float(torus_dist(a, b)) / 40
    assert np.all(np.abs(np.diff(vals)) <= step + 1e-12)


@given(st.floats(0.0, 2 * math.pi, exclude_max=True), st.floats(0.02, 0.4))
def test_polar_inverts_boundary_point(th, r):
    t = DiskTrap(1, (0.37, 0.61), r)
    rr, tt = polar(boundary_point(t, th), t)
    assert float(rr) == pytest.approx(r, abs=1e-12)
    d = (float(tt) - th) % (2 * math.pi)
    assert min(d, 2 * math.pi - d) < 1e-9


@given(st.tuples(unit, unit))
@settings(max_examples=30)
def test_translation_preserves_classification(shift):
    scene = Scene.disks([(0.25, 0.3), (0.75, 0.3)], [0.1, 0.08])
    moved = scene.translated(shift)
    rng = np.random.default_rng(0)
    for p in rng.random((20, 2)):
        q = wrap(p + np.asarray(shift))
        assert classify(q, moved, 1e-3) == classify(p, scene, 1e-3)
