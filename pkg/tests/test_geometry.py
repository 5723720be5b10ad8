import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from copse import geometry as geo
from copse.exceptions import DegenerateCloud, InvalidCount, NoSymmetry, RankDeficient, WrongSymmetryKind
from conftest import quat_rotation, rot_x, rot_z

ROT_Z = geo.SymmetrySpec("rotational", np.array([0.0, 0.0, 1.0]))
ROT_Y = geo.SymmetrySpec("rotational", np.array([0.0, 1.0, 0.0]))
REFL_X = geo.SymmetrySpec("reflectional", np.array([1.0, 0.0, 0.0]))
NONE = geo.SymmetrySpec("none")

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


# -- normalization -------------------------------------------------------------------


def test_normalize_two_points():
    P, rec = geo.normalize_cloud([[0, 0, 0], [2, 0, 0]])
    np.testing.assert_array_equal(P, [[-1, 0, 0], [1, 0, 0]])
    np.testing.assert_array_equal(rec.centroid, [1, 0, 0])
    assert rec.scale == 1.0


def test_normalize_fixed_point():
    cloud = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 0.5, 0], [0, -0.5, 0]])
    P, rec = geo.normalize_cloud(cloud)
    np.testing.assert_array_equal(P, cloud)
    np.testing.assert_array_equal(rec.centroid, 0)
    assert rec.scale == 1.0


def test_normalize_random_box(rng):
    cloud = rng.uniform(0, 0.2, (1024, 3)) + [0.1, -0.3, 0.9]
    P, rec = geo.normalize_cloud(cloud)
    assert abs(np.linalg.norm(P, axis=1).max() - 1) <= 1e-9
    assert np.abs(P.mean(axis=0)).max() <= 1e-9
    np.testing.assert_allclose(geo.denormalize_cloud(P, rec), cloud, atol=1e-9, rtol=0)


@pytest.mark.parametrize("cloud", [[[1, 2, 3]], [[1, 2, 3], [1, 2, 3], [1, 2, 3]]])
def test_normalize_degenerate(cloud):
    with pytest.raises(DegenerateCloud):
        geo.normalize_cloud(cloud)


def test_normalize_rejects_non_finite():
    with pytest.raises(ValueError):
        geo.normalize_cloud([[0, 0, 0], [np.nan, 0, 0]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (12, 3), elements=finite))
def test_normalize_round_trip(cloud):
    if np.ptp(cloud, axis=0).max() < 1e-3:
        return
    P, rec = geo.normalize_cloud(cloud)
    np.testing.assert_allclose(P * rec.scale + rec.centroid, cloud, atol=1e-9, rtol=0)


# -- farthest point sampling ---------------------------------------------------------


def brute_force_fps(pts, k):
    """Greedy max-min selection by explicit pairwise loops."""
    chosen = [0]
    while len(chosen) < k:
        best, best_d = None, -1.0
        for i in range(len(pts)):
            d = min(sum((pts[i][c] - pts[j][c]) ** 2 for c in range(3)) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def test_fps_square_corners():
    sq = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    np.testing.assert_array_equal(geo.fps_sample(sq, 2), [[0, 0, 0], [1, 1, 0]])


def test_fps_k_equals_n_and_one(rng):
    pts = rng.normal(size=(20, 3))
    full = geo.fps_sample(pts, 20)
    assert sorted(map(tuple, full)) == sorted(map(tuple, pts))
    np.testing.assert_array_equal(geo.fps_sample(pts, 1), pts[:1])


@pytest.mark.parametrize("k", [0, 21])
def test_fps_invalid_count(rng, k):
    with pytest.raises(InvalidCount):
        geo.fps_indices(rng.normal(size=(20, 3)), k)


def test_fps_matches_brute_force(rng):
    for n in (3, 10, 33, 64):
        pts = rng.normal(size=(n, 3))
        for k in (1, n // 2, n):
            assert geo.fps_indices(pts, k).tolist() == brute_force_fps(pts.tolist(), k)


def test_fps_lowest_index_tie():
    # two points equidistant from the seed: the lower index wins
    pts = np.array([[0, 0, 0], [0, 1, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
    assert geo.fps_indices(pts, 2).tolist() == [0, 1]


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (16, 3), elements=st.integers(-3, 3).map(float)))
def test_fps_brute_force_with_ties(pts):
    assert geo.fps_indices(pts, 6).tolist() == brute_force_fps(pts.tolist(), 6)


# -- resampling ----------------------------------------------------------------------


def test_resample_sizes(rng):
    pts = rng.normal(size=(50, 3))
    down = geo.resample_cloud(pts, 20, rng)
    up = geo.resample_cloud(pts, 120, rng)
    assert down.shape == (20, 3) and up.shape == (120, 3)
    assert len({tuple(p) for p in down}) == 20
    np.testing.assert_array_equal(up[:50], pts)
    np.testing.assert_array_equal(geo.resample_cloud(pts, 50, rng), pts)


# -- Umeyama -------------------------------------------------------------------------


def test_umeyama_identity(rng):
    src = rng.normal(size=(36, 3))
    tf = geo.umeyama_align(src, src)
    np.testing.assert_allclose(tf.R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(tf.t, 0, atol=1e-12)


def test_umeyama_rz90(rng):
    src = rng.normal(size=(36, 3))
    R = rot_z(90)
    tf = geo.umeyama_align(src, src @ R.T)
    assert geo.geodesic_angle(tf.R, R) <= 1e-9


def test_umeyama_recovers_translation(rng):
    src = rng.normal(size=(10, 3))
    R, t = quat_rotation(rng), np.array([0.3, -1.0, 2.0])
    tf = geo.umeyama_align(src, src @ R.T + t)
    np.testing.assert_allclose(tf.t, t, atol=1e-12)


def test_umeyama_exact_random(rng):
    worst = 0.0
    for _ in range(200):
        src = rng.normal(size=(rng.integers(3, 40), 3))
        R = quat_rotation(rng)
        worst = max(worst, geo.geodesic_angle(geo.umeyama_align(src, src @ R.T).R, R))
    assert worst <= 1e-9


def test_umeyama_planar_source_proper_rotation(rng):
    # planar sources make the raw SVD solution a reflection half the time
    src = np.c_[rng.normal(size=(20, 2)), np.zeros(20)]
    for _ in range(50):
        R = quat_rotation(rng)
        tf = geo.umeyama_align(src, src @ R.T)
        assert np.linalg.det(tf.R) == pytest.approx(1.0, abs=1e-12)
        assert geo.geodesic_angle(tf.R, R) <= 1e-9


def test_umeyama_least_squares_beats_perturbations(rng):
    src = rng.normal(size=(36, 3))
    tgt = src @ quat_rotation(rng).T + rng.normal(0, 0.05, (36, 3))
    tf = geo.umeyama_align(src, tgt)

    def cost(R, t):
        return ((tgt - (src @ R.T + t)) ** 2).sum()

    best = cost(tf.R, tf.t)
    for _ in range(100):
        dR = geo.axis_angle_matrix(rng.normal(size=3), rng.uniform(1e-4, 1e-2))
        assert cost(dR @ tf.R, tf.t + rng.normal(0, 1e-3, 3)) >= best


def test_umeyama_collinear_raises():
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(RankDeficient):
        geo.umeyama_align(line, line)


def test_umeyama_shape_mismatch(rng):
    with pytest.raises(ValueError):
        geo.umeyama_align(rng.normal(size=(5, 3)), rng.normal(size=(6, 3)))


# -- rotations and errors ------------------------------------------------------------


def test_axis_angle_matches_hand_rotations():
    np.testing.assert_allclose(geo.axis_angle_matrix([0, 0, 1], np.radians(30)), rot_z(30), atol=1e-15)
    np.testing.assert_allclose(geo.axis_angle_matrix([2, 0, 0], np.radians(-70)), rot_x(-70), atol=1e-15)


def test_geodesic_angle_small_and_large():
    for deg in (1e-7, 0.5, 10, 90, 179.9, 180):
        assert np.degrees(geo.geodesic_angle(np.eye(3), rot_x(deg))) == pytest.approx(deg, abs=1e-9)


def test_rotation_error_examples(rng):
    Ra = quat_rotation(rng)
    assert geo.rotation_error(Ra, Ra) == pytest.approx(0.0, abs=1e-6)
    assert geo.rotation_error(Ra, Ra @ rot_z(30), ROT_Z) == pytest.approx(0.0, abs=1e-6)
    assert geo.rotation_error(Ra, Ra @ rot_x(10), NONE) == pytest.approx(10.0, abs=1e-6)
    assert geo.rotation_error(Ra, Ra @ rot_x(10), REFL_X) == pytest.approx(10.0, abs=1e-6)


def test_rotation_error_spin_invariance(rng):
    for _ in range(200):
        Ra, Rb = quat_rotation(rng), quat_rotation(rng)
        spin = geo.axis_angle_matrix(ROT_Y.direction, rng.uniform(0, 2 * np.pi))
        base = geo.rotation_error(Ra, Rb, ROT_Y)
        assert abs(geo.rotation_error(Ra @ spin, Rb, ROT_Y) - base) <= 1e-6
        assert abs(geo.rotation_error(Ra, Rb @ spin, ROT_Y) - base) <= 1e-6


def test_random_rotation_is_proper(rng):
    for _ in range(20):
        R = geo.random_rotation(rng)
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


def test_rigid_transform_rejects_reflection():
    with pytest.raises(ValueError):
        geo.RigidTransform(np.diag([1.0, 1.0, -1.0]))


def test_rigid_transform_compose_inverse(rng):
    a = geo.RigidTransform(quat_rotation(rng), rng.normal(size=3))
    b = geo.RigidTransform(quat_rotation(rng), rng.normal(size=3))
    pts = rng.normal(size=(7, 3))
    np.testing.assert_allclose(a.compose(b).apply(pts), a.apply(b.apply(pts)), atol=1e-12)
    np.testing.assert_allclose(a.inverse_apply(a.apply(pts)), pts, atol=1e-12)
    np.testing.assert_allclose(a.as_matrix() @ np.r_[pts[0], 1], np.r_[a.apply(pts[0]), 1], atol=1e-12)


# -- symmetry ------------------------------------------------------------------------


def test_reflection_examples():
    np.testing.assert_array_equal(geo.reflect_across_plane([[1, 2, 3]], REFL_X), [[-1, 2, 3]])
    on_plane = np.array([[0.0, 4, -2], [0.0, 1, 1]])
    np.testing.assert_array_equal(geo.reflect_across_plane(on_plane, REFL_X), on_plane)


def test_half_turn_examples():
    np.testing.assert_array_equal(geo.rotate_about_axis([[1, 0, 0]], ROT_Z, np.pi), [[-1, 0, 0]])
    on_axis = np.array([[0.0, 0, 3], [0, 0, -1]])
    for angle in (0.3, np.pi, 5.0):
        np.testing.assert_allclose(geo.rotate_about_axis(on_axis, ROT_Z, angle), on_axis, atol=1e-15)


def test_rotate_matches_rodrigues(rng):
    pts = rng.normal(size=(10, 3))
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    spec = geo.SymmetrySpec("rotational", axis)
    th = 0.7
    expected = (pts * np.cos(th) + np.cross(axis, pts) * np.sin(th)
                + np.outer(pts @ axis, axis) * (1 - np.cos(th)))
    np.testing.assert_allclose(geo.rotate_about_axis(pts, spec, th), expected, atol=1e-14)


@pytest.mark.parametrize("spec", [REFL_X, ROT_Y, geo.SymmetrySpec("reflectional", np.array([0.6, 0.0, 0.8]))])
def test_symmetry_involution_and_isometry(rng, spec):
    pts = rng.normal(size=(64, 3))
    once = geo.make_symmetric_gt(pts, spec)
    np.testing.assert_allclose(geo.make_symmetric_gt(once, spec), pts, atol=1e-12, rtol=0)
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d1 = np.linalg.norm(once[:, None] - once[None], axis=-1)
    np.testing.assert_allclose(d1, d0, atol=1e-12)


def test_axis_aligned_symmetry_exact(rng):
    pts = rng.normal(size=(64, 3))
    np.testing.assert_array_equal(geo.make_symmetric_gt(geo.make_symmetric_gt(pts, REFL_X), REFL_X), pts)
    np.testing.assert_array_equal(geo.make_symmetric_gt(geo.make_symmetric_gt(pts, ROT_Y), ROT_Y), pts)


def test_half_cylinder_completes(rng):
    az = rng.uniform(0, np.pi, 2000)
    z = rng.uniform(-1, 1, 2000)
    half = np.c_[np.cos(az), np.sin(az), z]
    other = geo.make_symmetric_gt(half, ROT_Z)
    assert np.all(other[:, 1] <= 1e-12)
    union_az = np.arctan2(np.r_[half, other][:, 1], np.r_[half, other][:, 0])
    counts, _ = np.histogram(union_az, bins=36, range=(-np.pi, np.pi))
    assert counts.min() > 0


def test_symmetry_kind_errors():
    with pytest.raises(WrongSymmetryKind):
        geo.reflect_across_plane([[1, 0, 0]], ROT_Z)
    with pytest.raises(WrongSymmetryKind):
        geo.rotate_about_axis([[1, 0, 0]], REFL_X, 1.0)
    with pytest.raises(NoSymmetry):
        geo.make_symmetric_gt([[1, 0, 0]], NONE)


def test_symmetry_spec_requires_unit_direction():
    with pytest.raises(ValueError):
        geo.SymmetrySpec("reflectional", np.array([1.0, 1.0, 0.0]))
    spec = geo.SymmetrySpec.from_dict(REFL_X.to_dict())
    assert spec == REFL_X and spec != ROT_Y


# -- oriented boxes ------------------------------------------------------------------


def test_box_corners_identity():
    corners = geo.oriented_box(geo.RigidTransform.identity(), [2, 2, 2])
    np.testing.assert_array_equal(corners, list(itertools.product((-1, 1), repeat=3)))


def test_box_corners_translated():
    corners = geo.oriented_box(geo.RigidTransform(np.eye(3), [1, 0, 0]), [2, 2, 2])
    expected = np.array(list(itertools.product((-1, 1), repeat=3))) + [1, 0, 0]
    np.testing.assert_array_equal(corners, expected)


def test_box_rotated_extents():
    corners = geo.oriented_box(geo.RigidTransform(rot_z(90)), [2, 4, 6])
    np.testing.assert_allclose(np.ptp(corners, axis=0), [4, 2, 6], atol=1e-12)


def test_box_central_symmetry(rng):
    pose = geo.RigidTransform(quat_rotation(rng), rng.normal(size=3))
    c = geo.oriented_box(pose, [0.1, 0.2, 0.3])
    mirrored = 2 * pose.t - c
    # corner i and corner 7 - i are opposite
    np.testing.assert_allclose(mirrored, c[::-1], atol=1e-12)


def test_box_contains(rng):
    box = geo.OrientedBox(geo.RigidTransform(quat_rotation(rng), [1, 2, 3]), np.array([0.2, 0.4, 0.6]))
    assert box.contains(box.pose.t[None])[0]
    assert not box.contains((box.pose.t + [1, 0, 0])[None])[0]
    assert box.volume == pytest.approx(0.048)


def test_box_requires_positive_size():
    with pytest.raises(ValueError):
        geo.OrientedBox(geo.RigidTransform.identity(), np.array([1.0, 0.0, 1.0]))
