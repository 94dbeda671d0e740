import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from corrfield.geometry import (CameraIntrinsics, Pixel, Pose, Ray, camera_directions,
                                generate_ray, generate_rays, look_at_pose, project,
                                ray_z_scale, reproject, reproject_many, unproject)

INTR = CameraIntrinsics(fx=120.0, fy=115.0, cx=31.5, cy=31.5, width=64, height=64)


def random_rotation(seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_pose(seed):
    rng = np.random.default_rng(seed)
    return Pose(rotation=random_rotation(seed), translation=rng.uniform(-2, 2, 3))


# --- intrinsics and pixel plumbing ---


def test_intrinsics_matrix_and_contains():
    k = INTR.matrix
    assert k[0, 0] == 120.0 and k[1, 1] == 115.0
    assert k[0, 2] == 31.5 and k[1, 2] == 31.5 and k[2, 2] == 1.0
    assert INTR.contains(0.0, 0.0) and INTR.contains(63.49, 63.49)
    assert not INTR.contains(-0.51, 10.0) and not INTR.contains(10.0, 63.51)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=0.0, fy=1.0, cx=0, cy=0, width=4, height=4)
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=1.0, fy=1.0, cx=0, cy=0, width=0, height=4)


def test_pixel_distance_and_rounding():
    assert Pixel(3.0, 4.0).distance(Pixel(0.0, 0.0)) == 5.0
    assert Pixel(2.49, 3.51).rounded() == (2, 4)


@given(st.floats(0, 63), st.floats(0, 63), st.floats(0.1, 50.0))
@settings(max_examples=60, deadline=None)
def test_project_unproject_roundtrip(u, v, depth):
    p = unproject(INTR, Pixel(u, v), depth)
    assert abs(p[2] - depth) < 1e-12
    px, ok = project(INTR, p)
    assert ok
    assert px.distance(Pixel(u, v)) < 1e-9


def test_project_behind_camera_invalid():
    _, ok = project(INTR, np.array([0.0, 0.0, -1.0]))
    assert not ok


# --- poses ---


def test_pose_rejects_non_orthonormal():
    m = np.eye(4)
    m[0, 0] = 2.0
    with pytest.raises(ValueError):
        Pose.from_matrix(m)
    m = np.eye(4)
    m[:3, :3] = -np.eye(3)  # det -1 reflection
    with pytest.raises(ValueError):
        Pose.from_matrix(m)


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_pose_inverse_composes_to_identity(seed):
    p = random_pose(seed)
    rng = np.random.default_rng(seed + 1)
    pts = rng.uniform(-3, 3, (5, 3))
    back = p.inverse().transform(p.transform(pts))
    assert np.allclose(back, pts, atol=1e-10)
    ident = p.compose(p.inverse()).as_matrix()
    assert np.allclose(ident, np.eye(4), atol=1e-10)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_pose_compose_matches_matrix_product(seed):
    a, b = random_pose(seed), random_pose(seed + 7)
    assert np.allclose(a.compose(b).as_matrix(), a.as_matrix() @ b.as_matrix(), atol=1e-12)


def test_pose_matrix_roundtrip():
    p = random_pose(3)
    q = Pose.from_matrix(p.as_matrix())
    assert np.allclose(p.as_matrix(), q.as_matrix())


def test_pose_center_is_translation():
    p = random_pose(9)
    # camera-to-world: the camera center in world coordinates is the translation
    assert np.allclose(p.center, p.translation)
    assert np.allclose(p.inverse().transform(p.center), np.zeros(3), atol=1e-12)


def test_look_at_pose_points_z_at_target():
    eye, target = np.array([1.0, -2.0, 0.5]), np.array([0.0, 0.0, 3.0])
    p = look_at_pose(eye, target)
    d = (target - eye) / np.linalg.norm(target - eye)
    assert np.allclose(p.rotate(np.array([0.0, 0.0, 1.0])), d, atol=1e-12)
    assert np.allclose(p.center, eye)


# --- rays ---


def test_ray_requires_unit_direction():
    with pytest.raises(ValueError):
        Ray(origin=np.zeros(3), direction=np.array([0.0, 0.0, 2.0]),
            t_near=0.1, t_far=1.0)


def test_generate_rays_pixel_center_convention():
    pose = Pose.identity()
    origin, dirs = generate_rays(INTR, pose, np.array([INTR.cx]), np.array([INTR.cy]))
    # the principal point's ray is the optical axis
    assert np.allclose(dirs[0], [0.0, 0.0, 1.0], atol=1e-12)
    assert np.allclose(origin, np.zeros(3))
    norms = np.linalg.norm(dirs, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-12)


def test_generate_ray_matches_batch():
    pose = random_pose(4)
    r = generate_ray(INTR, pose, Pixel(10.0, 20.0), t_near=0.5, t_far=2.0)
    origin, dirs = generate_rays(INTR, pose, np.array([10.0]), np.array([20.0]))
    assert np.allclose(r.origin, origin) and np.allclose(r.direction, dirs[0])
    assert r.t_near == 0.5 and r.t_far == 2.0


@given(st.floats(0, 63), st.floats(0, 63))
@settings(max_examples=40, deadline=None)
def test_ray_z_scale_is_unit_dir_z(u, v):
    d = camera_directions(INTR, np.array([u]), np.array([v]))[0]
    assert abs(ray_z_scale(INTR, u, v) - d[2] / np.linalg.norm(d)) < 1e-12


def test_ray_point_at_depth_scale_consistency():
    # walking t along the unit ray gives camera z = t * z_scale
    pose = Pose.identity()
    r = generate_ray(INTR, pose, Pixel(5.0, 60.0), 0.1, 10.0)
    t = 3.7
    z = r.point_at(t)[2]
    assert abs(z - t * ray_z_scale(INTR, 5.0, 60.0)) < 1e-12


# --- reprojection ---


def test_reproject_stereo_disparity():
    # rectified pair, baseline b along +x: disparity = fx * b / z
    b, z = 0.3, 2.0
    src = Pose.identity()
    tgt = Pose(rotation=np.eye(3), translation=np.array([b, 0.0, 0.0]))
    px = Pixel(40.0, 22.0)
    out, ok = reproject(px, z, INTR, src, tgt)
    assert ok
    assert abs((px.u - out.u) - INTR.fx * b / z) < 1e-10
    assert abs(out.v - px.v) < 1e-10


@given(st.integers(0, 5_000), st.floats(5, 59), st.floats(5, 59), st.floats(1.0, 6.0))
@settings(max_examples=60, deadline=None)
def test_reproject_roundtrip(seed, u, v, depth):
    src, tgt = random_pose(seed), random_pose(seed + 13)
    fwd, ok = reproject(Pixel(u, v), depth, INTR, src, tgt)
    if not ok:
        return  # point behind the target camera; nothing to invert
    world = src.transform(unproject(INTR, Pixel(u, v), depth))
    z_tgt = float(tgt.inverse().transform(world)[2])
    back, ok2 = reproject(fwd, z_tgt, INTR, tgt, src)
    assert ok2
    assert back.distance(Pixel(u, v)) < 1e-6


def test_reproject_many_matches_scalar():
    src, tgt = random_pose(21), random_pose(22)
    uv = np.array([[3.0, 4.0], [50.0, 12.0], [31.5, 31.5]])
    depths = np.array([1.5, 2.5, 4.0])
    got, valid = reproject_many(uv, depths, INTR, src, tgt)
    for i in range(3):
        px, ok = reproject(Pixel(*uv[i]), depths[i], INTR, src, tgt)
        assert ok == bool(valid[i])
        if ok:
            assert math.hypot(px.u - got[i, 0], px.v - got[i, 1]) < 1e-12


def test_identity_reprojection_is_identity():
    p = random_pose(33)
    px = Pixel(17.0, 42.0)
    out, ok = reproject(px, 3.0, INTR, p, p)
    assert ok and out.distance(px) < 1e-10
