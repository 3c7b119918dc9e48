"""Geometry core: projections, rigid transforms, tangent maps, sampling."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointloc.errors import NearPiAmbiguity, NonPositiveDepth, OutOfBounds
from pointloc.geometry import (
    Camera,
    Pose,
    backproject,
    bilinear_sample,
    bilinear_sample_many,
    project,
    project_jacobian,
    ray_through_pixel,
    se3_exp,
    se3_log,
    so3_exp,
)
from pointloc.rng import Stream


CAM = Camera(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=101, height=101)


def random_pose(stream):
    w = stream.normal(3)
    n = np.linalg.norm(w)
    if n > 2.8:
        w *= 2.8 / n
    return se3_exp(np.concatenate([w, stream.normal(3)]))


# -- projection ----------------------------------------------------------------

def test_project_principal_axis():
    assert np.allclose(project(CAM, np.array([0.0, 0.0, 1.0])), [50.0, 50.0])


def test_project_analytic_offset():
    assert np.allclose(project(CAM, np.array([0.5, 0.0, 1.0])), [100.0, 50.0])


def test_project_rejects_nonpositive_depth():
    with pytest.raises(NonPositiveDepth):
        project(CAM, np.array([0.0, 0.0, 0.0]))
    with pytest.raises(NonPositiveDepth):
        project(CAM, np.array([0.0, 0.0, -1.0]))


def test_project_matches_extended_precision_oracle():
    stream = Stream(11, "proj")
    for _ in range(200):
        fx, fy = stream.uniform(2, 50, 500)
        w = h = 200
        cx, cy = stream.uniform(2, 10, 190)
        cam = Camera(fx, fy, cx, cy, w, h)
        p = np.array([stream.uniform(low=-2, high=2),
                      stream.uniform(low=-2, high=2),
                      stream.uniform(low=0.1, high=5)])
        got = project(cam, p)
        # independent re-derivation in 80-bit floats
        pl = p.astype(np.longdouble)
        want = np.array([np.longdouble(fx) * pl[0] / pl[2] + np.longdouble(cx),
                         np.longdouble(fy) * pl[1] / pl[2] + np.longdouble(cy)])
        assert np.all(np.abs(got - want.astype(float)) < 1e-9)


def test_backproject_center_and_analytic():
    assert np.allclose(backproject(CAM, np.array([50.0, 50.0]), 2.0), [0, 0, 2])
    assert np.allclose(backproject(CAM, np.array([100.0, 50.0]), 1.0), [0.5, 0, 1])
    with pytest.raises(NonPositiveDepth):
        backproject(CAM, np.array([50.0, 50.0]), 0.0)


def test_project_backproject_roundtrip():
    stream = Stream(7, "roundtrip")
    px = stream.uniform((10_000, 2), 0, 100)
    depth = stream.uniform(10_000, 0.05, 10.0)
    pts = backproject(CAM, px, depth)
    assert np.allclose(pts[:, 2], depth)
    back = project(CAM, pts)
    assert np.max(np.abs(back - px)) < 1e-9


def test_project_jacobian_matches_finite_differences():
    stream = Stream(3, "projjac")
    for _ in range(20):
        p = np.array([stream.uniform(low=-1, high=1),
                      stream.uniform(low=-1, high=1),
                      stream.uniform(low=0.5, high=4)])
        J = project_jacobian(CAM, p)
        eps = 1e-6
        for a in range(3):
            dp = np.zeros(3)
            dp[a] = eps
            fd = (project(CAM, p + dp) - project(CAM, p - dp)) / (2 * eps)
            assert np.allclose(J[:, a], fd, atol=1e-5)


# -- rigid transforms ----------------------------------------------------------

def test_transform_identity_translation_rotation():
    p = np.array([1.0, 2.0, 3.0])
    assert np.allclose(Pose.identity().apply(p), p)
    t = Pose(np.eye(3), np.array([1.0, 0, 0]))
    assert np.allclose(t.apply(np.zeros(3)), [1, 0, 0])
    rz = se3_exp(np.array([0, 0, np.pi / 2, 0, 0, 0]))
    assert np.allclose(rz.apply(np.array([1.0, 0, 0])), [0, 1, 0], atol=1e-12)


def test_pose_invariants_and_inverse():
    stream = Stream(5, "poses")
    for _ in range(50):
        pose = random_pose(stream)
        R = pose.rotation
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(R) - 1.0) < 1e-9
        ident = pose.compose(pose.inverse())
        assert np.allclose(ident.rotation, np.eye(3), atol=1e-9)
        assert np.allclose(ident.translation, 0, atol=1e-9)


def test_pose_composition_associative():
    stream = Stream(6, "assoc")
    for _ in range(25):
        a, b, c = (random_pose(stream) for _ in range(3))
        ab_c = a.compose(b).compose(c)
        a_bc = a.compose(b.compose(c))
        assert np.allclose(ab_c.rotation, a_bc.rotation, atol=1e-9)
        assert np.allclose(ab_c.translation, a_bc.translation, atol=1e-9)


def test_quaternion_roundtrip():
    stream = Stream(8, "quat")
    for _ in range(100):
        pose = random_pose(stream)
        q = pose.to_quaternion()
        back = Pose.from_quaternion(q, pose.translation)
        assert np.allclose(back.rotation, pose.rotation, atol=1e-12)


# -- se3 exp/log ---------------------------------------------------------------

def test_se3_exp_zero_is_identity():
    pose = se3_exp(np.zeros(6))
    assert np.allclose(pose.rotation, np.eye(3))
    assert np.allclose(pose.translation, 0)


def test_se3_exp_quarter_turn():
    pose = se3_exp(np.array([0, 0, np.pi / 2, 0, 0, 0]))
    want = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    assert np.allclose(pose.rotation, want, atol=1e-12)


def test_se3_log_exp_roundtrip():
    stream = Stream(9, "se3")
    for _ in range(1000):
        w = stream.normal(3)
        n = np.linalg.norm(w)
        if n >= 3.0:
            w *= 2.99 / n
        xi = np.concatenate([w, stream.normal(3) * 2.0])
        back = se3_log(se3_exp(xi))
        assert np.allclose(back, xi, atol=1e-9)


def test_se3_exp_log_roundtrip_on_poses():
    stream = Stream(10, "se3b")
    for _ in range(200):
        pose = random_pose(stream)
        again = se3_exp(se3_log(pose))
        assert np.allclose(again.rotation, pose.rotation, atol=1e-9)
        assert np.allclose(again.translation, pose.translation, atol=1e-9)


def test_se3_log_near_pi_raises():
    R = so3_exp(np.array([np.pi - 1e-9, 0, 0]))
    with pytest.raises(NearPiAmbiguity):
        se3_log(Pose(R, np.zeros(3)))


# -- bilinear sampling ---------------------------------------------------------

def test_bilinear_integer_pixels_exact():
    img = np.arange(12.0).reshape(3, 4)
    for v in range(3):
        for u in range(4):
            assert bilinear_sample(img, (u, v)) == img[v, u]


def test_bilinear_midpoint():
    img = np.array([[0.0, 1.0]])
    assert bilinear_sample(img, (0.5, 0.0)) == pytest.approx(0.5)


def test_bilinear_constant_image():
    img = np.full((5, 5, 3), 0.7)
    stream = Stream(12, "bil")
    for _ in range(50):
        u, v = stream.uniform(2, 0, 4)
        assert np.allclose(bilinear_sample(img, (u, v)), 0.7)


def test_bilinear_out_of_bounds_raises():
    img = np.zeros((4, 4))
    with pytest.raises(OutOfBounds):
        bilinear_sample(img, (-0.01, 0.0))
    with pytest.raises(OutOfBounds):
        bilinear_sample(img, (3.5, 3.2))


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 2.999), st.floats(0, 1.999))
def test_bilinear_linear_along_axes(u, v):
    # a plane image is reproduced exactly by bilinear interpolation
    uu, vv = np.meshgrid(np.arange(4.0), np.arange(3.0))
    img = 2.0 * uu - 0.5 * vv + 1.0
    assert bilinear_sample(img, (u, v)) == pytest.approx(2.0 * u - 0.5 * v + 1.0,
                                                         abs=1e-12)


def test_bilinear_many_masks_out_of_bounds():
    img = np.ones((4, 4))
    vals, valid = bilinear_sample_many(img, np.array([[1.0, 1.0], [9.0, 0.0]]))
    assert valid.tolist() == [True, False]
    assert vals[0] == 1.0 and vals[1] == 0.0


# -- rays ----------------------------------------------------------------------

def test_ray_through_pixel_roundtrip():
    stream = Stream(13, "rays")
    for _ in range(100):
        pose = random_pose(stream)  # world-to-camera
        px = stream.uniform(2, 0, 100)
        ray = ray_through_pixel(CAM, pose.inverse(), px)
        assert np.allclose(ray.origin, pose.camera_center(), atol=1e-12)
        depth = stream.uniform(low=0.2, high=8.0)
        # walk the ray out and reproject
        world = ray.at(depth)
        cam_pt = pose.apply(world)
        assert np.max(np.abs(project(CAM, cam_pt) - px)) < 1e-6
