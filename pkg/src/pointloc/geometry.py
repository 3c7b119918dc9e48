"""Rigid transforms, pinhole projection, rays and image sampling.

Conventions, asserted here and relied on everywhere else:

* `Pose` stores a world-to-camera map: ``x_cam = R @ x_world + t``.
  Camera-to-world is always an explicit ``pose.inverse()``.
* Rotations are 3x3 matrices in memory; files carry unit quaternions
  (w, x, y, z).
* Image origin is the top-left corner and pixel centers sit on integer
  coordinates, so a WxH image spans [0, W-1] x [0, H-1] in pixel space.
* Tangent vectors are 6-dim, rotational part first: (wx, wy, wz, vx, vy, vz).

All types are immutable value objects and all operations are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NearPiAmbiguity, NonPositiveDepth, OutOfBounds

_DEPTH_EPS = 1e-12


def skew(v):
    """Cross-product matrix: skew(v) @ u == cross(v, u)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w):
    """Rodrigues rotation from an axis-angle 3-vector."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        # second-order series; exact enough below the switch point
        return np.eye(3) + K + 0.5 * (K @ K)
    A = np.sin(theta) / theta
    B = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + A * K + B * (K @ K)


def so3_log(R):
    """Axis-angle 3-vector of a rotation matrix; angle must stay below pi."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta >= np.pi - 1e-6:
        raise NearPiAmbiguity(f"rotation angle {theta:.9f} too close to pi")
    vee = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return vee * (1.0 + theta**2 / 6.0)
    return vee * (theta / np.sin(theta))


def _so3_left_jacobian(w):
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    A = (1.0 - np.cos(theta)) / theta**2
    B = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + A * K + B * (K @ K)


def _so3_left_jacobian_inv(w):
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    half = 0.5 * theta
    cot = half / np.tan(half)
    return np.eye(3) - 0.5 * K + (1.0 - cot) / theta**2 * (K @ K)


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform: x_cam = rotation @ x_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-7):
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ValueError("rotation has negative determinant")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self ∘ other)(x) = self(other(x))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def apply(self, points):
        """Transform one point (3,) or many (N, 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def camera_center(self):
        """Camera origin expressed in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_quaternion(self):
        """Unit quaternion (w, x, y, z) with non-negative w."""
        R = self.rotation
        t = np.trace(R)
        if t > 0:
            s = np.sqrt(t + 1.0) * 2.0
            q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                          (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
        else:
            i = int(np.argmax(np.diag(R)))
            j, k = (i + 1) % 3, (i + 2) % 3
            s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
            q = np.empty(4)
            q[0] = (R[k, j] - R[j, k]) / s
            q[1 + i] = 0.25 * s
            q[1 + j] = (R[j, i] + R[i, j]) / s
            q[1 + k] = (R[k, i] + R[i, k]) / s
        q /= np.linalg.norm(q)
        if q[0] < 0:
            q = -q
        return q

    @staticmethod
    def from_quaternion(q, t) -> "Pose":
        q = np.asarray(q, dtype=float)
        q = q / np.linalg.norm(q)
        w, x, y, z = q
        R = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])
        return Pose(R, np.asarray(t, dtype=float))


def se3_exp(tangent) -> Pose:
    """Exponential map from a (rot, trans) 6-vector to a Pose."""
    xi = np.asarray(tangent, dtype=float).reshape(6)
    w, v = xi[:3], xi[3:]
    R = so3_exp(w)
    t = _so3_left_jacobian(w) @ v
    return Pose(R, t)


def se3_log(pose: Pose):
    """Inverse of se3_exp; raises NearPiAmbiguity at rotation angles >= pi - 1e-6."""
    w = so3_log(pose.rotation)
    v = _so3_left_jacobian_inv(w) @ pose.translation
    return np.concatenate([w, v])


def left_increment_jacobian(points_cam):
    """d(exp(xi) x)/d xi at xi = 0 for camera-frame point(s): (..., 3, 6).

    Tangent ordering is rotation-first, so columns 0..2 are -[x]_x and
    columns 3..5 are identity.
    """
    p = np.asarray(points_cam, dtype=float)
    J = np.zeros(p.shape[:-1] + (3, 6))
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    J[..., 0, 1] = z
    J[..., 0, 2] = -y
    J[..., 1, 0] = -z
    J[..., 1, 2] = x
    J[..., 2, 0] = y
    J[..., 2, 1] = -x
    J[..., 0, 3] = 1.0
    J[..., 1, 4] = 1.0
    J[..., 2, 5] = 1.0
    return J


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics; pixel units, no distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def contains(self, pixels):
        """Boolean mask: pixel (or (N,2) pixels) within [0, W-1] x [0, H-1]."""
        p = np.asarray(pixels, dtype=float)
        u, v = p[..., 0], p[..., 1]
        return (u >= 0) & (u <= self.width - 1) & (v >= 0) & (v <= self.height - 1)


def project(camera: Camera, point_cam):
    """Pinhole projection of camera-frame point(s); z must be positive.

    Accepts (3,) or (N, 3); returns (2,) or (N, 2).  The result may lie
    outside the image bounds; callers check.
    """
    p = np.asarray(point_cam, dtype=float)
    z = p[..., 2]
    if np.any(z <= _DEPTH_EPS):
        raise NonPositiveDepth(f"projection needs z > {_DEPTH_EPS}")
    u = camera.fx * p[..., 0] / z + camera.cx
    v = camera.fy * p[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1)


def project_jacobian(camera: Camera, point_cam):
    """d(pixel)/d(point_cam) for camera-frame point(s): (..., 2, 3)."""
    p = np.asarray(point_cam, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    J = np.zeros(p.shape[:-1] + (2, 3))
    J[..., 0, 0] = camera.fx / z
    J[..., 0, 2] = -camera.fx * x / z**2
    J[..., 1, 1] = camera.fy / z
    J[..., 1, 2] = -camera.fy * y / z**2
    return J


def backproject(camera: Camera, pixel, depth):
    """Camera-frame point(s) at the given pixel(s) and depth(s) (z = depth)."""
    px = np.asarray(pixel, dtype=float)
    d = np.asarray(depth, dtype=float)
    if np.any(d <= 0):
        raise NonPositiveDepth("back-projection needs depth > 0")
    x = (px[..., 0] - camera.cx) / camera.fx * d
    y = (px[..., 1] - camera.cy) / camera.fy * d
    return np.stack([x, y, d * np.ones_like(x)], axis=-1)


def backproject_radial(camera: Camera, pixel, distance):
    """Camera-frame point(s) at Euclidean `distance` along the pixel ray.

    Volumetric renders composite the ray parameter (distance along a
    unit direction), so their depth maps are radial, not z-depth; this
    is the matching inverse.
    """
    px = np.asarray(pixel, dtype=float)
    d = np.asarray(distance, dtype=float)
    if np.any(d <= 0):
        raise NonPositiveDepth("back-projection needs distance > 0")
    xn = (px[..., 0] - camera.cx) / camera.fx
    yn = (px[..., 1] - camera.cy) / camera.fy
    norm = np.sqrt(xn * xn + yn * yn + 1.0)
    scale = d / norm
    return np.stack([xn * scale, yn * scale, scale], axis=-1)


@dataclass(frozen=True)
class Ray:
    """Origin plus unit direction, world frame."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float).reshape(3)
        d = np.asarray(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-12:
            d = d / n
        o.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t):
        return self.origin + np.asarray(t)[..., None] * self.direction


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose with +z toward `target` and image-v downward."""
    eye = np.asarray(eye, dtype=float)
    forward = np.asarray(target, dtype=float) - eye
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=float)
    if np.linalg.norm(np.cross(forward, up)) < 1e-9:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(forward, up)
    x /= np.linalg.norm(x)
    y = np.cross(forward, x)
    y /= np.linalg.norm(y)
    R = np.stack([x, y, forward])
    return Pose(R, -R @ eye)


def ray_through_pixel(camera: Camera, pose_cam_to_world: Pose, pixel) -> Ray:
    """World-frame viewing ray for a pixel, given the camera-to-world pose."""
    px = np.asarray(pixel, dtype=float)
    d_cam = np.array([(px[0] - camera.cx) / camera.fx,
                      (px[1] - camera.cy) / camera.fy, 1.0])
    d_world = pose_cam_to_world.rotation @ d_cam
    return Ray(pose_cam_to_world.translation, d_world / np.linalg.norm(d_world))


def rays_for_camera(camera: Camera, pose_world_to_cam: Pose):
    """Origins (3,) and unit directions (H*W, 3) for every pixel, row-major."""
    c2w = pose_world_to_cam.inverse()
    u, v = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    d_cam = np.stack([(u.ravel() - camera.cx) / camera.fx,
                      (v.ravel() - camera.cy) / camera.fy,
                      np.ones(camera.width * camera.height)], axis=-1)
    d_world = d_cam @ c2w.rotation.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    return c2w.translation, d_world


def bilinear_sample(image, pixel):
    """Bilinear blend of the four texels around `pixel` (scalar call).

    `image` is (H, W) or (H, W, C); `pixel` is (u, v) with u along width.
    Raises OutOfBounds outside [0, W-1] x [0, H-1].
    """
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = img[:, :, None]
    H, W = img.shape[:2]
    u, v = float(pixel[0]), float(pixel[1])
    if not (0.0 <= u <= W - 1 and 0.0 <= v <= H - 1):
        raise OutOfBounds(f"pixel ({u}, {v}) outside [0,{W - 1}]x[0,{H - 1}]")
    out = _bilinear_many(img, np.array([[u, v]]))[0]
    return out if out.shape[0] > 1 else float(out[0])


def _bilinear_many(image, pixels):
    """Vectorised bilinear sampling; assumes pixels already in bounds."""
    H, W = image.shape[:2]
    u = pixels[:, 0]
    v = pixels[:, 1]
    u0 = np.clip(np.floor(u).astype(int), 0, W - 2) if W > 1 else np.zeros(len(u), int)
    v0 = np.clip(np.floor(v).astype(int), 0, H - 2) if H > 1 else np.zeros(len(v), int)
    a = u - u0
    b = v - v0
    q00 = image[v0, u0]
    q10 = image[v0, np.minimum(u0 + 1, W - 1)]
    q01 = image[np.minimum(v0 + 1, H - 1), u0]
    q11 = image[np.minimum(v0 + 1, H - 1), np.minimum(u0 + 1, W - 1)]
    wa = ((1 - a) * (1 - b))[:, None]
    wb = (a * (1 - b))[:, None]
    wc = ((1 - a) * b)[:, None]
    wd = (a * b)[:, None]
    return wa * q00 + wb * q10 + wc * q01 + wd * q11


def bilinear_sample_many(image, pixels):
    """Vectorised bilinear sampling with a validity mask instead of raising.

    Returns (values (N, C), valid (N,)); out-of-bounds rows are zero.
    """
    img = np.asarray(image, dtype=float)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    H, W = img.shape[:2]
    p = np.asarray(pixels, dtype=float)
    if p.ndim != 2 or p.shape[1] != 2:
        raise DimensionMismatch("pixels must be (N, 2)")
    valid = (p[:, 0] >= 0) & (p[:, 0] <= W - 1) & (p[:, 1] >= 0) & (p[:, 1] <= H - 1)
    out = np.zeros((len(p), img.shape[2]))
    if np.any(valid):
        out[valid] = _bilinear_many(img, p[valid])
    if squeeze:
        out = out[:, 0]
    return out, valid


def bilinear_gradient_many(image, pixels):
    """Exact spatial gradient of the bilinear surface at each pixel.

    Within a cell the interpolant is bilinear, so d/du is the v-blend of the
    horizontal texel differences and vice versa.  Returns (d/du, d/dv) each
    (N, C), plus the validity mask.  The derivative is taken inside the cell
    the pixel falls in; on cell boundaries the lower cell wins.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = img[:, :, None]
    H, W = img.shape[:2]
    p = np.asarray(pixels, dtype=float)
    valid = (p[:, 0] >= 0) & (p[:, 0] <= W - 1) & (p[:, 1] >= 0) & (p[:, 1] <= H - 1)
    gu = np.zeros((len(p), img.shape[2]))
    gv = np.zeros((len(p), img.shape[2]))
    if np.any(valid):
        q = p[valid]
        u, v = q[:, 0], q[:, 1]
        u0 = np.clip(np.floor(u).astype(int), 0, W - 2) if W > 1 else np.zeros(len(u), int)
        v0 = np.clip(np.floor(v).astype(int), 0, H - 2) if H > 1 else np.zeros(len(v), int)
        a = (u - u0)[:, None]
        b = (v - v0)[:, None]
        u1 = np.minimum(u0 + 1, W - 1)
        v1 = np.minimum(v0 + 1, H - 1)
        q00, q10 = image_at(img, v0, u0), image_at(img, v0, u1)
        q01, q11 = image_at(img, v1, u0), image_at(img, v1, u1)
        gu[valid] = (1 - b) * (q10 - q00) + b * (q11 - q01)
        gv[valid] = (1 - a) * (q01 - q00) + a * (q11 - q10)
    return gu, gv, valid


def image_at(image, rows, cols):
    return image[rows, cols]
