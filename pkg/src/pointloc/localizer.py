"""Structure-based localization: 2D-3D matching, P3P, RANSAC, refinement.

Matching maximises cosine similarity between query keypoint descriptors
and point descriptors (unit vectors, so similarity is a dot product),
after score-threshold filtering of the field.  Pose hypotheses come
from a minimal three-point solver inside a seeded RANSAC loop; the best
consensus set is polished by Gauss-Newton on the reprojection objective
under a smooth robust kernel soft-capped at the inlier threshold.

Order invariance: hypotheses sample indices into a canonically sorted
copy of the correspondence list, so shuffling the input changes nothing
given the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from numpy.polynomial import polynomial as Poly

from .errors import AllFiltered, DegenerateConfiguration, NoConsensus, NoMatches
from .geometry import Camera, Pose, left_increment_jacobian, project, project_jacobian, se3_exp
from .pointfield import PointField, filter_by_score
from .rng import Stream

SIMILARITY_FLOOR = 0.8
_CHUNK = 8192


@dataclass(frozen=True)
class Keypoint:
    pixel: np.ndarray
    descriptor: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.descriptor, dtype=float)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-6:
            raise ValueError("keypoint descriptor must be unit length")
        object.__setattr__(self, "pixel", np.asarray(self.pixel, dtype=float))
        object.__setattr__(self, "descriptor", d)


@dataclass(frozen=True)
class Correspondence:
    query_pixel: np.ndarray
    world_point: np.ndarray
    similarity: float
    keypoint_index: int = -1
    point_index: int = -1


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 20000
    inlier_threshold_px: float = 3.0
    min_inliers: int = 12
    rng_seed: int = 0
    early_exit_confidence: float = 0.9999
    refine_iterations: int = 15

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("need at least one iteration")
        if self.inlier_threshold_px <= 0:
            raise ValueError("inlier threshold must be positive")


@dataclass
class PoseEstimate:
    pose: Pose
    inlier_flags: np.ndarray
    mean_inlier_residual_px: float
    iterations_used: int


# -- matching --------------------------------------------------------------------

def match_features(keypoints: List[Keypoint], field: PointField, score_threshold,
                   similarity_floor=SIMILARITY_FLOOR, mutual=True):
    """Best-cosine-similarity correspondences between keypoints and the field.

    The field is score-filtered first; if that empties it the unfiltered
    field is used instead.  Matches under the similarity floor are
    dropped, and (optionally) matches must be mutual nearest neighbors.
    Raises NoMatches when fewer than 4 correspondences survive.
    """
    if len(field) == 0:
        raise NoMatches("empty point field")
    try:
        matched_field = filter_by_score(field, score_threshold)
    except AllFiltered:
        matched_field = field

    Q = np.stack([kp.descriptor for kp in keypoints])  # (nq, F)
    D = matched_field.descriptors                      # (np, F)
    nq = len(Q)

    best_sim = np.full(nq, -np.inf)
    best_idx = np.zeros(nq, dtype=int)
    # running column maxima for the mutual check
    point_best_sim = np.full(len(D), -np.inf)
    point_best_kp = np.zeros(len(D), dtype=int)

    for lo in range(0, len(D), _CHUNK):
        hi = min(lo + _CHUNK, len(D))
        sims = Q @ D[lo:hi].T  # (nq, chunk)
        chunk_best = np.argmax(sims, axis=1)
        chunk_val = sims[np.arange(nq), chunk_best]
        better = chunk_val > best_sim
        best_sim[better] = chunk_val[better]
        best_idx[better] = chunk_best[better] + lo

        col_best = np.argmax(sims, axis=0)
        col_val = sims[col_best, np.arange(hi - lo)]
        cbetter = col_val > point_best_sim[lo:hi]
        point_best_sim[lo:hi][cbetter] = col_val[cbetter]
        point_best_kp[lo:hi][cbetter] = col_best[cbetter]

    keep = best_sim >= similarity_floor
    if mutual:
        keep &= point_best_kp[best_idx] == np.arange(nq)

    corrs = [Correspondence(keypoints[i].pixel, matched_field.positions[best_idx[i]],
                            float(best_sim[i]), keypoint_index=i,
                            point_index=int(best_idx[i]))
             for i in np.nonzero(keep)[0]]
    if len(corrs) < 4:
        raise NoMatches(f"only {len(corrs)} correspondences survive matching")
    return corrs


# -- reprojection objective --------------------------------------------------------

def reprojection_residual(pose: Pose, corr: Correspondence, camera: Camera):
    """Pixel distance between the keypoint and the reprojected world point.

    Points landing behind the camera get an infinite residual so they can
    never count as inliers.
    """
    cam_pt = pose.apply(corr.world_point)
    if cam_pt[2] <= 1e-12:
        return np.inf
    return float(np.linalg.norm(project(camera, cam_pt) - corr.query_pixel))


def reprojection_residuals(pose: Pose, pixels, world, camera: Camera):
    """Vectorised residuals with inf for behind-camera points."""
    cam_pts = pose.apply(world)
    out = np.full(len(world), np.inf)
    front = cam_pts[:, 2] > 1e-12
    if np.any(front):
        proj = np.stack(
            [camera.fx * cam_pts[front, 0] / cam_pts[front, 2] + camera.cx,
             camera.fy * cam_pts[front, 1] / cam_pts[front, 2] + camera.cy],
            axis=1)
        out[front] = np.linalg.norm(proj - pixels[front], axis=1)
    return out


def total_error(pose: Pose, correspondences, camera: Camera):
    """Sum of finite residuals plus the count of behind-camera sentinels."""
    pixels = np.stack([c.query_pixel for c in correspondences])
    world = np.stack([c.world_point for c in correspondences])
    r = reprojection_residuals(pose, pixels, world, camera)
    finite = np.isfinite(r)
    return float(np.sum(r[finite])), int(np.sum(~finite))


# -- minimal solver ----------------------------------------------------------------

def _kabsch(world, cam):
    """Rigid world->camera transform that best aligns the two point triples."""
    cw = world.mean(axis=0)
    cc = cam.mean(axis=0)
    M = (cam - cc).T @ (world - cw)
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    R = U @ np.diag([1.0, 1.0, d]) @ Vt
    return Pose(R, cc - R @ cw)


def solve_p3p(correspondences, camera: Camera):
    """Up to four poses consistent with three 2D-3D correspondences.

    Distance-ratio quartic (Grunert elimination built by polynomial
    arithmetic), quadratic back-substitution, rigid alignment, then a
    Gauss-Newton polish so every returned pose reprojects the three
    points to machine precision.
    """
    if len(correspondences) != 3:
        raise ValueError("P3P needs exactly 3 correspondences")
    world = np.stack([c.world_point for c in correspondences])
    pixels = np.stack([c.query_pixel for c in correspondences])

    span = np.cross(world[1] - world[0], world[2] - world[0])
    scale = max(np.max(np.linalg.norm(world - world.mean(axis=0), axis=1)), 1e-12)
    if np.linalg.norm(span) < 1e-9 * scale**2:
        raise DegenerateConfiguration("world points are collinear")

    f = np.stack([(pixels[:, 0] - camera.cx) / camera.fx,
                  (pixels[:, 1] - camera.cy) / camera.fy,
                  np.ones(3)], axis=1)
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    if (abs(f[0] @ f[1]) > 1 - 1e-12 or abs(f[0] @ f[2]) > 1 - 1e-12
            or abs(f[1] @ f[2]) > 1 - 1e-12):
        raise DegenerateConfiguration("bearing directions coincide")

    a2 = float(np.sum((world[1] - world[2]) ** 2))
    b2 = float(np.sum((world[0] - world[2]) ** 2))
    c2 = float(np.sum((world[0] - world[1]) ** 2))
    ca = float(f[1] @ f[2])
    cb = float(f[0] @ f[2])
    cg = float(f[0] @ f[1])

    # u eliminated linearly from the two distance-ratio equations:
    #   N(v) = (a2+b2-c2) + 2 cb (c2-a2) v + (a2-b2-c2) v^2
    #   D(v) = 2 b2 (cg - ca v)
    # substituted into b2 u^2 - 2 b2 cg u + (b2 - c2 + 2 c2 cb v - c2 v^2) = 0
    N = np.array([a2 + b2 - c2, 2 * cb * (c2 - a2), a2 - b2 - c2])
    D = np.array([2 * b2 * cg, -2 * b2 * ca])
    Q = np.array([b2 - c2, 2 * c2 * cb, -c2])
    quartic = Poly.polyadd(
        Poly.polysub(b2 * Poly.polymul(N, N),
                     2 * b2 * cg * Poly.polymul(N, D)),
        Poly.polymul(Q, Poly.polymul(D, D)))
    quartic = np.trim_zeros(quartic, "b")
    if len(quartic) < 2:
        raise DegenerateConfiguration("distance system is degenerate")
    roots = Poly.polyroots(quartic)

    poses = []
    for v in roots:
        if abs(v.imag) > 1e-6 * (1 + abs(v.real)) or v.real <= 0:
            continue
        v = float(v.real)
        # one Newton step sharpens the eigenvalue root
        fv = Poly.polyval(v, quartic)
        dfv = Poly.polyval(v, Poly.polyder(quartic))
        if dfv != 0:
            v -= fv / dfv
        denom = 1.0 + v * v - 2.0 * v * cb
        if denom <= 1e-12:
            continue
        s1 = np.sqrt(b2 / denom)
        # both u branches of the quadratic, validated against equation (1)
        disc = (b2 * cg) ** 2 - b2 * (b2 - c2 + 2 * c2 * cb * v - c2 * v * v)
        if disc < 0:
            continue
        for u in ((b2 * cg + np.sqrt(disc)) / b2, (b2 * cg - np.sqrt(disc)) / b2):
            if u <= 0:
                continue
            res1 = s1 * s1 * (u * u + v * v - 2 * u * v * ca) - a2
            if abs(res1) > 1e-6 * max(a2, 1.0):
                continue
            cam_pts = np.array([s1, u * s1, v * s1])[:, None] * f
            pose = _kabsch(world, cam_pts)
            pose = _polish_pose(pose, pixels, world, camera)
            if pose is None:
                continue
            if any(_pose_close(pose, p) for p in poses):
                continue
            r = reprojection_residuals(pose, pixels, world, camera)
            if np.all(np.isfinite(r)) and np.max(r) < 1e-6:
                poses.append(pose)
    if not poses:
        raise DegenerateConfiguration("no geometrically valid P3P solution")
    return poses


def _pose_close(p, q, tol=1e-6):
    return (np.max(np.abs(p.rotation - q.rotation)) < tol
            and np.max(np.abs(p.translation - q.translation)) < tol)


def _polish_pose(pose, pixels, world, camera, iterations=4):
    """Few exact Gauss-Newton steps on the minimal reprojection system."""
    for _ in range(iterations):
        cam_pts = pose.apply(world)
        if np.any(cam_pts[:, 2] <= 1e-12):
            return None
        r = pixels - project(camera, cam_pts)
        J = project_jacobian(camera, cam_pts) @ left_increment_jacobian(cam_pts)
        A = J.reshape(-1, 6)
        b = r.reshape(-1)
        delta, *_ = np.linalg.lstsq(A, b, rcond=None)
        pose = se3_exp(delta).compose(pose)
        if np.linalg.norm(delta) < 1e-14:
            break
    return pose


# -- robust refinement ---------------------------------------------------------------

def refine_pose_gn(pose, pixels, world, camera, threshold, iterations=15):
    """Gauss-Newton on the reprojection error with a Geman-McClure kernel.

    The kernel rho(r) = (r^2/2) / (1 + r^2/tau^2) caps each residual's
    influence at the inlier threshold tau, a smooth stand-in for the raw
    residual-sum objective.
    """
    tau2 = threshold * threshold
    for _ in range(iterations):
        cam_pts = pose.apply(world)
        front = cam_pts[:, 2] > 1e-12
        if np.sum(front) < 3:
            return pose
        proj = project(camera, cam_pts[front])
        r = pixels[front] - proj
        rn2 = np.sum(r * r, axis=1)
        w = 1.0 / (1.0 + rn2 / tau2) ** 2
        J = project_jacobian(camera, cam_pts[front]) @ \
            left_increment_jacobian(cam_pts[front])
        # weighted normal equations: (J^T W J) delta = J^T W r
        Jw = J.reshape(-1, 6)
        Wfull = np.repeat(w, 2)
        JtJ = (Jw * Wfull[:, None]).T @ Jw
        Jtb = (Jw * Wfull[:, None]).T @ r.reshape(-1)
        try:
            delta = np.linalg.solve(JtJ + 1e-12 * np.eye(6), Jtb)
        except np.linalg.LinAlgError:
            return pose
        pose = se3_exp(delta).compose(pose)
        if np.linalg.norm(delta) < 1e-14:
            break
    return pose


# -- RANSAC ---------------------------------------------------------------------------

def _canonical_order(correspondences):
    keys = np.array([(c.query_pixel[0], c.query_pixel[1], *c.world_point,
                      c.similarity) for c in correspondences])
    return np.lexsort(keys.T[::-1])


def ransac_pnp(correspondences, camera: Camera, config: RansacConfig) -> PoseEstimate:
    """Seeded hypothesize-and-verify pose estimation over 2D-3D matches.

    Deterministic given the seed and invariant to input order (sampling
    indexes a canonically sorted list; the lowest-index best hypothesis
    wins ties).  Exits early once the classical confidence bound
    1 - (1 - w^3)^n clears the configured confidence.
    """
    n = len(correspondences)
    if n < 4:
        raise NoConsensus(f"need >= 4 correspondences, got {n}")
    order = _canonical_order(correspondences)
    sorted_corrs = [correspondences[i] for i in order]
    pixels = np.stack([c.query_pixel for c in sorted_corrs])
    world = np.stack([c.world_point for c in sorted_corrs])

    stream = Stream(config.rng_seed, "ransac")
    best_count = 0
    best_mean = np.inf
    best_pose = None
    iterations_used = 0

    for it in range(config.max_iterations):
        iterations_used = it + 1
        pick = stream.split("iter", it).choice(n, 3)
        sample = [sorted_corrs[i] for i in pick]
        try:
            candidates = solve_p3p(sample, camera)
        except DegenerateConfiguration:
            continue
        for pose in candidates:
            r = reprojection_residuals(pose, pixels, world, camera)
            inl = r <= config.inlier_threshold_px
            count = int(np.sum(inl))
            if count == 0:
                continue
            mean_res = float(np.mean(r[inl]))
            if count > best_count or (count == best_count
                                      and mean_res < best_mean - 1e-15):
                best_count = count
                best_mean = mean_res
                best_pose = pose
        if best_count >= 3:
            w = best_count / n
            if 1.0 - (1.0 - w**3) ** iterations_used >= config.early_exit_confidence:
                break

    if best_pose is None or best_count < config.min_inliers:
        raise NoConsensus(
            f"best consensus {best_count} below minimum {config.min_inliers}")

    inl = reprojection_residuals(best_pose, pixels, world, camera) \
        <= config.inlier_threshold_px
    pose = refine_pose_gn(best_pose, pixels[inl], world[inl], camera,
                          config.inlier_threshold_px,
                          iterations=config.refine_iterations)
    final_r = reprojection_residuals(pose, pixels, world, camera)
    final_inl_sorted = final_r <= config.inlier_threshold_px
    if not np.any(final_inl_sorted):
        raise NoConsensus("refinement lost every inlier")

    # map flags back to the caller's ordering
    flags = np.zeros(n, dtype=bool)
    flags[order] = final_inl_sorted
    return PoseEstimate(pose=pose, inlier_flags=flags,
                        mean_inlier_residual_px=float(
                            np.mean(final_r[final_inl_sorted])),
                        iterations_used=iterations_used)
