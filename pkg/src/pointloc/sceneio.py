"""Synthetic scenes and scene bundles.

A scene bundle is everything a localization run needs: a trained point
field, the reference views it was built from, query cameras with ground
truth poses, query images self-rendered by the volumetric renderer at
those poses, and synthetic query keypoints.  Because the renderer
itself defines the image formation, pose recovery on a bundle is
well-posed and exactly checkable without external data or models.

Scene kinds are analytic (ray-traceable) geometries:

* ``checkerboard_room``: the inside of a box, walls textured with a
  smooth multi-sine field plus a checker pattern; cameras inside look
  radially outward.  Nearly every rendered pixel is valid.
* ``textured_spheres``: floating textured spheres against empty space;
  silhouettes make reference renders blank-heavy.
* ``random_blobs``: a loose cluster of small colored spheres.

Points are built by back-projecting a strided subset of reference
pixels with their analytic depth, then the per-scene adaptation MLP is
trained (proxy color objective) and its features and scores are baked
into the field.  All randomness flows from counter streams keyed on the
config seed, so equal seeds give byte-identical bundles.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from .adaptation import (
    APPEARANCE_DIM,
    AdaptationMLP,
    AppearanceTable,
    PointObservations,
    RadianceHead,
    SceneModel,
    TrainConfig,
    refresh_field_features,
    train_adaptation,
)
from .errors import DimensionMismatch
from .formats import (
    load_cameras,
    load_depth,
    load_image_f32,
    load_mask,
    load_mlp,
    load_pointfield,
    load_poses,
    save_cameras,
    save_depth,
    save_image_f32,
    save_mask,
    save_mlp,
    save_png,
    save_pointfield,
    save_poses,
)
from .geometry import Camera, Pose, look_at, rays_for_camera
from .pointfield import AGNOSTIC_DIM, PointField, build_field
from .renderer import RaySamplerConfig, render_view
from .rng import Stream, derive_key

SCENE_KINDS = ("checkerboard_room", "textured_spheres", "random_blobs")
DESCRIPTOR_SCHEMES = ("position_hash", "random_orthogonal")


@dataclass
class SyntheticSceneConfig:
    kind: str = "checkerboard_room"
    point_count: int = 5000
    descriptor_scheme: str = "position_hash"
    descriptor_noise: float = 0.0
    rng_seed: int = 0
    n_reference_views: int = 12
    n_queries: int = 10
    image_size: int = 64
    focal: float = 45.0
    keypoints_per_query: int = 250
    keypoint_noise_px: float = 0.7
    n_samples_per_ray: int = 128
    # uniform depth sampling keeps separate renders on one quadrature grid,
    # so photometric comparisons between them carry no sampling jitter
    sampler_mode: str = "uniform"
    train_steps: int = 800
    train_lr: float = 1e-2
    # reliability mixture for score-filter studies: a fraction of points
    # gets noisy color observations and a descriptor component along a
    # shared direction the score head can learn to distrust
    unreliable_fraction: float = 0.0
    unreliable_color_sigma: float = 0.15
    unreliable_descriptor_mix: float = 0.6
    # rendering the query images is the expensive part of generation;
    # matching/PnP-only studies can skip it
    render_queries: bool = True

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.descriptor_scheme not in DESCRIPTOR_SCHEMES:
            raise ValueError(f"unknown descriptor scheme {self.descriptor_scheme!r}")
        if self.point_count < 100:
            raise ValueError("point count must be >= 100")
        if self.descriptor_noise < 0:
            raise ValueError("descriptor noise must be >= 0")


@dataclass
class ReferenceView:
    camera: Camera
    pose: Pose  # world-to-camera
    image: np.ndarray
    depth: np.ndarray
    appearance_id: int
    t_near: float
    t_far: float
    mask: Optional[np.ndarray] = None


@dataclass
class QueryKeypoints:
    pixels: np.ndarray        # (K, 2)
    descriptors: np.ndarray   # (K, F_a)
    point_indices: np.ndarray  # generating field point per keypoint


@dataclass
class QueryView:
    camera: Camera
    gt_pose: Pose
    image: np.ndarray         # self-rendered at gt_pose
    keypoints: QueryKeypoints
    render_seed: int
    mask: Optional[np.ndarray] = None


@dataclass
class SceneBundle:
    config: SyntheticSceneConfig
    field: PointField
    model: SceneModel
    observations: PointObservations
    references: List[ReferenceView]
    queries: List[QueryView]
    t_near: float
    t_far: float

    @property
    def camera(self) -> Camera:
        return self.references[0].camera


# -- analytic geometry ------------------------------------------------------------


class _Room:
    """Interior of an axis-aligned box with textured walls and furniture.

    A handful of textured spheres floats between the cameras and the
    walls; the resulting multi-depth structure is what makes all six
    pose directions observable from a single view.
    """

    def __init__(self, stream=None, half=1.0, n_interior=7):
        self.half = half
        if stream is None or n_interior == 0:
            self.centers = np.zeros((0, 3))
            self.radii = np.zeros(0)
            self.bases = np.zeros((0, 3))
        else:
            angles = 2 * np.pi * np.arange(n_interior) / n_interior
            ring = 0.62 * half
            self.centers = np.stack([
                ring * np.cos(angles), ring * np.sin(angles),
                stream.uniform(n_interior, -0.45, 0.45) * half], axis=1)
            self.radii = stream.uniform(n_interior, 0.14, 0.26) * half
            self.bases = stream.uniform((n_interior, 3), 0.2, 0.8)

    def trace(self, origins, dirs):
        h = self.half
        with np.errstate(divide="ignore", invalid="ignore"):
            t_hi = (h - origins) / dirs   # per-axis exit at +h
            t_lo = (-h - origins) / dirs  # per-axis exit at -h
        t_exit = np.where(dirs > 0, t_hi, np.where(dirs < 0, t_lo, np.inf))
        t = np.min(t_exit, axis=1)
        self._sphere_hit = np.full(len(dirs), -1)
        for i, (c, r) in enumerate(zip(self.centers, self.radii)):
            oc = origins - c
            b = np.sum(oc * dirs, axis=1)
            disc = b * b - (np.sum(oc * oc, axis=1) - r * r)
            ok = disc >= 0
            ts = np.where(ok, -b - np.sqrt(np.maximum(disc, 0.0)), np.inf)
            ts = np.where(ts > 1e-6, ts, np.inf)
            closer = ts < t
            t = np.where(closer, ts, t)
            self._sphere_hit = np.where(closer, i, self._sphere_hit)
        hit = np.isfinite(t) & (t > 0)
        points = origins + t[:, None] * dirs
        return points, np.where(hit, t, 0.0), hit

    def color(self, points):
        x, y, z = points[:, 0], points[:, 1], points[:, 2]
        base = np.stack([
            0.5 + 0.22 * np.sin(4.1 * x + 1.7 * y) + 0.10 * np.cos(2.3 * z),
            0.5 + 0.22 * np.sin(3.3 * y + 2.9 * z) + 0.10 * np.cos(2.7 * x),
            0.5 + 0.22 * np.sin(3.7 * z + 2.1 * x) + 0.10 * np.cos(3.1 * y),
        ], axis=1)
        cell = 0.7
        checker = (np.floor(x / cell) + np.floor(y / cell)
                   + np.floor(z / cell)) % 2
        base += (checker - 0.5)[:, None] * np.array([0.16, -0.12, 0.10])
        if len(self.centers):
            # nearest sphere surface decides whether this is furniture
            d = np.stack([np.abs(np.linalg.norm(points - c, axis=1) - r)
                          for c, r in zip(self.centers, self.radii)], axis=1)
            idx = np.argmin(d, axis=1)
            on_sphere = d[np.arange(len(points)), idx] < 1e-6
            rel = points - self.centers[idx]
            wobble = np.stack([np.sin(9.0 * rel[:, 0] + 6.0 * rel[:, 1]),
                               np.sin(8.0 * rel[:, 1] + 6.0 * rel[:, 2]),
                               np.sin(7.0 * rel[:, 2] + 6.0 * rel[:, 0])],
                              axis=1)
            sphere_color = self.bases[idx] + 0.24 * wobble
            base = np.where(on_sphere[:, None], sphere_color, base)
        return np.clip(base, 0.02, 0.98)


class _Spheres:
    """A handful of textured spheres floating in empty space."""

    def __init__(self, stream, n=6, r_lo=0.35, r_hi=0.6, spread=0.75):
        self.centers = stream.uniform((n, 3), -spread, spread)
        self.radii = stream.uniform(n, r_lo, r_hi)
        self.bases = stream.uniform((n, 3), 0.25, 0.75)

    def trace(self, origins, dirs):
        best_t = np.full(len(dirs), np.inf)
        best_i = np.full(len(dirs), -1)
        for i, (c, r) in enumerate(zip(self.centers, self.radii)):
            oc = origins - c
            b = np.sum(oc * dirs, axis=1)
            disc = b * b - (np.sum(oc * oc, axis=1) - r * r)
            ok = disc >= 0
            t = np.where(ok, -b - np.sqrt(np.maximum(disc, 0.0)), np.inf)
            t = np.where(t > 1e-6, t, np.inf)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_i = np.where(closer, i, best_i)
        hit = np.isfinite(best_t)
        points = origins + np.where(hit, best_t, 0.0)[:, None] * dirs
        self._last_index = best_i
        return points, np.where(hit, best_t, 0.0), hit

    def color(self, points):
        # nearest sphere surface decides the palette
        d = np.stack([np.abs(np.linalg.norm(points - c, axis=1) - r)
                      for c, r in zip(self.centers, self.radii)], axis=1)
        idx = np.argmin(d, axis=1)
        rel = points - self.centers[idx]
        base = self.bases[idx]
        wobble = np.stack([np.sin(6.0 * rel[:, 0] + 4.0 * rel[:, 1]),
                           np.sin(5.0 * rel[:, 1] + 4.0 * rel[:, 2]),
                           np.sin(4.5 * rel[:, 2] + 5.0 * rel[:, 0])], axis=1)
        return np.clip(base + 0.22 * wobble, 0.02, 0.98)


def _make_geometry(config, stream):
    if config.kind == "checkerboard_room":
        return _Room(stream.split("furniture"), half=1.0)
    if config.kind == "textured_spheres":
        return _Spheres(stream.split("spheres"))
    return _Spheres(stream.split("blobs"), n=14, r_lo=0.12, r_hi=0.28,
                    spread=0.8)


def _camera_for(config) -> Camera:
    s = config.image_size
    return Camera(fx=config.focal, fy=config.focal, cx=s / 2.0, cy=s / 2.0,
                  width=s, height=s)


def _reference_poses(config, stream):
    poses = []
    n = config.n_reference_views
    if config.kind == "checkerboard_room":
        # radial ring plus dedicated ceiling/floor views so every face of
        # the room gets frontal coverage
        ring = max(n - 2, 4)
        for i in range(ring):
            theta = 2 * np.pi * i / ring
            eye = np.array([0.30 * np.cos(theta), 0.30 * np.sin(theta),
                            0.12 * np.sin(2 * theta)])
            target = np.array([1.6 * np.cos(theta), 1.6 * np.sin(theta),
                               0.25 * np.sin(2 * theta)])
            poses.append(look_at(eye, target))
        poses.append(look_at([0.05, 0.0, 0.0], [0.1, 0.0, 1.5]))
        poses.append(look_at([-0.05, 0.0, 0.0], [-0.1, 0.0, -1.5]))
    else:
        for i in range(n):
            theta = 2 * np.pi * i / n
            eye = np.array([2.3 * np.cos(theta), 2.3 * np.sin(theta),
                            0.5 * np.sin(3 * theta)])
            poses.append(look_at(eye, np.zeros(3)))
    return poses


def _query_poses(config, stream):
    poses = []
    n = config.n_queries
    s = stream.split("querypose")
    for i in range(n):
        theta = 2 * np.pi * (i + 0.5) / n
        if config.kind == "checkerboard_room":
            eye = np.array([0.30 * np.cos(theta), 0.30 * np.sin(theta),
                            0.12 * np.sin(2 * theta)])
            eye = eye + s.uniform(3, -0.05, 0.05)
            # aim through the furniture ring: every view layers spheres
            # against walls, which pins rotation against translation
            target = np.array([1.1 * np.cos(theta), 1.1 * np.sin(theta),
                               0.2 * np.sin(2 * theta)]) + s.uniform(3, -0.15, 0.15)
        else:
            eye = np.array([2.3 * np.cos(theta), 2.3 * np.sin(theta),
                            0.5 * np.sin(3 * theta)]) + s.uniform(3, -0.12, 0.12)
            target = s.uniform(3, -0.15, 0.15)
        poses.append(look_at(eye, target))
    return poses


def _scene_ranges(config):
    if config.kind == "checkerboard_room":
        return 0.05, 3.9
    return 0.4, 4.2


# -- descriptors --------------------------------------------------------------------


def _position_hash_descriptors(positions, sub_seed, cell=1e-4):
    """Unit descriptors keyed on the quantised point position.

    Distinct cells get independent 128-dim gaussians, so distinct points
    are nearly orthogonal with overwhelming probability; coincident
    points share a descriptor by construction.
    """
    keys = derive_key(sub_seed, "poshash")
    q = np.floor(positions / cell).astype(np.int64).astype(np.uint64)
    from .rng import mix64
    h = mix64(q[:, 0] ^ keys)
    h = mix64(h ^ q[:, 1])
    h = mix64(h ^ q[:, 2])
    counters = np.arange(AGNOSTIC_DIM // 2, dtype=np.uint64)
    to_unit = lambda bits: (bits >> np.uint64(11)).astype(np.float64) / (1 << 53)
    u1 = to_unit(mix64(counters[None, :] ^ h[:, None]))
    u2 = to_unit(mix64((counters + np.uint64(1 << 32))[None, :] ^ h[:, None]))
    r = np.sqrt(-2.0 * np.log(np.maximum(u1, 1e-300)))
    out = np.empty((len(positions), AGNOSTIC_DIM))
    out[:, 0::2] = r * np.cos(2 * np.pi * u2)
    out[:, 1::2] = r * np.sin(2 * np.pi * u2)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def _random_orthogonal_descriptors(n, stream):
    """Blocks of orthonormal vectors; cross-block pairs are near-orthogonal."""
    out = np.empty((n, AGNOSTIC_DIM))
    done = 0
    block = 0
    while done < n:
        G = stream.split("orth", block).normal((AGNOSTIC_DIM, AGNOSTIC_DIM))
        Q, _ = np.linalg.qr(G)
        take = min(AGNOSTIC_DIM, n - done)
        out[done:done + take] = Q[:, :take].T
        done += take
        block += 1
    return out


def _validate_descriptors(descriptors, stream, limit=2000, max_cos=0.8):
    n = len(descriptors)
    pick = stream.choice(n, min(limit, n))
    D = descriptors[pick]
    sims = np.abs(D @ D.T)
    np.fill_diagonal(sims, 0.0)
    return float(np.max(sims)) < max_cos


def make_descriptors(positions, scheme, stream):
    """Scene-agnostic descriptors with a collision check and reseeding."""
    for attempt in range(8):
        sub = derive_key(int(stream.key), "descs", attempt)
        if scheme == "position_hash":
            desc = _position_hash_descriptors(positions, int(sub))
        else:
            desc = _random_orthogonal_descriptors(len(positions),
                                                  Stream(int(sub), "orth"))
        if _validate_descriptors(desc, stream.split("validate", attempt)):
            return desc
    raise RuntimeError("descriptor generation kept colliding; widen the scheme")


# -- scene generation ---------------------------------------------------------------


def _render_reference(geometry, camera, pose, t_near, t_far, appearance_id):
    origin, dirs = rays_for_camera(camera, pose)
    origins = np.broadcast_to(origin, dirs.shape)
    points, t, hit = geometry.trace(origins, dirs)
    color = np.where(hit[:, None], geometry.color(points), 0.0)
    # radial depth (distance along the unit ray), matching rendered depth maps
    radial = np.where(hit, t, 0.0)
    H, W = camera.height, camera.width
    return ReferenceView(camera=camera, pose=pose,
                         image=color.reshape(H, W, 3),
                         depth=radial.reshape(H, W),
                         appearance_id=appearance_id,
                         t_near=t_near, t_far=t_far), points, hit


def generate_scene(config: SyntheticSceneConfig) -> SceneBundle:
    """Build a deterministic scene bundle from a config; see module docs."""
    stream = Stream(config.rng_seed, "scene")
    geometry = _make_geometry(config, stream)
    camera = _camera_for(config)
    t_near, t_far = _scene_ranges(config)

    # reference views + candidate surface points
    ref_poses = _reference_poses(config, stream)
    references = []
    pts, cols, dirs_list, app_ids, depths = [], [], [], [], []
    for i, pose in enumerate(ref_poses):
        view, points, hit = _render_reference(geometry, camera, pose,
                                              t_near, t_far, i)
        references.append(view)
        total = int(np.sum(hit))
        if total == 0:
            continue
        world = points[hit]
        color = view.image.reshape(-1, 3)[hit]
        center = pose.camera_center()
        vdir = world - center
        vdir /= np.linalg.norm(vdir, axis=1, keepdims=True)
        pts.append(world)
        cols.append(color)
        dirs_list.append(vdir)
        app_ids.append(np.full(len(world), i, dtype=int))
        depths.append(view.depth.ravel()[hit.reshape(-1)] if hit.ndim > 1
                      else view.depth.reshape(-1)[hit])

    positions = np.concatenate(pts)
    colors = np.concatenate(cols)
    view_dirs = np.concatenate(dirs_list)
    appearance_ids = np.concatenate(app_ids)
    pixel_depths = np.concatenate(depths)

    if len(positions) > config.point_count:
        # area-uniform resampling: a pixel's surface footprint grows with
        # depth^2, so weighting by it keeps far walls as dense as near ones
        w = np.maximum(pixel_depths, 1e-6) ** 2
        u = stream.split("subsample").uniform(len(positions))
        keys = np.log(np.maximum(u, 1e-300)) / w
        pick = np.sort(np.argsort(keys)[::-1][:config.point_count])
        positions, colors = positions[pick], colors[pick]
        view_dirs, appearance_ids = view_dirs[pick], appearance_ids[pick]

    descriptors = make_descriptors(positions, config.descriptor_scheme,
                                   stream.split("desc"))

    unreliable = np.zeros(len(positions), dtype=bool)
    if config.unreliable_fraction > 0:
        k = int(round(config.unreliable_fraction * len(positions)))
        unreliable[stream.split("unreliable").choice(len(positions), k)] = True
        u_dir = stream.split("udir").normal(AGNOSTIC_DIM)
        u_dir /= np.linalg.norm(u_dir)
        mix = config.unreliable_descriptor_mix
        mixed = (mix * u_dir[None, :]
                 + np.sqrt(1 - mix * mix) * descriptors[unreliable])
        descriptors[unreliable] = mixed / np.linalg.norm(mixed, axis=1,
                                                         keepdims=True)
        noise = stream.split("ucolor").normal((int(np.sum(unreliable)), 3),
                                              scale=config.unreliable_color_sigma)
        colors = colors.copy()
        colors[unreliable] = np.clip(colors[unreliable] + noise, 0.0, 1.0)

    confidences = stream.split("gamma").uniform(len(positions), 0.85, 1.0)
    field = build_field(positions, descriptors, confidences=confidences)
    observations = PointObservations(descriptors, positions, colors,
                                     view_dirs, appearance_ids)

    model, _ = train_adaptation(
        field, observations,
        TrainConfig(learning_rate=config.train_lr, steps=config.train_steps,
                    batch_size=512, rng_seed=config.rng_seed),
        reference_views=references)
    refresh_field_features(field, model, observations)

    # self-rendered queries with per-query seeds
    queries = []
    q_poses = _query_poses(config, stream)
    kp_stream = stream.split("keypoints")
    for qi, pose in enumerate(q_poses):
        render_seed = int(derive_key(config.rng_seed, "query-render", qi))
        if config.render_queries:
            sampler = RaySamplerConfig(t_near=t_near, t_far=t_far,
                                       n_samples=config.n_samples_per_ray,
                                       mode=config.sampler_mode,
                                       rng_seed=render_seed)
            view = render_view(field, camera, pose, sampler, model,
                               appearance_id=0)
            image = view.color
            mask = view.valid_mask
        else:
            image = np.zeros((camera.height, camera.width, 3))
            mask = None
        keypoints = _make_keypoints(field, camera, pose, config,
                                    kp_stream.split(qi))
        queries.append(QueryView(camera=camera, gt_pose=pose, image=image,
                                 keypoints=keypoints, render_seed=render_seed,
                                 mask=mask))

    return SceneBundle(config=config, field=field, model=model,
                       observations=observations, references=references,
                       queries=queries, t_near=t_near, t_far=t_far)


def _make_keypoints(field, camera, pose, config, stream) -> QueryKeypoints:
    cam_pts = pose.apply(field.positions)
    front = cam_pts[:, 2] > 0.1
    u = camera.fx * cam_pts[:, 0] / np.where(front, cam_pts[:, 2], 1.0) + camera.cx
    v = camera.fy * cam_pts[:, 1] / np.where(front, cam_pts[:, 2], 1.0) + camera.cy
    margin = 1.0
    visible = front & (u >= margin) & (u <= camera.width - 1 - margin) \
        & (v >= margin) & (v <= camera.height - 1 - margin)
    candidates = np.nonzero(visible)[0]
    k = min(config.keypoints_per_query, len(candidates))
    pick = candidates[stream.split("pick").choice(len(candidates), k)]

    pixels = np.stack([u[pick], v[pick]], axis=1)
    if config.keypoint_noise_px > 0:
        pixels = pixels + stream.split("pxnoise").normal(
            (k, 2), scale=config.keypoint_noise_px)
        pixels[:, 0] = np.clip(pixels[:, 0], 0, camera.width - 1)
        pixels[:, 1] = np.clip(pixels[:, 1], 0, camera.height - 1)
    descs = field.descriptors[pick].copy()
    if config.descriptor_noise > 0:
        descs = descs + stream.split("dnoise").normal(
            descs.shape, scale=config.descriptor_noise)
        descs /= np.linalg.norm(descs, axis=1, keepdims=True)
    return QueryKeypoints(pixels=pixels, descriptors=descs,
                          point_indices=pick)


# -- bundle save / load ---------------------------------------------------------------


def save_bundle(dirpath, bundle: SceneBundle, png_previews=False):
    os.makedirs(dirpath, exist_ok=True)
    j = os.path.join
    save_pointfield(j(dirpath, "field.pnpf"), bundle.field)
    os.makedirs(j(dirpath, "model"), exist_ok=True)
    save_mlp(j(dirpath, "model", "adaptation.pnml"),
             bundle.model.adaptation.net)
    save_mlp(j(dirpath, "model", "trunk.pnml"), bundle.model.head.trunk)
    save_mlp(j(dirpath, "model", "sigma.pnml"), bundle.model.head.sigma)
    save_mlp(j(dirpath, "model", "color.pnml"), bundle.model.head.color)
    save_image_f32(j(dirpath, "model", "appearance.pnim"),
                   bundle.model.appearance.vectors)

    save_cameras(j(dirpath, "cameras.txt"),
                 [bundle.camera] + [q.camera for q in bundle.queries])
    save_poses(j(dirpath, "ref_poses.txt"), [r.pose for r in bundle.references])
    save_poses(j(dirpath, "query_poses.txt"),
               [q.gt_pose for q in bundle.queries])

    os.makedirs(j(dirpath, "refs"), exist_ok=True)
    for i, ref in enumerate(bundle.references):
        save_image_f32(j(dirpath, "refs", f"{i:03d}.pnim"), ref.image)
        save_depth(j(dirpath, "refs", f"{i:03d}.pndp"), ref.depth)
    os.makedirs(j(dirpath, "queries"), exist_ok=True)
    for i, q in enumerate(bundle.queries):
        save_image_f32(j(dirpath, "queries", f"{i:03d}.pnim"), q.image)
        if q.mask is not None:
            save_mask(j(dirpath, "queries", f"{i:03d}.pnmk"), q.mask)
        if png_previews:
            save_png(j(dirpath, "queries", f"{i:03d}.png"), q.image)
        kp = q.keypoints
        save_image_f32(j(dirpath, "queries", f"{i:03d}.kp.pnim"),
                       np.concatenate([kp.pixels,
                                       kp.point_indices[:, None].astype(float)],
                                      axis=1))
        save_image_f32(j(dirpath, "queries", f"{i:03d}.kpdesc.pnim"),
                       kp.descriptors)

    obs = bundle.observations
    save_image_f32(j(dirpath, "observations.pnim"),
                   np.concatenate([obs.positions, obs.colors, obs.view_dirs,
                                   obs.appearance_ids[:, None].astype(float)],
                                  axis=1))

    meta = {
        "format_version": 1,
        "config": asdict(bundle.config),
        "t_near": bundle.t_near,
        "t_far": bundle.t_far,
        "field": {
            "neighbor_radius": bundle.field.neighbor_radius,
            "kernel_width": bundle.field.kernel_width,
            "density_scale": bundle.field.density_scale,
            "scene_diameter": bundle.field.scene_diameter,
        },
        "query_render_seeds": [q.render_seed for q in bundle.queries],
        "reference_appearance_ids": [r.appearance_id
                                     for r in bundle.references],
    }
    with open(j(dirpath, "meta.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_bundle(dirpath) -> SceneBundle:
    j = os.path.join
    with open(j(dirpath, "meta.json")) as f:
        meta = json.load(f)
    config = SyntheticSceneConfig(**meta["config"])
    fparams = meta["field"]
    pfield = load_pointfield(j(dirpath, "field.pnpf"),
                             neighbor_radius=fparams["neighbor_radius"],
                             kernel_width=fparams["kernel_width"],
                             density_scale=fparams["density_scale"])

    adaptation = AdaptationMLP.__new__(AdaptationMLP)
    adaptation.net = load_mlp(j(dirpath, "model", "adaptation.pnml"))
    adaptation.agnostic_dim = adaptation.net.layers[0].in_dim - 3
    adaptation.feature_dim = adaptation.net.layers[-1].out_dim - 1
    head = RadianceHead.__new__(RadianceHead)
    head.trunk = load_mlp(j(dirpath, "model", "trunk.pnml"))
    head.sigma = load_mlp(j(dirpath, "model", "sigma.pnml"))
    head.color = load_mlp(j(dirpath, "model", "color.pnml"))
    head.feature_dim = adaptation.feature_dim
    head.appearance_dim = APPEARANCE_DIM
    appearance = AppearanceTable(
        np.atleast_2d(load_image_f32(j(dirpath, "model", "appearance.pnim"))))
    model = SceneModel(adaptation, head, appearance)

    cameras = load_cameras(j(dirpath, "cameras.txt"))
    ref_poses = load_poses(j(dirpath, "ref_poses.txt"))
    query_poses = load_poses(j(dirpath, "query_poses.txt"))

    references = []
    for i, pose in enumerate(ref_poses):
        references.append(ReferenceView(
            camera=cameras[0], pose=pose,
            image=load_image_f32(j(dirpath, "refs", f"{i:03d}.pnim")),
            depth=load_depth(j(dirpath, "refs", f"{i:03d}.pndp")),
            appearance_id=meta["reference_appearance_ids"][i],
            t_near=meta["t_near"], t_far=meta["t_far"]))

    queries = []
    for i, pose in enumerate(query_poses):
        kp_raw = load_image_f32(j(dirpath, "queries", f"{i:03d}.kp.pnim"))
        kps = QueryKeypoints(
            pixels=kp_raw[:, :2],
            descriptors=load_image_f32(j(dirpath, "queries",
                                         f"{i:03d}.kpdesc.pnim")),
            point_indices=kp_raw[:, 2].astype(int))
        mask_path = j(dirpath, "queries", f"{i:03d}.pnmk")
        queries.append(QueryView(
            camera=cameras[1 + i], gt_pose=pose,
            image=load_image_f32(j(dirpath, "queries", f"{i:03d}.pnim")),
            keypoints=kps, render_seed=meta["query_render_seeds"][i],
            mask=load_mask(mask_path) if os.path.exists(mask_path) else None))

    obs_raw = load_image_f32(j(dirpath, "observations.pnim"))
    observations = PointObservations(
        descriptors=pfield.descriptors, positions=obs_raw[:, :3],
        colors=obs_raw[:, 3:6], view_dirs=obs_raw[:, 6:9],
        appearance_ids=obs_raw[:, 9].astype(int))

    return SceneBundle(config=config, field=pfield, model=model,
                       observations=observations, references=references,
                       queries=queries, t_near=meta["t_near"],
                       t_far=meta["t_far"])
