"""Volumetric renderer: sampling, radiance regression, compositing, losses."""

import numpy as np
import pytest

from pointloc.adaptation import AppearanceTable, RadianceHead, SceneModel, AdaptationMLP
from pointloc.errors import DimensionMismatch, EmptyMaskWarning
from pointloc.geometry import Camera, Pose
from pointloc.pointfield import build_field
from pointloc.renderer import (
    DEPTH_BLANK_THRESHOLD,
    RadianceSample,
    RaySamplerConfig,
    RenderedView,
    aggregation_weights,
    composite_color,
    composite_depth,
    compositing_weights,
    deltas_for,
    regress_radiance,
    render_loss,
    render_view,
    sample_ray,
    sample_rays_batch,
)
from pointloc.rng import Stream


def plane_scene(seed=0, n_side=21, z=2.0):
    """A textured plane of points facing the camera at the origin."""
    g = np.linspace(-1.0, 1.0, n_side)
    xx, yy = np.meshgrid(g, g)
    pos = np.stack([xx.ravel(), yy.ravel(), np.full(xx.size, z)], axis=1)
    stream = Stream(seed, "plane")
    desc = stream.normal((len(pos), 128))
    field = build_field(pos, desc)
    model = SceneModel(AdaptationMLP(stream=stream.split("a")),
                       RadianceHead(stream=stream.split("h")),
                       AppearanceTable(np.zeros((1, 8))))
    field.features[:] = stream.normal((len(pos), 32)) * 0.5
    return field, model


CAM = Camera(fx=40.0, fy=40.0, cx=16.0, cy=16.0, width=32, height=32)


# -- ray sampling ---------------------------------------------------------------

def test_uniform_sampling_endpoints_and_midpoint():
    cfg = RaySamplerConfig(t_near=1.0, t_far=2.0, n_samples=3, mode="uniform")
    assert np.allclose(sample_ray(cfg), [1.0, 1.5, 2.0])


def test_stratified_sequence_regression_locked():
    cfg = RaySamplerConfig(t_near=1.0, t_far=2.0, n_samples=5,
                           mode="stratified", rng_seed=123)
    want = [1.1059856741297815, 1.2895177425822892, 1.4105287462458704,
            1.6111667315308043, 1.8370016501793223]
    assert np.allclose(sample_ray(cfg, pixel_index=7), want, atol=0, rtol=0)


def test_stratified_samples_stay_in_bins():
    cfg = RaySamplerConfig(t_near=0.5, t_far=4.5, n_samples=16,
                           mode="stratified", rng_seed=9)
    width = 4.0 / 16
    for pix in range(625):
        ts = sample_ray(cfg, pixel_index=pix)
        bins = 0.5 + np.arange(16) * width
        assert np.all(ts >= bins) and np.all(ts < bins + width)
        assert np.all(np.diff(ts) > 0)


def test_batch_sampling_matches_scalar():
    cfg = RaySamplerConfig(t_near=0.1, t_far=3.0, n_samples=8,
                           mode="stratified", rng_seed=4)
    batch = sample_rays_batch(cfg, 50)
    for pix in range(50):
        assert np.array_equal(batch[pix], sample_ray(cfg, pixel_index=pix))


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        RaySamplerConfig(t_near=2.0, t_far=1.0)
    with pytest.raises(ValueError):
        RaySamplerConfig(t_near=1.0, t_far=2.0, n_samples=1)


# -- radiance regression ----------------------------------------------------------

def test_regress_no_neighbors_is_free_space():
    field, model = plane_scene()
    sigma, color = regress_radiance(np.array([0.0, 0.0, -5.0]),
                                    np.array([0.0, 0.0, 1.0]), field, model)
    assert sigma == 0.0
    assert np.array_equal(color, np.zeros(3))


def test_aggregation_single_neighbor_weight_one():
    field = build_field(np.array([[0.0, 0.0, 2.0], [10.0, 0, 0]]),
                        confidences=np.array([1.0, 1.0]), neighbor_radius=1.0)
    idx, w = aggregation_weights(field, np.array([0.0, 0.0, 2.0]), k=8)
    assert idx.tolist() == [0]
    assert w[0] == pytest.approx(1.0)


def test_aggregation_equidistant_equal_confidence_half_half():
    field = build_field(np.array([[1.0, 0, 0], [-1.0, 0, 0]]),
                        confidences=np.array([0.8, 0.8]),
                        neighbor_radius=3.0)
    idx, w = aggregation_weights(field, np.zeros(3), k=8)
    assert len(w) == 2
    assert np.allclose(w, 0.5)


# -- compositing ------------------------------------------------------------------

def longdouble_oracle(ts, sigmas, colors, t_far):
    """Sequential front-to-back quadrature in 80-bit floats."""
    ld = np.longdouble
    T = ld(1.0)
    out = np.zeros(3, dtype=np.longdouble)
    depth = ld(0.0)
    K = len(ts)
    for k in range(K):
        delta = ld(ts[k + 1] - ts[k]) if k + 1 < K else ld(t_far - ts[k])
        od = ld(sigmas[k]) * delta
        alpha = ld(1.0) - np.exp(-od)
        w = T * alpha
        out += w * colors[k].astype(np.longdouble)
        depth += w * ld(ts[k])
        T *= np.exp(-od)
    return out, depth


def random_samples(stream, n=64, t_lo=0.5, t_hi=5.0):
    ts = np.sort(stream.uniform(n, t_lo, t_hi))
    sigmas = stream.uniform(n, 0.0, 8.0)
    colors = stream.uniform((n, 3))
    return ts, sigmas, colors


def test_all_zero_density_black_and_transparent():
    samples = [RadianceSample(t, 0.0, np.zeros(3)) for t in (1.0, 1.5, 2.0)]
    assert np.array_equal(composite_color(samples, 3.0), np.zeros(3))
    assert composite_depth(samples, 3.0) == 0.0
    w = compositing_weights(np.zeros(3), np.ones(3))
    assert np.array_equal(w, np.zeros(3))


def test_opaque_first_sample_saturates():
    c0 = np.array([0.3, 0.6, 0.9])
    samples = [RadianceSample(1.5, 20.0, c0),
               RadianceSample(2.5, 5.0, np.array([1.0, 0.0, 0.0]))]
    got = composite_color(samples, 3.0)
    assert np.max(np.abs(got - c0)) < 1e-8
    assert composite_depth(samples, 3.0) == pytest.approx(1.5, abs=1e-8)


def test_composite_matches_extended_precision_oracle():
    assert np.finfo(np.longdouble).eps < 1e-17  # the oracle needs real extended precision
    stream = Stream(50, "quad")
    worst = 0.0
    for _ in range(200):
        ts, sigmas, colors = random_samples(stream)
        samples = [RadianceSample(t, s, c) for t, s, c in zip(ts, sigmas, colors)]
        got_c = composite_color(samples, 5.5)
        got_d = composite_depth(samples, 5.5)
        want_c, want_d = longdouble_oracle(ts, sigmas, colors, 5.5)
        scale_c = max(float(np.max(np.abs(want_c))), 1e-30)
        worst = max(worst, float(np.max(np.abs(got_c - want_c.astype(float)))) / scale_c)
        worst = max(worst, abs(got_d - float(want_d)) / max(float(want_d), 1e-30))
    assert worst < 1e-10


def test_weights_nonnegative_sum_at_most_one():
    stream = Stream(51)
    for _ in range(200):
        ts, sigmas, _ = random_samples(stream, n=32)
        w = compositing_weights(sigmas, deltas_for(ts, 6.0))
        assert np.all(w >= 0)
        assert np.sum(w) <= 1.0 + 1e-12


def test_monotone_opacity_in_any_single_density():
    stream = Stream(52)
    for _ in range(50):
        ts, sigmas, _ = random_samples(stream, n=16)
        deltas = deltas_for(ts, 6.0)
        base = np.sum(compositing_weights(sigmas, deltas))
        k = int(stream.integers(16))
        bumped = sigmas.copy()
        bumped[k] += 1.0
        assert np.sum(compositing_weights(bumped, deltas)) >= base - 1e-12


def test_depth_within_near_far_bounds():
    stream = Stream(53)
    for _ in range(100):
        ts, sigmas, colors = random_samples(stream, n=24, t_lo=1.0, t_hi=4.0)
        samples = [RadianceSample(t, s, c) for t, s, c in zip(ts, sigmas, colors)]
        d = composite_depth(samples, 4.0)
        w = compositing_weights(sigmas, deltas_for(ts, 4.0))
        assert 1.0 * np.sum(w) - 1e-12 <= d <= 4.0 + 1e-12
        c = composite_color(samples, 4.0)
        assert np.all(c >= 0) and np.all(c <= 1.0 + 1e-12)


# -- full view rendering -----------------------------------------------------------

def render_cfg(seed=0, n=64):
    return RaySamplerConfig(t_near=0.5, t_far=4.0, n_samples=n,
                            mode="stratified", rng_seed=seed)


def test_render_far_field_all_blank():
    # no point anywhere near the frustum behaves like empty space
    field = build_field(np.array([[500.0, 500.0, 500.0]]))
    _, model = plane_scene()
    view = render_view(field, CAM, Pose.identity(), render_cfg(), model)
    assert not view.valid_mask.any()
    assert np.array_equal(view.color, np.zeros((32, 32, 3)))
    assert np.array_equal(view.depth, np.zeros((32, 32)))


def test_render_deterministic():
    field, model = plane_scene()
    v1 = render_view(field, CAM, Pose.identity(), render_cfg(seed=3), model)
    v2 = render_view(field, CAM, Pose.identity(), render_cfg(seed=3), model)
    assert np.array_equal(v1.color, v2.color)
    assert np.array_equal(v1.depth, v2.depth)


def test_render_mostly_valid_and_depth_near_plane():
    field, model = plane_scene()
    view = render_view(field, CAM, Pose.identity(), render_cfg(seed=1), model)
    assert view.valid_mask.mean() > 0.95
    center_depth = view.depth[16, 16]
    assert abs(center_depth - 2.0) < 0.1


def test_render_equals_per_pixel_scalar_pipeline():
    field, model = plane_scene(n_side=11)
    small_cam = Camera(fx=12.0, fy=12.0, cx=4.0, cy=4.0, width=8, height=8)
    cfg = render_cfg(seed=7, n=32)
    view = render_view(field, small_cam, Pose.identity(), cfg, model)

    from pointloc.geometry import rays_for_camera
    origin, dirs = rays_for_camera(small_cam, Pose.identity())
    for pix in range(64):
        ts = sample_ray(cfg, pixel_index=pix)
        samples = []
        for t in ts:
            x = origin + t * dirs[pix]
            sigma, color = regress_radiance(x, dirs[pix], field, model,
                                            appearance=None)
            samples.append(RadianceSample(t, sigma, np.clip(color, 0, 1)))
        want_c = composite_color(samples, cfg.t_far)
        want_d = composite_depth(samples, cfg.t_far)
        r, c = divmod(pix, 8)
        assert np.max(np.abs(view.color[r, c] - want_c)) < 1e-12
        assert abs(view.depth[r, c] - want_d) < 1e-12


def test_valid_mask_threshold_semantics():
    field, model = plane_scene()
    view = render_view(field, CAM, Pose.identity(), render_cfg(seed=2), model)
    assert np.array_equal(view.valid_mask, view.depth >= DEPTH_BLANK_THRESHOLD)


# -- render loss ---------------------------------------------------------------

def make_view(color, depth):
    cam = Camera(fx=2.0, fy=2.0, cx=1.0, cy=1.0, width=color.shape[1],
                 height=color.shape[0])
    return RenderedView(color=color, depth=depth, render_pose=Pose.identity(),
                        camera=cam)


def test_render_loss_zero_on_match():
    color = Stream(60).uniform((4, 4, 3))
    view = make_view(color, np.full((4, 4), 1.0))
    assert render_loss(view, color) == 0.0


def test_render_loss_empty_mask_warns():
    color = np.zeros((2, 2, 3))
    view = make_view(color, np.ones((2, 2)))
    with pytest.warns(EmptyMaskWarning):
        loss = render_loss(view, color, mask=np.zeros((2, 2), dtype=bool))
    assert loss == 0.0


def test_render_loss_hand_computed_2x2():
    # residuals chosen so the sum is easy to do by hand:
    # pixel (0,0): diff (0.1,0,0) -> 0.01 ; pixel (0,1): diff (0,0.2,0) -> 0.04
    # pixel (1,0) is blank (depth 0) and must be excluded
    # pixel (1,1): diff (0.3,0.3,0.3) -> 0.27 ; total = 0.32
    color = np.zeros((2, 2, 3))
    target = np.zeros((2, 2, 3))
    target[0, 0, 0] = 0.1
    target[0, 1, 1] = 0.2
    target[1, 0] = 0.9  # excluded: blank
    target[1, 1] = 0.3
    depth = np.array([[1.0, 1.0], [0.0, 1.0]])
    view = make_view(color, depth)
    assert render_loss(view, target) == pytest.approx(0.32, abs=1e-12)


def test_render_loss_dimension_mismatch():
    view = make_view(np.zeros((2, 2, 3)), np.ones((2, 2)))
    with pytest.raises(DimensionMismatch):
        render_loss(view, np.zeros((3, 2, 3)))


def test_render_loss_mask_restricts():
    color = np.zeros((2, 2, 3))
    target = np.full((2, 2, 3), 0.5)
    view = make_view(color, np.ones((2, 2)))
    mask = np.array([[True, False], [False, False]])
    assert render_loss(view, target, mask) == pytest.approx(3 * 0.25)
