"""End-to-end localization runs, threshold sweeps, and ablations."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from .errors import NoConsensus, NoMatches, TooFewValid
from .geometry import Pose
from .localizer import (
    Keypoint,
    RansacConfig,
    match_features,
    ransac_pnp,
)
from .metrics import LocalizationResult, MetricsReport, compute_metrics, config_hash
from .pointfield import filter_by_score
from .errors import AllFiltered
from .renderer import RaySamplerConfig, render_view
from .rng import derive_key
from .sceneio import SceneBundle
from .warp import (
    RefineConfig,
    WarpProblem,
    photometric_refine_baseline,
    refine_pose,
    select_valid_samples,
)


@dataclass
class PipelineConfig:
    score_threshold: float = 0.7
    similarity_floor: float = 0.8
    mutual_check: bool = True
    ransac: RansacConfig = field(default_factory=RansacConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    refine_enabled: bool = True
    photometric_baseline: bool = False
    n_samples_per_ray: Optional[int] = None  # None: bundle default
    seed: int = 0
    threads: int = 1

    def to_dict(self):
        return asdict(self)


def _sampler_for(bundle: SceneBundle, config: PipelineConfig, seed):
    n = config.n_samples_per_ray or bundle.config.n_samples_per_ray
    return RaySamplerConfig(t_near=bundle.t_near, t_far=bundle.t_far,
                            n_samples=n, mode=bundle.config.sampler_mode,
                            rng_seed=seed)


def localize_query(bundle: SceneBundle, query_index: int,
                   config: PipelineConfig) -> LocalizationResult:
    """Match -> RANSAC PnP -> render reference -> warp refinement."""
    query = bundle.queries[query_index]
    result = LocalizationResult(query_id=query_index, gt_pose=query.gt_pose)
    keypoints = [Keypoint(px, d) for px, d in zip(query.keypoints.pixels,
                                                  query.keypoints.descriptors)]

    t0 = time.perf_counter()
    try:
        corrs = match_features(keypoints, bundle.field, config.score_threshold,
                               similarity_floor=config.similarity_floor,
                               mutual=config.mutual_check)
    except NoMatches:
        result.status = "no_matches"
        return result
    result.timings_s["match"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    ransac_cfg = replace(config.ransac,
                         rng_seed=int(derive_key(config.seed, "ransac",
                                                 query_index)) & 0x7FFFFFFF)
    try:
        estimate = ransac_pnp(corrs, query.camera, ransac_cfg)
    except NoConsensus:
        result.status = "no_consensus"
        return result
    result.stage1_pose = estimate.pose
    result.timings_s["ransac"] = time.perf_counter() - t0

    if not config.refine_enabled:
        result.status = "ok"
        result.fill_errors()
        return result

    render_seed = int(derive_key(config.seed, "refine-render", query_index))
    sampler = _sampler_for(bundle, config, render_seed)

    if config.photometric_baseline:
        t0 = time.perf_counter()

        def render_at(pose):
            return render_view(bundle.field, query.camera, pose, sampler,
                               bundle.model, appearance_id=0)

        refined = photometric_refine_baseline(render_at, query.image,
                                               estimate.pose, config.refine,
                                               query_mask=query.mask)
        result.timings_s["refine"] = time.perf_counter() - t0
        if refined.status in ("ok", "diverged"):
            result.refined_pose = refined.pose
        result.status = ("ok" if refined.status == "ok"
                         else f"refine_{refined.status}")
        result.fill_errors()
        return result

    t0 = time.perf_counter()
    reference = render_view(bundle.field, query.camera, estimate.pose, sampler,
                            bundle.model, appearance_id=0)
    result.timings_s["render"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        pixels = select_valid_samples(reference, config.refine.n_samples,
                                      int(derive_key(config.seed, "samples",
                                                     query_index)),
                                      depth_min=config.refine.depth_min,
                                      use_blank_mask=config.refine.use_blank_mask)
    except TooFewValid:
        result.status = "refine_skipped_too_few_valid"
        result.fill_errors()
        return result

    problem = WarpProblem(query_image=query.image, reference=reference,
                          camera=query.camera, sample_pixels=pixels,
                          query_mask=query.mask)

    def rerender(pose):
        return render_view(bundle.field, query.camera, pose, sampler,
                           bundle.model, appearance_id=0)

    refined = refine_pose(problem, config.refine,
                          rerender=rerender if
                          config.refine.rerender_policy == "every_k" else None)
    result.timings_s["refine"] = time.perf_counter() - t0
    if refined.status == "ok":
        result.refined_pose = refined.pose
        result.status = "ok"
    else:
        result.status = f"refine_{refined.status}"
    result.fill_errors()
    return result


def run_pipeline(bundle: SceneBundle, config: PipelineConfig
                 ) -> List[LocalizationResult]:
    """All queries; per-query failures are captured, never raised."""
    indices = range(len(bundle.queries))
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(
                lambda i: localize_query(bundle, i, config), indices))
    else:
        results = [localize_query(bundle, i, config) for i in indices]
    return sorted(results, key=lambda r: r.query_id)


def pipeline_hash(bundle: SceneBundle, config: PipelineConfig) -> str:
    payload = {"pipeline": config.to_dict(),
               "scene": asdict(bundle.config)}
    return config_hash(payload)


def run_and_report(bundle: SceneBundle, config: PipelineConfig):
    results = run_pipeline(bundle, config)
    report = compute_metrics(results, bundle.field.scene_diameter,
                             pipeline_hash(bundle, config))
    return results, report


# -- score-threshold sweep -------------------------------------------------------


@dataclass
class SweepRow:
    threshold: float
    candidate_count: int
    mean_matches: float
    match_time_s: float
    recall_tight: Optional[float]
    median_translation_m: Optional[float]
    median_rotation_deg: Optional[float]


def sweep_score_threshold(bundle: SceneBundle, thresholds,
                          config: Optional[PipelineConfig] = None,
                          timing_repeats=3) -> List[SweepRow]:
    """Stage-1 localization quality and matching cost per score threshold.

    Matching wall time is the minimum over `timing_repeats` repeats of
    the filter+match step, which keeps the measurement stable without
    touching the deterministic outputs.
    """
    config = config or PipelineConfig(refine_enabled=False)
    rows = []
    for s_t in thresholds:
        try:
            filtered = filter_by_score(bundle.field, s_t)
            candidates = len(filtered)
        except AllFiltered:
            candidates = len(bundle.field)

        best_time = np.inf
        match_counts = []
        for rep in range(timing_repeats):
            t0 = time.perf_counter()
            counts = []
            for q in bundle.queries:
                kps = [Keypoint(px, d) for px, d in
                       zip(q.keypoints.pixels, q.keypoints.descriptors)]
                try:
                    corrs = match_features(kps, bundle.field, s_t,
                                           similarity_floor=config.similarity_floor,
                                           mutual=config.mutual_check)
                    counts.append(len(corrs))
                except NoMatches:
                    counts.append(0)
            best_time = min(best_time, time.perf_counter() - t0)
            match_counts = counts

        sweep_cfg = replace(config, score_threshold=s_t)
        results, report = run_and_report(bundle, sweep_cfg)
        rows.append(SweepRow(threshold=float(s_t), candidate_count=candidates,
                             mean_matches=float(np.mean(match_counts)),
                             match_time_s=float(best_time),
                             recall_tight=report.recall_tight,
                             median_translation_m=report.median_translation_m,
                             median_rotation_deg=report.median_rotation_deg))
    return rows


# -- ablation ---------------------------------------------------------------------

ABLATION_MODES = ("full", "no_refine", "no_blank_mask", "photometric_baseline")


def ablate(bundle: SceneBundle, modes=ABLATION_MODES,
           config: Optional[PipelineConfig] = None,
           photometric_iterations=15,
           photometric_queries=2):
    """One report per mode under shared seeds.

    The photometric baseline re-renders every step, so it (and a
    matching `full` probe used for the wall-time ratio) runs at
    `photometric_iterations` on a query subset; accuracy modes run the
    full budget.
    """
    config = config or PipelineConfig()
    out: Dict[str, dict] = {}
    for mode in modes:
        if mode == "full":
            cfg = config
            sub = bundle
        elif mode == "no_refine":
            cfg = replace(config, refine_enabled=False)
            sub = bundle
        elif mode == "no_blank_mask":
            cfg = replace(config,
                          refine=replace(config.refine, use_blank_mask=False))
            sub = bundle
        elif mode == "photometric_baseline":
            cfg = replace(config, photometric_baseline=True,
                          refine=replace(config.refine,
                                         iterations=photometric_iterations))
            sub = _subset(bundle, photometric_queries)
        else:
            raise ValueError(f"unknown ablation mode {mode!r}")
        results, report = run_and_report(sub, cfg)
        out[mode] = {"report": report, "results": results,
                     "iterations": cfg.refine.iterations
                     if mode != "no_refine" else 0}

    if "photometric_baseline" in out:
        # equal-iteration warping probe for the wall-time comparison
        probe_cfg = replace(config,
                            refine=replace(config.refine,
                                           iterations=photometric_iterations))
        probe_results, probe_report = run_and_report(
            _subset(bundle, photometric_queries), probe_cfg)
        out["full_probe"] = {"report": probe_report, "results": probe_results,
                             "iterations": photometric_iterations}
    return out


def _subset(bundle: SceneBundle, n) -> SceneBundle:
    sub = replace(bundle, queries=bundle.queries[:max(1, n)])
    return sub
