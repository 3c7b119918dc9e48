"""Command-line driver.

Commands: build-scene, train-adapt, render, localize, eval, sweep-score,
ablate.  All randomness is seeded; rerunning a command with the same
seeds reproduces results.csv / metrics.json byte for byte.  Wall-clock
values never enter those files; they go to timings.json (and the
human-readable report.md).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .formats import (
    pose_from_line,
    save_depth,
    save_image_f32,
    save_mlp,
    save_png,
)
from .geometry import Pose
from .localizer import RansacConfig
from .metrics import LocalizationResult, MetricsReport, compute_metrics
from .pipeline import (
    ABLATION_MODES,
    PipelineConfig,
    ablate,
    pipeline_hash,
    run_pipeline,
    sweep_score_threshold,
)
from .renderer import RaySamplerConfig, render_view
from .sceneio import SyntheticSceneConfig, generate_scene, load_bundle, save_bundle
from .warp import RefineConfig

_F = "%.17g"


def _fmt(x):
    if x is None:
        return ""
    return _F % x


def _pose_cols(pose):
    if pose is None:
        return [""] * 7
    from .formats import pose_to_line
    return pose_to_line(pose).split()

RESULT_HEADER = (
    "query_id,status,"
    + ",".join(f"s1_{c}" for c in ("qw", "qx", "qy", "qz", "tx", "ty", "tz")) + ","
    + ",".join(f"ref_{c}" for c in ("qw", "qx", "qy", "qz", "tx", "ty", "tz")) + ","
    + ",".join(f"gt_{c}" for c in ("qw", "qx", "qy", "qz", "tx", "ty", "tz")) + ","
    + "t1_err_m,r1_err_deg,t_err_m,r_err_deg")


def results_to_csv(results):
    lines = [RESULT_HEADER]
    for r in results:
        cols = [str(r.query_id), r.status]
        cols += _pose_cols(r.stage1_pose)
        cols += _pose_cols(r.refined_pose)
        cols += _pose_cols(r.gt_pose)
        cols += [_fmt(r.stage1_translation_err_m), _fmt(r.stage1_rotation_err_deg),
                 _fmt(r.translation_err_m), _fmt(r.rotation_err_deg)]
        lines.append(",".join(cols))
    return "\n".join(lines) + "\n"


def results_from_csv(text):
    lines = [l for l in text.strip().split("\n")[1:] if l]
    results = []
    for line in lines:
        cols = line.split(",")
        r = LocalizationResult(query_id=int(cols[0]), status=cols[1])

        def pose_of(cells):
            if any(c == "" for c in cells):
                return None
            return pose_from_line(" ".join(cells))

        r.stage1_pose = pose_of(cols[2:9])
        r.refined_pose = pose_of(cols[9:16])
        r.gt_pose = pose_of(cols[16:23])
        vals = [float(c) if c else None for c in cols[23:27]]
        (r.stage1_translation_err_m, r.stage1_rotation_err_deg,
         r.translation_err_m, r.rotation_err_deg) = vals
        results.append(r)
    return results


def write_metrics(out_dir, report: MetricsReport):
    with open(os.path.join(out_dir, "metrics.json"), "w") as f:
        json.dump(report.deterministic_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "timings.json"), "w") as f:
        json.dump({"mean_stage_times_s": report.mean_stage_times_s}, f,
                  indent=2, sort_keys=True)
        f.write("\n")


def write_report_md(out_dir, report: MetricsReport, title="Localization run"):
    md = [f"# {title}", ""]
    md.append(f"- queries: {report.n_queries} "
              f"(success {report.n_success}, failed {report.n_failed})")
    if report.median_translation_m is not None:
        md.append(f"- median translation error: "
                  f"{report.median_translation_m * 100:.4f} cm")
        md.append(f"- median rotation error: "
                  f"{report.median_rotation_deg:.4f} deg")
        md.append(f"- recall@(5cm, 5deg): {report.recall_at_5cm_5deg:.3f}")
        md.append(f"- recall@(0.5% diameter, 0.1deg): {report.recall_tight:.3f}")
    md.append(f"- scene diameter: {report.scene_diameter_m:.3f} m")
    md.append(f"- config hash: {report.config_hash}")
    for stage, t in report.mean_stage_times_s.items():
        md.append(f"- mean {stage} time: {t:.4f} s")
    with open(os.path.join(out_dir, "report.md"), "w") as f:
        f.write("\n".join(md) + "\n")


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out-dir", default="out")


def _pipeline_config(args) -> PipelineConfig:
    ransac = RansacConfig(max_iterations=args.ransac_iters,
                          inlier_threshold_px=args.inlier_px)
    refine = RefineConfig(n_samples=args.refine_samples,
                          iterations=args.refine_iters, lr=args.lr,
                          rerender_policy=("every_k" if args.rerender_every > 0
                                           else "once"),
                          rerender_every=max(args.rerender_every, 1),
                          use_blank_mask=not args.no_blank_mask)
    return PipelineConfig(score_threshold=args.score_threshold,
                          ransac=ransac, refine=refine,
                          refine_enabled=not args.no_refine,
                          photometric_baseline=args.photometric_baseline,
                          n_samples_per_ray=args.samples_per_ray,
                          seed=args.seed, threads=args.threads)


def _add_pipeline_flags(p):
    p.add_argument("--score-threshold", type=float, default=0.7)
    p.add_argument("--ransac-iters", type=int, default=20000)
    p.add_argument("--inlier-px", type=float, default=3.0)
    p.add_argument("--refine-iters", type=int, default=250)
    p.add_argument("--refine-samples", type=int, default=2048)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--rerender-every", type=int, default=0,
                   help="re-render the reference every K iterations (0: once)")
    p.add_argument("--no-blank-mask", action="store_true")
    p.add_argument("--photometric-baseline", action="store_true")
    p.add_argument("--no-refine", action="store_true")
    p.add_argument("--samples-per-ray", type=int, default=None)
    p.add_argument("--dump-renders", action="store_true")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="pointloc",
        description="Visual localization on a neural point field")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-scene", help="generate a synthetic scene bundle")
    p.add_argument("--kind", default="checkerboard_room")
    p.add_argument("--points", type=int, default=5000)
    p.add_argument("--queries", type=int, default=10)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--train-steps", type=int, default=800)
    p.add_argument("--keypoint-noise-px", type=float, default=0.7)
    p.add_argument("--unreliable-fraction", type=float, default=0.0)
    p.add_argument("--png-previews", action="store_true")
    _add_common(p)

    p = sub.add_parser("train-adapt", help="retrain the adaptation MLP")
    p.add_argument("--scene", required=True)
    p.add_argument("--steps", type=int, default=800)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--objective", default="proxy_color",
                   choices=["proxy_color", "full_render"])
    p.add_argument("--out", default="model.pnml")
    _add_common(p)

    p = sub.add_parser("render", help="render a view of a scene bundle")
    p.add_argument("--scene", required=True)
    p.add_argument("--query-index", type=int, default=None,
                   help="render at this query's ground-truth pose")
    p.add_argument("--pose", default=None,
                   help="'qw qx qy qz tx ty tz' world-to-camera")
    p.add_argument("--samples-per-ray", type=int, default=None)
    p.add_argument("--near", type=float, default=None)
    p.add_argument("--far", type=float, default=None)
    p.add_argument("--out-prefix", default="render")
    _add_common(p)

    p = sub.add_parser("localize", help="run the two-stage pipeline")
    p.add_argument("--scene", required=True)
    _add_pipeline_flags(p)
    _add_common(p)

    p = sub.add_parser("eval", help="recompute metrics from results.csv")
    p.add_argument("--scene", required=True)
    p.add_argument("--results", required=True)
    _add_common(p)

    p = sub.add_parser("sweep-score", help="score-threshold sweep")
    p.add_argument("--scene", required=True)
    p.add_argument("--thresholds", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7")
    _add_pipeline_flags(p)
    _add_common(p)

    p = sub.add_parser("ablate", help="run ablation modes and compare")
    p.add_argument("--scene", required=True)
    p.add_argument("--modes", default=",".join(ABLATION_MODES))
    p.add_argument("--photometric-iters", type=int, default=15)
    _add_pipeline_flags(p)
    _add_common(p)

    args = parser.parse_args(argv)
    os.makedirs(args.out_dir, exist_ok=True)
    return COMMANDS[args.command](args)


def cmd_build_scene(args):
    config = SyntheticSceneConfig(
        kind=args.kind, point_count=args.points, n_queries=args.queries,
        image_size=args.image_size, train_steps=args.train_steps,
        keypoint_noise_px=args.keypoint_noise_px,
        unreliable_fraction=args.unreliable_fraction, rng_seed=args.seed)
    bundle = generate_scene(config)
    save_bundle(args.out_dir, bundle, png_previews=args.png_previews)
    print(f"scene bundle written to {args.out_dir} "
          f"({len(bundle.field)} points, {len(bundle.queries)} queries)")
    return 0


def cmd_train_adapt(args):
    from .adaptation import TrainConfig, train_adaptation, refresh_field_features
    bundle = load_bundle(args.scene)
    cfg = TrainConfig(learning_rate=args.lr, steps=args.steps,
                      objective=args.objective, rng_seed=args.seed)
    model, history = train_adaptation(bundle.field, bundle.observations, cfg,
                                      model=bundle.model,
                                      reference_views=bundle.references)
    refresh_field_features(bundle.field, model, bundle.observations)
    save_mlp(args.out, model.adaptation.net)
    print(f"final loss {history[-1].total:.6g} -> {args.out}")
    return 0


def cmd_render(args):
    bundle = load_bundle(args.scene)
    if args.pose is not None:
        pose = pose_from_line(args.pose)
    elif args.query_index is not None:
        pose = bundle.queries[args.query_index].gt_pose
    else:
        pose = bundle.references[0].pose
    sampler = RaySamplerConfig(
        t_near=args.near or bundle.t_near, t_far=args.far or bundle.t_far,
        n_samples=args.samples_per_ray or bundle.config.n_samples_per_ray,
        mode="stratified", rng_seed=args.seed)
    view = render_view(bundle.field, bundle.camera, pose, sampler,
                       bundle.model, appearance_id=0)
    prefix = os.path.join(args.out_dir, args.out_prefix)
    save_png(prefix + ".png", view.color)
    save_image_f32(prefix + ".pnim", view.color)
    save_depth(prefix + ".pndp", view.depth)
    print(f"rendered {prefix}.png ({view.valid_mask.mean()*100:.1f}% valid)")
    return 0


def _dump_run(args, bundle, results, config):
    report = compute_metrics(results, bundle.field.scene_diameter,
                             pipeline_hash(bundle, config))
    with open(os.path.join(args.out_dir, "results.csv"), "w") as f:
        f.write(results_to_csv(results))
    with open(os.path.join(args.out_dir, "run_config.json"), "w") as f:
        json.dump({"pipeline": config.to_dict(),
                   "scene_diameter": bundle.field.scene_diameter,
                   "config_hash": pipeline_hash(bundle, config)},
                  f, indent=2, sort_keys=True, default=str)
        f.write("\n")
    write_metrics(args.out_dir, report)
    write_report_md(args.out_dir, report)
    return report


def cmd_localize(args):
    bundle = load_bundle(args.scene)
    config = _pipeline_config(args)
    results = run_pipeline(bundle, config)
    report = _dump_run(args, bundle, results, config)
    if args.dump_renders:
        for r in results:
            if r.final_pose is None:
                continue
            sampler = RaySamplerConfig(bundle.t_near, bundle.t_far,
                                       config.n_samples_per_ray
                                       or bundle.config.n_samples_per_ray,
                                       "stratified", args.seed)
            view = render_view(bundle.field, bundle.queries[r.query_id].camera,
                               r.final_pose, sampler, bundle.model, 0)
            side = np.concatenate([bundle.queries[r.query_id].image,
                                   view.color], axis=1)
            save_png(os.path.join(args.out_dir,
                                  f"query_{r.query_id:03d}_side_by_side.png"),
                     side)
    ok = report.n_success
    print(f"{ok}/{report.n_queries} queries localized; "
          f"median {report.median_translation_m} m / "
          f"{report.median_rotation_deg} deg; outputs in {args.out_dir}")
    return 0


def cmd_eval(args):
    bundle = load_bundle(args.scene)
    with open(args.results) as f:
        results = results_from_csv(f.read())
    run_config_path = os.path.join(os.path.dirname(args.results),
                                   "run_config.json")
    cfg_hash = ""
    if os.path.exists(run_config_path):
        with open(run_config_path) as f:
            cfg_hash = json.load(f).get("config_hash", "")
    report = compute_metrics(results, bundle.field.scene_diameter, cfg_hash)
    write_metrics(args.out_dir, report)
    write_report_md(args.out_dir, report, title="Regenerated report")
    print(f"metrics regenerated into {args.out_dir}")
    return 0


def cmd_sweep_score(args):
    bundle = load_bundle(args.scene)
    thresholds = [float(t) for t in args.thresholds.split(",")]
    config = _pipeline_config(args)
    rows = sweep_score_threshold(bundle, thresholds, config)
    det_lines = ["threshold,candidates,mean_matches,recall_tight,"
                 "median_t_m,median_r_deg"]
    timing = {}
    for row in rows:
        det_lines.append(
            f"{row.threshold:g},{row.candidate_count},{row.mean_matches:g},"
            f"{_fmt(row.recall_tight)},{_fmt(row.median_translation_m)},"
            f"{_fmt(row.median_rotation_deg)}")
        timing[f"{row.threshold:g}"] = row.match_time_s
    with open(os.path.join(args.out_dir, "sweep.csv"), "w") as f:
        f.write("\n".join(det_lines) + "\n")
    with open(os.path.join(args.out_dir, "sweep_timings.json"), "w") as f:
        json.dump({"match_time_s": timing}, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"sweep over {len(rows)} thresholds written to {args.out_dir}")
    return 0


def cmd_ablate(args):
    bundle = load_bundle(args.scene)
    config = _pipeline_config(args)
    modes = [m for m in args.modes.split(",") if m]
    out = ablate(bundle, modes, config,
                 photometric_iterations=args.photometric_iters)
    lines = ["mode,iterations,median_t_m,median_r_deg,recall_tight"]
    md = ["# Ablation", "", "| mode | iters | median t (m) | median r (deg) "
          "| recall | mean refine (s) |", "|---|---|---|---|---|---|"]
    timing = {}
    for mode, entry in out.items():
        rep = entry["report"]
        refine_t = rep.mean_stage_times_s.get("refine", 0.0)
        lines.append(f"{mode},{entry['iterations']},"
                     f"{_fmt(rep.median_translation_m)},"
                     f"{_fmt(rep.median_rotation_deg)},"
                     f"{_fmt(rep.recall_tight)}")
        timing[mode] = {"iterations": entry["iterations"],
                        "mean_refine_s": refine_t}
        md.append(f"| {mode} | {entry['iterations']} "
                  f"| {rep.median_translation_m} | {rep.median_rotation_deg} "
                  f"| {rep.recall_tight} | {refine_t:.4f} |")
    with open(os.path.join(args.out_dir, "ablate.csv"), "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(os.path.join(args.out_dir, "ablate_timings.json"), "w") as f:
        json.dump(timing, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(args.out_dir, "ablate.md"), "w") as f:
        f.write("\n".join(md) + "\n")
    print(f"ablation table written to {args.out_dir}")
    return 0


COMMANDS = {
    "build-scene": cmd_build_scene,
    "train-adapt": cmd_train_adapt,
    "render": cmd_render,
    "localize": cmd_localize,
    "eval": cmd_eval,
    "sweep-score": cmd_sweep_score,
    "ablate": cmd_ablate,
}


if __name__ == "__main__":
    sys.exit(main())
