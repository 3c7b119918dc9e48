"""Pose error metrics and run reports."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .geometry import Pose

RECALL_TRANS_M = 0.05
RECALL_ROT_DEG = 5.0
TIGHT_DIAMETER_FRACTION = 0.005
TIGHT_ROT_DEG = 0.1


def rotation_error_deg(pose_a: Pose, pose_b: Pose) -> float:
    """Geodesic angle between the two rotations, in degrees, in [0, 180]."""
    cos_theta = (np.trace(pose_a.rotation.T @ pose_b.rotation) - 1.0) * 0.5
    return float(np.degrees(np.arccos(np.clip(cos_theta, -1.0, 1.0))))


def translation_error_m(pose_a: Pose, pose_b: Pose) -> float:
    """Distance between the two camera centers, meters."""
    return float(np.linalg.norm(pose_a.camera_center() - pose_b.camera_center()))


@dataclass
class LocalizationResult:
    query_id: int
    status: str = "ok"
    stage1_pose: Optional[Pose] = None
    refined_pose: Optional[Pose] = None
    gt_pose: Optional[Pose] = None
    stage1_translation_err_m: Optional[float] = None
    stage1_rotation_err_deg: Optional[float] = None
    translation_err_m: Optional[float] = None
    rotation_err_deg: Optional[float] = None
    timings_s: Dict[str, float] = field(default_factory=dict)

    @property
    def final_pose(self) -> Optional[Pose]:
        return self.refined_pose if self.refined_pose is not None else self.stage1_pose

    @property
    def success(self) -> bool:
        return self.stage1_pose is not None

    def fill_errors(self):
        if self.gt_pose is None:
            return
        if self.stage1_pose is not None:
            self.stage1_translation_err_m = translation_error_m(
                self.stage1_pose, self.gt_pose)
            self.stage1_rotation_err_deg = rotation_error_deg(
                self.stage1_pose, self.gt_pose)
        if self.final_pose is not None:
            self.translation_err_m = translation_error_m(self.final_pose,
                                                         self.gt_pose)
            self.rotation_err_deg = rotation_error_deg(self.final_pose,
                                                       self.gt_pose)


@dataclass
class MetricsReport:
    median_translation_m: Optional[float]
    median_rotation_deg: Optional[float]
    recall_at_5cm_5deg: Optional[float]
    recall_tight: Optional[float]
    n_queries: int
    n_success: int
    n_failed: int
    scene_diameter_m: float
    config_hash: str
    mean_stage_times_s: Dict[str, float] = field(default_factory=dict)

    def deterministic_dict(self):
        """Everything except wall-clock values, for byte-stable JSON."""
        return {
            "median_translation_m": self.median_translation_m,
            "median_rotation_deg": self.median_rotation_deg,
            "recall_at_5cm_5deg": self.recall_at_5cm_5deg,
            "recall_tight": self.recall_tight,
            "n_queries": self.n_queries,
            "n_success": self.n_success,
            "n_failed": self.n_failed,
            "scene_diameter_m": self.scene_diameter_m,
            "config_hash": self.config_hash,
            "tight_thresholds": {
                "translation_fraction_of_diameter": TIGHT_DIAMETER_FRACTION,
                "rotation_deg": TIGHT_ROT_DEG,
            },
        }


def config_hash(config_dict) -> str:
    canon = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def compute_metrics(results: List[LocalizationResult], scene_diameter,
                    cfg_hash="") -> MetricsReport:
    """Medians over successful queries; failures counted separately.

    Permutation-invariant over query order.
    """
    ok = [r for r in results if r.success and r.translation_err_m is not None]
    n_success = sum(1 for r in results if r.success)
    t_errs = np.array([r.translation_err_m for r in ok])
    r_errs = np.array([r.rotation_err_deg for r in ok])

    if len(ok):
        recall = float(np.mean((t_errs < RECALL_TRANS_M)
                               & (r_errs < RECALL_ROT_DEG)))
        tight_t = TIGHT_DIAMETER_FRACTION * scene_diameter
        tight = float(np.mean((t_errs < tight_t) & (r_errs < TIGHT_ROT_DEG)))
        med_t = float(np.median(t_errs))
        med_r = float(np.median(r_errs))
    else:
        recall = tight = med_t = med_r = None

    times: Dict[str, List[float]] = {}
    for r in results:
        for k, val in r.timings_s.items():
            times.setdefault(k, []).append(val)
    mean_times = {k: float(np.mean(v)) for k, v in sorted(times.items())}

    return MetricsReport(median_translation_m=med_t, median_rotation_deg=med_r,
                         recall_at_5cm_5deg=recall, recall_tight=tight,
                         n_queries=len(results), n_success=n_success,
                         n_failed=len(results) - n_success,
                         scene_diameter_m=float(scene_diameter),
                         config_hash=cfg_hash, mean_stage_times_s=mean_times)
