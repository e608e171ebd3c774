"""Batch inference over face records and the per-task evaluation summaries."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics as M
from .data import FaceRecord
from .tracking import to_frame
from .training import make_sample


@dataclass
class Predictions:
    landmarks: np.ndarray  # [N, L, 2] frame pixels
    pose: np.ndarray  # [N, 3] radians
    confidence: np.ndarray  # [N]


def predict_records(model, records: Sequence[FaceRecord], batch_size: int = 64) -> Predictions:
    lms, poses, confs = [], [], []
    for lo in range(0, len(records), batch_size):
        chunk = records[lo : lo + batch_size]
        images = np.stack([make_sample(r, model.cfg.input_size).image for r in chunk])
        out = model.predict(images)
        lms += [to_frame(s, r.roi) for s, r in zip(out["landmarks"], chunk)]
        poses.append(out["pose"])
        confs.append(out["confidence"])
    return Predictions(np.stack(lms), np.concatenate(poses), np.concatenate(confs))


def mean_shape_predictions(mean_shape, records: Sequence[FaceRecord]) -> np.ndarray:
    """Baseline: the ROI-normalised mean shape placed in every record's ROI."""
    return np.stack([to_frame(mean_shape, r.roi) for r in records])


@dataclass
class AlignmentReport:
    errors: np.ndarray
    nme: float
    fr: float
    auc: float

    def summary(self) -> str:
        return M.summary_block(self.nme, self.fr, self.auc)


def evaluate_alignment(pred_landmarks, records: Sequence[FaceRecord], norm: M.NormalizationSpec | None = None,
                       cutoff: float = 0.1) -> AlignmentReport:
    gt = np.stack([r.landmarks for r in records])
    norm = norm or M.inter_ocular(gt.shape[1])
    err = np.atleast_1d(M.nme(pred_landmarks, gt, norm))
    return AlignmentReport(err, float(err.mean()), M.failure_rate(err, cutoff), M.ced_auc(err, cutoff))


@dataclass
class PoseReport:
    errors_deg: np.ndarray
    per_angle_deg: np.ndarray
    mae_deg: float
    fr10: float

    def summary(self) -> str:
        return M.summary_block(mae=self.mae_deg, fr10=self.fr10)


def evaluate_pose(pred_pose, records: Sequence[FaceRecord]) -> PoseReport:
    gt = np.degrees(np.stack([r.pose for r in records]))
    pred = np.degrees(np.asarray(pred_pose))
    per, overall = M.pose_mae(pred, gt)
    err = M.pose_errors(pred, gt)
    return PoseReport(err, per, overall, M.failure_rate(err, 10.0))


@dataclass
class TrackingReport:
    ap: float
    recall: np.ndarray
    precision: np.ndarray

    def summary(self) -> str:
        return M.summary_block(ap=self.ap)


def evaluate_tracking(confidence, records: Sequence[FaceRecord]) -> TrackingReport:
    labels = np.array([r.label for r in records])
    rec, prec = M.pr_curve(confidence, labels)
    return TrackingReport(M.average_precision(confidence, labels), rec, prec)


def write_curve(path, xs, ys) -> None:
    Path(path).write_text(M.curve_lines(xs, ys))
