"""End-to-end desk-scale run: synthesise, train the three stages, evaluate."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data
from .config import AtpnConfig
from .evaluate import (
    evaluate_alignment,
    evaluate_pose,
    evaluate_tracking,
    mean_shape_predictions,
    predict_records,
)
from .io import save_checkpoint
from .model import AtpnNet
from .training import AugmentationConfig, background_crops, stage_plan, train_stage


@dataclass
class DeskRun:
    model: AtpnNet
    checkpoints: dict[int, Path] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)
    epoch_losses: dict[int, list[float]] = field(default_factory=dict)
    metrics: dict[str, float] = field(default_factory=dict)
    states: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)
    pose_outputs: np.ndarray | None = None


def _snapshot(model) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state_dict().items()}


def run_desk(cfg: AtpnConfig, workdir, n_train: int = 2000, n_val: int = 500, seed: int = 0,
             log=None) -> DeskRun:
    """Train stages 1-3 on synthetic data and evaluate each on a held-out split."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    train_pos = data.synth_positives(n_train, seed)
    val_pos = data.synth_positives(n_val, seed + 1)
    train_neg = data.synth_negatives(n_train, seed)
    val_neg = data.synth_negatives(n_val, seed + 1)
    run = DeskRun(AtpnNet(cfg, seed=seed))
    run.seconds["synth"] = time.time() - t0
    bgs = background_crops(train_neg, 64, seed, cfg.input_size)
    aug = AugmentationConfig.default()
    model = run.model
    logfh = open(workdir / "train.log", "w")

    def emit(line):
        logfh.write(line + "\n")
        if log is not None:
            log(line)

    try:
        for stage, recs in ((1, train_pos), (2, train_pos + train_neg), (3, train_pos)):
            t = time.time()
            res = train_stage(model, stage_plan(cfg, stage, aug), recs, seed=seed, log=emit, backgrounds=bgs)
            run.seconds[f"stage{stage}"] = time.time() - t
            run.epoch_losses[stage] = res.epoch_losses
            path = workdir / f"stage{stage}.ckpt"
            save_checkpoint(path, model, stage)
            run.checkpoints[stage] = path
            run.states[stage] = _snapshot(model)
            if stage == 1:
                pred = predict_records(model, val_pos)
                rep = evaluate_alignment(pred.landmarks, val_pos)
                base = evaluate_alignment(mean_shape_predictions(model.mean_shape.reshape(-1, 2), val_pos), val_pos)
                run.metrics.update(val_nme=rep.nme, mean_shape_nme=base.nme, val_fr=rep.fr, val_auc=rep.auc)
            elif stage == 2:
                val = val_pos + val_neg
                pred = predict_records(model, val)
                run.metrics["ap"] = evaluate_tracking(pred.confidence, val).ap
            else:
                pred = predict_records(model, val_pos)
                rep = evaluate_pose(pred.pose, val_pos)
                zero = evaluate_pose(np.zeros_like(pred.pose), val_pos)
                run.metrics.update(pose_mae=rep.mae_deg, zero_pose_mae=zero.mae_deg, pose_fr10=rep.fr10)
                run.pose_outputs = pred.pose
    finally:
        logfh.close()
    run.seconds["total"] = time.time() - t0
    return run
