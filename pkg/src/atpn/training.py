"""Losses, Adam, augmentation and the three-stage training loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import StageSchedule
from .data import FaceRecord
from .heatmap import InvalidInputError
from .metrics import DegenerateNormalizerError, inter_ocular
from .synth import FLIP_PERMUTATION
from .tensor import Parameter, Tensor
from .tracking import Box, roi_grid, sample_bilinear, to_roi

PROB_EPS = 1e-7


class StagingError(RuntimeError):
    pass


# -- losses -------------------------------------------------------------------
def loss_alignment(pred, target, d_ion, per_landmark: bool = False) -> Tensor:
    """Per-sample alignment error ||S1 - S1'|| / d_ION over the flattened 2L vector.

    ``per_landmark`` switches to the mean of per-landmark distances, the
    evaluation convention.  Returns a [N] tensor.
    """
    pred = T.as_tensor(pred)
    n = pred.shape[0] if pred.ndim > 1 else 1
    pred = T.reshape(pred, (n, -1))
    tgt = np.asarray(target, dtype=pred.dtype).reshape(n, -1)
    d = np.asarray(d_ion, dtype=np.float64).reshape(-1)
    if np.any(d <= 0):
        raise DegenerateNormalizerError("d_ION must be positive")
    diff = T.sub(pred, Tensor(tgt))
    if per_landmark:
        dist = T.row_norm(T.reshape(diff, (-1, 2)))
        err = T.mean(T.reshape(dist, (n, -1)), axis=1)
    else:
        err = T.row_norm(diff)
    return T.mul(err, Tensor((1.0 / d).astype(pred.dtype)))


def loss_tracking(probs, labels) -> Tensor:
    """Binary cross-entropy of the face probability; accepts [N] probabilities or [N,2] softmax."""
    p = T.as_tensor(probs)
    if p.ndim == 2:
        p = T.getitem(p, (slice(None), 1))
    y = np.asarray(labels, dtype=p.dtype).reshape(p.shape)
    pc = T.clip(p, PROB_EPS, 1 - PROB_EPS)
    pos = T.mul(T.log(pc), Tensor(y))
    neg = T.mul(T.log(T.sub(Tensor(np.ones_like(y)), pc)), Tensor(1 - y))
    return T.neg(T.add(pos, neg))


def loss_pose(pred, target) -> Tensor:
    """Euclidean distance between angle triples, divided by 3.  Returns [N]."""
    pred = T.as_tensor(pred)
    pred = T.reshape(pred, (-1, 3))
    tgt = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    return T.scale(T.row_norm(T.sub(pred, Tensor(tgt))), 1.0 / 3.0)


def l2_penalty(params: Sequence[Parameter]) -> Tensor:
    """Sum of squared weights; batch-norm scales/shifts and biases are left out."""
    terms = [T.tsum(T.square(p)) for p in params if p.kind == "weight"]
    if not terms:
        return Tensor(np.zeros((), dtype=T.DEFAULT_DTYPE))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def objective(losses: Tensor, params: Sequence[Parameter], weight: float) -> Tensor:
    """Mean per-sample loss plus ``weight`` times the L2 penalty of ``params``."""
    if losses.size == 0:
        raise InvalidInputError("objective over an empty batch")
    obj = T.mean(losses)
    if weight:
        obj = T.add(obj, T.scale(l2_penalty(params), weight))
    return obj


def stage_parameters(model, stage: int) -> list[tuple[str, Parameter]]:
    """Parameters trained in ``stage``: backbone + alignment, then tracking, then pose."""
    if stage == 1:
        return [("backbone." + n, p) for n, p in model.backbone.named_parameters()] + [
            ("alignment." + n, p) for n, p in model.alignment.named_parameters()
        ]
    if stage == 2:
        return [("tracking." + n, p) for n, p in model.tracking.named_parameters()]
    if stage == 3:
        return [("pose." + n, p) for n, p in model.pose.named_parameters()]
    raise StagingError(f"unknown stage {stage}")


def objective_stage1(model, images, shapes, d_ion, weight: float) -> tuple[Tensor, np.ndarray]:
    f28, f14, f7 = model.backbone_forward(images)
    pred = model.alignment_forward(f28, f14, f7)
    la = loss_alignment(pred, shapes, d_ion)
    return objective(la, [p for _, p in stage_parameters(model, 1)], weight), la.data


def _frozen_fused(model, images):
    with T.no_grad():
        _, fused, _ = model.fused_features(images)
    return Tensor(fused.data)


def objective_stage2(model, images, labels, weight: float, fused=None) -> tuple[Tensor, np.ndarray]:
    fused = _frozen_fused(model, images) if fused is None else fused
    lt = loss_tracking(model.tracking(fused), labels)
    return objective(lt, [p for _, p in stage_parameters(model, 2)], weight), lt.data


def objective_stage3(model, images, poses, weight: float, fused=None) -> tuple[Tensor, np.ndarray]:
    fused = _frozen_fused(model, images) if fused is None else fused
    lp = loss_pose(model.pose(fused), poses)
    return objective(lp, [p for _, p in stage_parameters(model, 3)], weight), lp.data


# -- optimiser ----------------------------------------------------------------
class Adam:
    def __init__(self, named_params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for name, p in self.params:
            if p.frozen:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            step = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - step).astype(p.data.dtype, copy=False)

    def state(self) -> dict:
        moments = {}
        for n, _ in self.params:
            moments["m." + n] = self.m[n]
            moments["v." + n] = self.v[n]
        return {"step": self.t, "moments": moments}

    def load_state(self, state: dict) -> None:
        self.t = int(state["step"])
        for n, p in self.params:
            for key, store in (("m." + n, self.m), ("v." + n, self.v)):
                if key in state["moments"]:
                    store[n] = np.asarray(state["moments"][key], dtype=p.dtype).copy()


def learning_rate(schedule: StageSchedule, epoch: int) -> float:
    """Step decay: multiply by ``decay`` every ``decay_every`` epochs."""
    if schedule.decay_every <= 0:
        return schedule.lr
    return schedule.lr * schedule.decay ** (epoch // schedule.decay_every)


# -- augmentation -------------------------------------------------------------
@dataclass(frozen=True)
class AugmentationConfig:
    max_translation: float = 0.0  # fraction of ROI extent
    max_rotation: float = 0.0  # degrees
    flip_probability: float = 0.0
    flip_permutation: tuple[int, ...] = FLIP_PERMUTATION
    channel_transform: bool = False
    mixup: bool = False
    mixup_opacity: tuple[float, float] = (0.2, 0.5)
    replication: int = 1

    @classmethod
    def default(cls, replication: int = 1) -> "AugmentationConfig":
        return cls(0.05, 15.0, 0.5, FLIP_PERMUTATION, True, True, (0.2, 0.5), replication)

    def __post_init__(self):
        perm = np.asarray(self.flip_permutation)
        if self.flip_probability > 0 and not np.array_equal(perm[perm], np.arange(perm.size)):
            raise ValueError("flip permutation must be an involution")


@dataclass
class Sample:
    image: np.ndarray  # [3, S, S] float32 in [0, 1]
    shape: np.ndarray | None  # [L, 2] ROI coordinates
    pose: np.ndarray | None
    label: int


def rotate_points(points, angle: float, center) -> np.ndarray:
    """Rotate by ``angle`` radians about ``center`` in image coordinates (y down)."""
    c, s = math.cos(angle), math.sin(angle)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2) - center
    return np.stack([c * p[:, 0] - s * p[:, 1], s * p[:, 0] + c * p[:, 1]], axis=1) + center


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def flip_sample(sample: Sample, permutation=FLIP_PERMUTATION) -> Sample:
    shape = None
    if sample.shape is not None:
        shape = sample.shape[list(permutation)].copy()
        shape[:, 0] = 1.0 - shape[:, 0]
    pose = None if sample.pose is None else sample.pose * np.array([-1.0, 1.0, -1.0])
    return Sample(np.ascontiguousarray(sample.image[:, :, ::-1]), shape, pose, sample.label)


def make_sample(rec: FaceRecord, size: int = 112, angle: float = 0.0, shift=(0.0, 0.0)) -> Sample:
    """Crop ``rec`` after rotating the frame by ``angle`` about the ROI centre and shifting by ``shift`` pixels."""
    roi = rec.roi
    xs, ys = roi_grid(roi, size)
    pts = None if rec.landmarks is None else np.asarray(rec.landmarks, dtype=np.float64)
    pose = None if rec.pose is None else np.asarray(rec.pose, dtype=np.float64).copy()
    if angle or shift[0] or shift[1]:
        cx, cy = roi.center
        c, s = math.cos(-angle), math.sin(-angle)
        qx, qy = xs - shift[0] - cx, ys - shift[1] - cy
        xs, ys = cx + c * qx - s * qy, cy + s * qx + c * qy
        if pts is not None:
            pts = rotate_points(pts, angle, (cx, cy)) + np.asarray(shift)
        if pose is not None:
            pose[2] = wrap_angle(pose[2] + angle)
    image = sample_bilinear(rec.frame, xs, ys)
    shape = None if pts is None else to_roi(pts, roi)
    return Sample(image, shape, pose, rec.label)


def augment(rec: FaceRecord, cfg: AugmentationConfig, rng: np.random.Generator,
            backgrounds: Sequence[np.ndarray] = (), size: int = 112) -> Sample:
    angle = math.radians(rng.uniform(-cfg.max_rotation, cfg.max_rotation)) if cfg.max_rotation else 0.0
    if cfg.max_translation:
        t = rng.uniform(-cfg.max_translation, cfg.max_translation, 2) * (rec.roi.width, rec.roi.height)
    else:
        t = (0.0, 0.0)
    sample = make_sample(rec, size, angle, tuple(t))
    if cfg.flip_probability and rng.random() < cfg.flip_probability:
        sample = flip_sample(sample, cfg.flip_permutation)
    if cfg.channel_transform:
        perm = rng.permutation(3)
        gain = rng.uniform(0.8, 1.2, 3).astype(np.float32)
        sample.image = np.clip(sample.image[perm] * gain[:, None, None], 0, 1)
    if cfg.mixup and len(backgrounds):
        bg = backgrounds[int(rng.integers(len(backgrounds)))]
        alpha = np.float32(rng.uniform(*cfg.mixup_opacity))
        mask = np.ones((size, size), dtype=np.float32)
        if sample.shape is not None:
            u = np.linspace(0, 1, size)
            lo, hi = sample.shape.min(axis=0), sample.shape.max(axis=0)
            inside_x = (u >= lo[0]) & (u <= hi[0])
            inside_y = (u >= lo[1]) & (u <= hi[1])
            mask[np.ix_(inside_y, inside_x)] = 0.0
        w = alpha * mask
        sample.image = (sample.image * (1 - w) + bg * w).astype(np.float32)
    return sample


def compute_mean_shape(shapes) -> np.ndarray:
    """Coordinate-wise mean of ROI-normalised shapes, [L, 2]."""
    arr = [np.asarray(s, dtype=np.float64).reshape(-1, 2) for s in shapes]
    if not arr:
        raise InvalidInputError("mean shape of an empty set")
    if len({a.shape for a in arr}) != 1:
        raise InvalidInputError("shapes disagree on landmark count")
    return np.mean(arr, axis=0)


def mean_shape_of(records: Sequence[FaceRecord]) -> np.ndarray:
    return compute_mean_shape([r.roi_shape() for r in records if r.landmarks is not None])


# -- batches --------------------------------------------------------------------
@dataclass
class Batch:
    images: np.ndarray
    shapes: np.ndarray | None
    poses: np.ndarray | None
    labels: np.ndarray


def _stack(samples: list[Sample]) -> Batch:
    images = np.stack([s.image for s in samples]).astype(np.float32)
    shapes = None
    if all(s.shape is not None for s in samples):
        shapes = np.stack([s.shape.reshape(-1) for s in samples])
    poses = None
    if all(s.pose is not None for s in samples):
        poses = np.stack([s.pose for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.float64)
    return Batch(images, shapes, poses, labels)


def build_batch(records, indices, aug: AugmentationConfig | None, seed: int, epoch: int,
                backgrounds=(), size: int = 112) -> Batch:
    """Samples for ``indices``; each gets its own generator from (seed, epoch, index)."""
    samples = []
    for i in indices:
        rec = records[i % len(records)]
        if aug is None:
            samples.append(make_sample(rec, size))
        else:
            samples.append(augment(rec, aug, np.random.default_rng([seed, epoch, int(i)]), backgrounds, size))
    return _stack(samples)


def background_crops(records: Sequence[FaceRecord], count: int, seed: int, size: int = 112) -> list[np.ndarray]:
    """Face-free crops for background mixup, taken from negative records."""
    negs = [r for r in records if r.label == 0]
    rng = np.random.default_rng([seed, 99])
    out = []
    for _ in range(min(count, len(negs))):
        r = negs[int(rng.integers(len(negs)))]
        out.append(make_sample(r, size).image)
    return out


# -- training loop --------------------------------------------------------------
@dataclass
class StagePlan:
    stage: int
    schedule: StageSchedule
    batch_size: int = 32
    replication: int = 1
    augmentation: AugmentationConfig | None = None
    max_steps: int | None = None

    @property
    def trainable(self) -> str:
        return {1: "backbone+alignment", 2: "tracking", 3: "pose"}[self.stage]


@dataclass
class TrainResult:
    stage: int
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0
    optimizer: Adam | None = None


def _check_records(stage: int, records: Sequence[FaceRecord]) -> list[FaceRecord]:
    if stage == 1:
        keep = [r for r in records if r.label == 1 and r.landmarks is not None]
    elif stage == 2:
        keep = list(records)
        if not any(r.label == 1 for r in keep) or not any(r.label == 0 for r in keep):
            raise InvalidInputError("stage 2 needs both face and non-face samples")
    else:
        keep = [r for r in records if r.label == 1 and r.pose is not None]
    if not keep:
        raise InvalidInputError(f"no usable samples for stage {stage}")
    return keep


def train_stage(model, plan: StagePlan, records: Sequence[FaceRecord], seed: int = 0,
                log: Callable[[str], None] | None = None, backgrounds=(), optimizer: Adam | None = None,
                progress: Callable[[int, float], None] | None = None) -> TrainResult:
    """Run one training stage in place on ``model``.

    Stage k > 1 requires the model to carry a completed stage k - 1.  Stages
    2 and 3 freeze the backbone and alignment branch (weights and batch-norm
    statistics) and optimise only their own head.
    """
    stage = plan.stage
    done = getattr(model, "trained_stage", 0)
    if stage > 1 and done < stage - 1:
        raise StagingError(f"stage {stage} needs a stage-{stage - 1} checkpoint; model is at stage {done}")
    records = _check_records(stage, records)
    if stage == 1:
        model.set_mean_shape(mean_shape_of(records))
    named = stage_parameters(model, stage)
    opt = optimizer or Adam(named, plan.schedule.lr)
    frozen = [model.backbone, model.alignment] if stage > 1 else []
    for m in frozen:
        m.freeze(True)
        m.eval()
    active = {1: [model.backbone, model.alignment], 2: [model.tracking], 3: [model.pose]}[stage]
    for m in active:
        m.train()
    ion = inter_ocular(model.cfg.landmarks) if stage == 1 else None
    size = model.cfg.input_size
    n = len(records) * plan.replication
    result = TrainResult(stage, optimizer=opt)
    start = time.time()
    try:
        for epoch in range(plan.schedule.epochs):
            lr = learning_rate(plan.schedule, epoch)
            order = np.random.default_rng([seed, stage, epoch]).permutation(n)
            total, count = 0.0, 0
            for b, lo in enumerate(range(0, n, plan.batch_size)):
                idx = order[lo : lo + plan.batch_size]
                if len(idx) < 2:
                    continue  # train-mode batch norm needs two samples
                batch = build_batch(records, idx, plan.augmentation, seed * 1000 + stage, epoch, backgrounds, size)
                opt.zero_grad()
                if stage == 1:
                    d = ion.distance(batch.shapes.reshape(len(idx), -1, 2))
                    obj, per = objective_stage1(model, batch.images, batch.shapes, d, plan.schedule.weight_decay)
                elif stage == 2:
                    obj, per = objective_stage2(model, batch.images, batch.labels, plan.schedule.weight_decay)
                else:
                    obj, per = objective_stage3(model, batch.images, batch.poses, plan.schedule.weight_decay)
                T.backward(obj)
                opt.step(lr)
                loss = float(obj.data)
                result.step_losses.append(loss)
                result.steps += 1
                total += float(per.sum())
                count += len(idx)
                if log is not None:
                    log(f"{stage} {epoch} {b} {loss:.6g} {lr:.6g}")
                if progress is not None:
                    progress(result.steps, loss)
                if plan.max_steps is not None and result.steps >= plan.max_steps:
                    break
            result.epoch_losses.append(total / max(count, 1))
            if plan.max_steps is not None and result.steps >= plan.max_steps:
                break
    finally:
        for m in frozen:
            m.freeze(False)
        model.eval()
    result.seconds = time.time() - start
    model.trained_stage = max(done, stage)
    return result


def stage_plan(cfg, stage: int, augmentation: AugmentationConfig | None = None, **overrides) -> StagePlan:
    t = cfg.training
    plan = StagePlan(stage, t.stage(stage), t.batch_size, t.replication if stage == 1 else 1, augmentation)
    return replace(plan, **overrides)
