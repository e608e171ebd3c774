"""ROI geometry and the detect/track state machine gated by face confidence."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .heatmap import InvalidInputError

CONFIDENCE_GATE = 0.7
ROI_EXTENSION = 0.25
DETECT, TRACK = "detect", "track"


class MissingDetectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise InvalidInputError(f"box corners out of order: {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2

    def contains(self, other: "Box") -> bool:
        return (self.x_min <= other.x_min and self.y_min <= other.y_min
                and self.x_max >= other.x_max and self.y_max >= other.y_max)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def mbr(shape) -> Box:
    """Tightest axis-aligned box around the landmarks (frame coordinates)."""
    pts = np.asarray(shape, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise InvalidInputError("cannot bound an empty shape")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return Box(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def extend_roi(box: Box, frame_size: tuple[int, int] | None = None, fraction: float = ROI_EXTENSION) -> Box:
    """Push each side out by ``fraction`` of the box extent, then clip to the frame.

    ``frame_size`` is (width, height); None leaves the result unclipped.
    """
    dx, dy = fraction * box.width, fraction * box.height
    x0, y0, x1, y1 = box.x_min - dx, box.y_min - dy, box.x_max + dx, box.y_max + dy
    if frame_size is not None:
        w, h = frame_size
        x0, x1 = min(max(x0, 0.0), w), min(max(x1, 0.0), w)
        y0, y1 = min(max(y0, 0.0), h), min(max(y1, 0.0), h)
    return Box(x0, y0, x1, y1)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    return float(inter / union) if union > 0 else 0.0


def to_roi(shape, box: Box) -> np.ndarray:
    """Frame pixel coordinates -> ROI-normalised unit-square coordinates."""
    if box.width <= 0 or box.height <= 0:
        raise InvalidInputError(f"degenerate ROI {box}")
    pts = np.asarray(shape, dtype=np.float64).reshape(-1, 2)
    return (pts - [box.x_min, box.y_min]) / [box.width, box.height]


def to_frame(shape, box: Box) -> np.ndarray:
    pts = np.asarray(shape, dtype=np.float64).reshape(-1, 2)
    return pts * [box.width, box.height] + [box.x_min, box.y_min]


def roi_grid(box: Box, size: int = 112) -> tuple[np.ndarray, np.ndarray]:
    """Frame coordinates sampled by each output pixel; pixel j sits at u = j / (size - 1)."""
    u = np.linspace(0.0, 1.0, size)
    xs = box.x_min + u * box.width
    ys = box.y_min + u * box.height
    return np.meshgrid(xs, ys)


def sample_bilinear(frame: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear lookup of an [H,W,C] frame at (xs, ys); returns [C, *xs.shape] float32 in [0, 1]."""
    img = np.asarray(frame)
    scale = 1.0 / 255.0 if img.dtype == np.uint8 else 1.0
    img = img.astype(np.float32) * np.float32(scale)
    if img.ndim == 2:
        img = img[:, :, None]
    coords = np.stack([ys.ravel(), xs.ravel()])
    out = np.empty((img.shape[2], xs.size), dtype=np.float32)
    for c in range(img.shape[2]):
        out[c] = ndimage.map_coordinates(img[:, :, c], coords, order=1, mode="nearest")
    return out.reshape(img.shape[2], *xs.shape)


def crop_resize(frame: np.ndarray, box: Box, size: int = 112) -> np.ndarray:
    """Bilinear crop of ``box`` to a [C, size, size] float32 image."""
    if box.width <= 0 or box.height <= 0:
        raise InvalidInputError(f"degenerate ROI {box}")
    xs, ys = roi_grid(box, size)
    return sample_bilinear(frame, xs, ys)


# -- state machine ----------------------------------------------------------
@dataclass
class TrackerState:
    mode: str = DETECT
    last_shape: np.ndarray | None = None
    last_confidence: float = 0.0
    frame_index: int = 0


@dataclass
class StepResult:
    state: TrackerState
    mode: str
    roi: Box
    shape: np.ndarray
    pose: np.ndarray
    confidence: float
    failure: bool


def next_mode(confidence: float, gate: float = CONFIDENCE_GATE) -> str:
    return TRACK if confidence > gate else DETECT


def _predict(model, frame, roi: Box, index: int, size: int | None = None) -> dict:
    if hasattr(model, "predict_roi"):
        return model.predict_roi(frame, roi, index)
    if size is None:
        cfg = getattr(model, "cfg", None)
        size = cfg.input_size if cfg is not None else 112
    return model.predict(crop_resize(frame, roi, size)[None])


def step(frame, state: TrackerState, model, detector: Callable | None, size: int | None = None) -> StepResult:
    """Process one frame.

    ``model.predict`` takes a [1,3,size,size] batch and returns landmarks in
    ROI coordinates, pose and confidence.  A model may instead provide
    ``predict_roi(frame, roi, frame_index)`` returning the same dict.
    ``detector(frame_index, frame)`` returns a Box or None.
    """
    frame = np.asarray(frame)
    h, w = frame.shape[:2]
    if state.mode == TRACK and state.last_shape is not None:
        roi = extend_roi(mbr(state.last_shape), (w, h))
        mode = TRACK
    else:
        roi = detector(state.frame_index, frame) if detector is not None else None
        if roi is None:
            raise MissingDetectionError(f"no detection available for frame {state.frame_index}")
        mode = DETECT
    out = _predict(model, frame, roi, state.frame_index, size)
    conf = float(np.asarray(out["confidence"]).reshape(-1)[0])
    shape = to_frame(np.asarray(out["landmarks"])[0], roi)
    pose = np.asarray(out["pose"], dtype=np.float64).reshape(-1)[:3]
    nxt = next_mode(conf)
    if nxt == TRACK and (mbr(shape).width <= 0 or mbr(shape).height <= 0):
        nxt = DETECT  # a collapsed shape cannot seed the next ROI
    failure = mode == TRACK and nxt == DETECT
    new_state = TrackerState(
        mode=nxt,
        last_shape=shape if nxt == TRACK else None,
        last_confidence=conf,
        frame_index=state.frame_index + 1,
    )
    return StepResult(new_state, mode, roi, shape, pose, conf, failure)


class ScriptedModel:
    """Stand-in network for exercising the state machine.

    Returns the given per-frame landmarks (frame pixels, None when absent)
    mapped into the ROI, and the scripted confidence of that frame.
    """

    def __init__(self, landmarks: Sequence, confidences: Sequence[float], n_landmarks: int = 12):
        self.landmarks = list(landmarks)
        self.confidences = list(confidences)
        self.n_landmarks = n_landmarks

    def predict_roi(self, frame, roi: Box, frame_index: int) -> dict:
        pts = self.landmarks[frame_index]
        lm = np.full((self.n_landmarks, 2), 0.5) if pts is None else to_roi(pts, roi)
        return {
            "landmarks": lm[None],
            "pose": np.zeros((1, 3)),
            "confidence": np.array([float(self.confidences[frame_index])]),
        }


@dataclass
class TrackStats:
    sequences: int = 0
    detection_frames: int = 0
    tracking_frames: int = 0
    failure_frames: int = 0

    @property
    def failure_rate(self) -> float:
        total = self.detection_frames + self.tracking_frames
        return self.failure_frames / total if total else 0.0

    def __add__(self, other: "TrackStats") -> "TrackStats":
        return TrackStats(
            self.sequences + other.sequences,
            self.detection_frames + other.detection_frames,
            self.tracking_frames + other.tracking_frames,
            self.failure_frames + other.failure_frames,
        )

    def summary(self) -> str:
        return (
            f"sequences {self.sequences}\n"
            f"detection_frames {self.detection_frames}\n"
            f"tracking_frames {self.tracking_frames}\n"
            f"failure_frames {self.failure_frames}\n"
            f"failure_rate {self.failure_rate:.6f}\n"
        )


@dataclass
class FrameRecord:
    frame: int
    mode: str
    confidence: float
    nme: float | None = None
    nme_detect: float | None = None
    shape: np.ndarray = field(default=None, repr=False)

    def line(self) -> str:
        err = "-" if self.nme is None else f"{self.nme:.6f}"
        return f"{self.frame} {self.mode} {self.confidence:.6f} {err}"


def run_sequence(frames: Sequence, model, detector, gt=None, norm=None, compare_detection=False):
    """Run the state machine over a sequence.

    With ground truth, per-frame NME is recorded; ``compare_detection`` also
    evaluates every frame from the detector ROI so the two modes can be compared.
    """
    from .metrics import inter_ocular, nme

    if len(frames) == 0:
        raise InvalidInputError("empty sequence")
    state = TrackerState()
    stats = TrackStats(sequences=1)
    records = []
    for i, frame in enumerate(frames):
        r = step(frame, state, model, detector)
        if r.mode == TRACK:
            stats.tracking_frames += 1
        else:
            stats.detection_frames += 1
        stats.failure_frames += int(r.failure)
        rec = FrameRecord(i, r.mode, r.confidence, shape=r.shape)
        if gt is not None and gt[i] is not None:
            target = np.asarray(gt[i], dtype=np.float64).reshape(-1, 2)
            spec = norm or inter_ocular(target.shape[0])
            rec.nme = nme(r.shape, target, spec)
            if compare_detection:
                box = detector(i, np.asarray(frame)) if r.mode == TRACK else r.roi
                if box is not None:
                    if r.mode == TRACK:
                        out = _predict(model, np.asarray(frame), box, i)
                        rec.nme_detect = nme(to_frame(np.asarray(out["landmarks"])[0], box), target, spec)
                    else:
                        rec.nme_detect = rec.nme
        records.append(rec)
        state = r.state
    return stats, records
