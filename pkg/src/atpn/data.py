"""Face records in memory, synthetic dataset assembly and manifest conversion."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import synth
from .io import DatasetManifest, ManifestRecord, load_manifest, read_ppm, save_manifest, write_ppm
from .tracking import Box, extend_roi, mbr, to_roi


@dataclass
class FaceRecord:
    """One labelled ROI of a frame.  Landmarks are in frame pixels; pose in radians."""

    frame: np.ndarray
    roi: Box
    landmarks: np.ndarray | None = None
    pose: np.ndarray | None = None
    label: int = 1
    tags: tuple[str, ...] = ()

    def roi_shape(self) -> np.ndarray:
        return to_roi(self.landmarks, self.roi)


def _record_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def synth_positive(seed: int, index: int) -> FaceRecord:
    rng = _record_rng(seed, index)
    p = synth.random_params(rng)
    frame = synth.render_frame(p, rng)
    pts = p.landmarks()
    tags = ("large-pose",) if abs(p.yaw) > np.radians(40) else ()
    return FaceRecord(frame, synth.jittered_roi(pts, rng), pts, np.array(p.pose), 1, tags)


def synth_negative(seed: int, index: int) -> FaceRecord:
    """A face-bearing frame cropped away from the face (IoU < 0.3)."""
    rng = _record_rng(seed, index, stream=1)
    p = synth.random_params(rng)
    frame = synth.render_frame(p, rng)
    pts = p.landmarks()
    face = extend_roi(mbr(pts), (frame.shape[1], frame.shape[0]))
    box = synth.sample_negative_box([face], (frame.shape[1], frame.shape[0]), face, rng)
    return FaceRecord(frame, box, None, None, 0)


def synth_positives(count: int, seed: int) -> list[FaceRecord]:
    return [synth_positive(seed, i) for i in range(count)]


def synth_negatives(count: int, seed: int) -> list[FaceRecord]:
    return [synth_negative(seed, i) for i in range(count)]


def generate_negatives(positives: list[FaceRecord], count: int, rng: np.random.Generator,
                       max_iou: float = 0.3) -> list[FaceRecord]:
    """Crops from the positives' frames whose IoU with that frame's face box is below ``max_iou``."""
    if not positives:
        raise ValueError("need at least one positive frame to sample from")
    out = []
    for _ in range(count):
        src = positives[int(rng.integers(len(positives)))]
        h, w = src.frame.shape[:2]
        face = extend_roi(mbr(src.landmarks), (w, h)) if src.landmarks is not None else src.roi
        box = synth.sample_negative_box([face], (w, h), src.roi, rng, max_iou=max_iou)
        out.append(FaceRecord(src.frame, box, None, None, 0))
    return out


@dataclass
class VideoSequence:
    frames: list[np.ndarray]
    landmarks: list[np.ndarray | None]
    poses: list[np.ndarray]
    vanish_at: int | None
    rois: list[Box] | None = None

    def detector(self, index: int, frame=None) -> Box | None:
        """Listed ROI if the sequence carries external boxes; otherwise the
        extended ground-truth MBR, or None when the face is absent."""
        if self.rois is not None:
            return self.rois[index]
        pts = self.landmarks[index]
        if pts is None:
            return None
        h, w = self.frames[index].shape[:2]
        return extend_roi(mbr(pts), (w, h))


def synth_video(n_frames: int, seed: int, vanish_at: int | None = None) -> VideoSequence:
    rng = _record_rng(seed, 0, stream=2)
    params = synth.video_params(n_frames, rng, vanish_at=vanish_at)
    frames, pts, poses = [], [], []
    for t, p in enumerate(params):
        frng = _record_rng(seed, t, stream=3)
        frames.append(synth.render_frame(p, frng))
        pts.append(p.landmarks() if p.visible else None)
        poses.append(np.array(p.pose))
    return VideoSequence(frames, pts, poses, vanish_at)


# -- manifests ---------------------------------------------------------------
def write_records(records: list[FaceRecord], out_dir, task: str, prefix: str = "img",
                  landmarks: int = 12) -> DatasetManifest:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, r in enumerate(records):
        name = f"images/{prefix}_{i:05d}.ppm"
        write_ppm(out / name, r.frame)
        rows.append(ManifestRecord(name, task, r.roi, r.landmarks, r.pose, r.label, r.tags))
    return DatasetManifest(rows, landmarks, out)


def write_video(video: VideoSequence, out_dir, sequence: str = "seq0") -> DatasetManifest:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    rows = []
    for t, frame in enumerate(video.frames):
        name = f"frames/{t:05d}.ppm"
        write_ppm(out / name, frame)
        roi = video.detector(t)
        if roi is None:
            h, w = frame.shape[:2]
            roi = Box(0.0, 0.0, float(w), float(h))
        rows.append(ManifestRecord(name, "track", roi, video.landmarks[t], video.poses[t],
                                   int(video.landmarks[t] is not None), (), sequence, t))
    return DatasetManifest(rows, len(synth.TEMPLATE), out)


def generate(out_dir, kind: str, count: int, seed: int) -> Path:
    """Write a synthetic dataset (frames + manifest.csv) and return the manifest path."""
    out = Path(out_dir)
    if count < 1:
        raise ValueError("count must be >= 1")
    if kind == "positives":
        m = write_records(synth_positives(count, seed), out, "align+pose", "pos")
    elif kind == "negatives":
        m = write_records(synth_negatives(count, seed), out, "track", "neg")
    elif kind == "video":
        m = write_video(synth_video(count, seed, vanish_at=count // 2), out)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    path = out / "manifest.csv"
    save_manifest(m, path)
    return path


def records_from_manifest(manifest: DatasetManifest | str | Path) -> list[FaceRecord]:
    m = manifest if isinstance(manifest, DatasetManifest) else load_manifest(manifest)
    cache: dict[Path, np.ndarray] = {}
    out = []
    for r in m.records:
        path = m.image_path(r)
        if path not in cache:
            cache[path] = read_ppm(path)
        out.append(FaceRecord(cache[path], r.roi, r.landmarks, r.pose, r.label, r.tags))
    return out


def video_from_manifest(manifest: DatasetManifest) -> VideoSequence:
    recs = sorted(manifest.records, key=lambda r: (r.sequence, r.frame))
    frames = [read_ppm(manifest.image_path(r)) for r in recs]
    pts = [r.landmarks if r.label == 1 else None for r in recs]
    poses = [r.pose for r in recs]
    vanish = next((i for i, p in enumerate(pts) if p is None), None)
    return VideoSequence(frames, pts, poses, vanish, [r.roi for r in recs])


def video_from_directory(frames_dir) -> list[np.ndarray]:
    paths = sorted(Path(frames_dir).glob("*.ppm"))
    return [read_ppm(p) for p in paths]
