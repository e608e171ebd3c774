"""Procedural faces with exact landmark and pose labels.

A 12-point 3-D template is rotated, projected with weak perspective and
rendered as anti-aliased strokes on a textured background.  Coordinates are
image-style: x right, y down, z towards the viewer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .tracking import Box, extend_roi, iou, mbr

LANDMARK_NAMES = (
    "eye_outer_a", "eye_inner_a", "eye_inner_b", "eye_outer_b",
    "pupil_a", "pupil_b", "nose_tip", "mouth_a", "mouth_b", "chin",
    "brow_a", "brow_b",
)
FLIP_PERMUTATION = (3, 2, 1, 0, 5, 4, 6, 8, 7, 9, 11, 10)

_RAW_TEMPLATE = np.array(
    [
        [-0.45, -0.15, -0.05],
        [-0.15, -0.15, 0.00],
        [0.15, -0.15, 0.00],
        [0.45, -0.15, -0.05],
        [-0.30, -0.15, 0.05],
        [0.30, -0.15, 0.05],
        [0.00, 0.12, 0.35],
        [-0.25, 0.38, 0.05],
        [0.25, 0.38, 0.05],
        [0.00, 0.65, -0.02],
        [-0.30, -0.35, 0.05],
        [0.30, -0.35, 0.05],
    ]
)
TEMPLATE = _RAW_TEMPLATE - _RAW_TEMPLATE.mean(axis=0)

YAW_RANGE = math.radians(60)
PITCH_RANGE = math.radians(40)
ROLL_RANGE = math.radians(30)
FRAME_SIZE = 192


class SamplingExhaustedError(RuntimeError):
    pass


def rotation_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """R = Rz(roll) @ Ry(yaw) @ Rx(pitch)."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return rz @ ry @ rx


def euler_from_matrix(r: np.ndarray) -> tuple[float, float, float]:
    """Inverse of rotation_matrix for |yaw| < 90 degrees."""
    yaw = math.asin(float(np.clip(-r[2, 0], -1.0, 1.0)))
    pitch = math.atan2(r[2, 1], r[2, 2])
    roll = math.atan2(r[1, 0], r[0, 0])
    return yaw, pitch, roll


def project(pose, scale: float, translation, template: np.ndarray = TEMPLATE) -> np.ndarray:
    """Weak perspective: rotate, drop z, scale, translate.  Returns [L, 2]."""
    r = rotation_matrix(*pose)
    return scale * (template @ r.T)[:, :2] + np.asarray(translation, dtype=np.float64)


def recover_pose(points, template: np.ndarray = TEMPLATE) -> tuple[float, float, float]:
    """Fit a weak-perspective camera to 2-D points and read off the Euler angles.

    Solves the linear least-squares map from centred template to centred
    points, orthonormalises its two rows with an SVD and completes the
    rotation with their cross product.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    tc = template - template.mean(axis=0)
    pc = p - p.mean(axis=0)
    a, *_ = np.linalg.lstsq(tc, pc, rcond=None)  # pc ~ tc @ a, a is [3, 2]
    u, _, vt = np.linalg.svd(a.T, full_matrices=False)
    top = u @ vt
    r = np.vstack([top, np.cross(top[0], top[1])])
    return euler_from_matrix(r)


@dataclass(frozen=True)
class SynthFaceParams:
    yaw: float
    pitch: float
    roll: float
    scale: float
    tx: float
    ty: float
    noise: float = 0.02
    visible: bool = True

    @property
    def pose(self) -> tuple[float, float, float]:
        return (self.yaw, self.pitch, self.roll)

    def landmarks(self) -> np.ndarray:
        return project(self.pose, self.scale, (self.tx, self.ty))


def random_params(rng: np.random.Generator, frame_size: int = FRAME_SIZE) -> SynthFaceParams:
    scale = rng.uniform(52, 72)
    margin = 0.9 * scale
    return SynthFaceParams(
        yaw=rng.uniform(-YAW_RANGE, YAW_RANGE),
        pitch=rng.uniform(-PITCH_RANGE, PITCH_RANGE),
        roll=rng.uniform(-ROLL_RANGE, ROLL_RANGE),
        scale=scale,
        tx=rng.uniform(margin, frame_size - margin),
        ty=rng.uniform(margin, frame_size - margin),
        noise=rng.uniform(0.0, 0.04),
    )


# -- rendering ------------------------------------------------------------
def background(rng: np.random.Generator, size: int = FRAME_SIZE) -> np.ndarray:
    """Smooth coloured texture with a few soft blobs; [H, W, 3] float in [0, 1]."""
    base = rng.uniform(0.15, 0.85, 3)
    tex = ndimage.gaussian_filter(rng.normal(0, 1, (size, size, 3)), sigma=(rng.uniform(3, 10),) * 2 + (0,))
    tex /= np.abs(tex).max() + 1e-9
    img = base + 0.25 * tex
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(2, 6)):
        cx, cy = rng.uniform(0, size, 2)
        r = rng.uniform(6, 30)
        d = np.hypot(xx - cx, yy - cy)
        alpha = np.clip(r - d + 0.5, 0, 1)[..., None] * rng.uniform(0.3, 0.8)
        img = img * (1 - alpha) + rng.uniform(0, 1, 3) * alpha
    return np.clip(img, 0, 1)


def _segment_distance(xx, yy, a, b):
    a, b = np.asarray(a), np.asarray(b)
    ab = b - a
    t = np.clip(((xx - a[0]) * ab[0] + (yy - a[1]) * ab[1]) / max(float(ab @ ab), 1e-12), 0, 1)
    return np.hypot(xx - a[0] - t * ab[0], yy - a[1] - t * ab[1])


def _paint(img, dist, radius, color):
    alpha = np.clip(radius - dist + 0.5, 0.0, 1.0)[..., None]
    img *= 1 - alpha
    img += alpha * np.asarray(color)


def render_face(img: np.ndarray, params: SynthFaceParams, rng: np.random.Generator) -> None:
    """Draw the face into ``img`` in place."""
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    pts = params.landmarks()
    s = params.scale
    r = rotation_matrix(*params.pose)
    skin = np.clip(rng.uniform(0.45, 0.95) * np.array([1.0, 0.82, 0.68]) + rng.normal(0, 0.04, 3), 0, 1)
    dark = np.clip(skin * rng.uniform(0.1, 0.35), 0, 1)

    # head: ellipse centred on the projected skull centre, aligned with the face's up axis
    centre = project(params.pose, s, (params.tx, params.ty), np.array([[0.0, 0.1, -0.2]]))[0]
    up = r[:2, 1]
    up = up / (np.linalg.norm(up) + 1e-12)
    side = np.array([-up[1], up[0]])
    dx, dy = xx - centre[0], yy - centre[1]
    a_side = (dx * side[0] + dy * side[1]) / (0.62 * s)
    a_up = (dx * up[0] + dy * up[1]) / (0.85 * s)
    rho = np.sqrt(a_side**2 + a_up**2)
    _paint(img, (rho - 1) * 0.7 * s, 0.0, skin)

    width = 0.035 * s
    eye_white = np.clip(skin + 0.25, 0, 1)
    for i, j in ((0, 1), (2, 3)):
        _paint(img, _segment_distance(xx, yy, pts[i], pts[j]), 1.6 * width, eye_white)
    for i in (4, 5):
        _paint(img, np.hypot(xx - pts[i][0], yy - pts[i][1]), 1.7 * width, dark)
    for i, j in ((0, 1), (2, 3)):
        _paint(img, _segment_distance(xx, yy, pts[i], pts[j]), 0.35 * width, dark)
    # brows: short strokes centred on their midpoint landmark
    stroke = 0.12 * s * side
    for i in (10, 11):
        _paint(img, _segment_distance(xx, yy, pts[i] - stroke, pts[i] + stroke), 0.8 * width, dark)
    nose_col = np.clip(skin * 0.6, 0, 1)
    _paint(img, np.hypot(xx - pts[6][0], yy - pts[6][1]), 1.4 * width, nose_col)
    lips = np.clip(skin * np.array([0.9, 0.35, 0.35]), 0, 1)
    _paint(img, _segment_distance(xx, yy, pts[7], pts[8]), 1.0 * width, lips)
    _paint(img, np.hypot(xx - pts[9][0], yy - pts[9][1]), 1.2 * width, dark)


def render_frame(params: SynthFaceParams, rng: np.random.Generator, size: int = FRAME_SIZE) -> np.ndarray:
    """Background, optional face, lighting gradient and noise; returns uint8 [H, W, 3]."""
    img = background(rng, size)
    if params.visible:
        render_face(img, params, rng)
    yy, xx = np.mgrid[0:size, 0:size] / size
    g = rng.uniform(-0.2, 0.2, 2)
    light = rng.uniform(0.8, 1.15) * (1 + g[0] * (xx - 0.5) + g[1] * (yy - 0.5))
    img = img * light[..., None] + rng.normal(0, params.noise, img.shape)
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def jittered_roi(landmarks, rng: np.random.Generator | None, frame_size: int = FRAME_SIZE, jitter: float = 0.05) -> Box:
    """Detector stand-in: the extended MBR with small random shifts of each side."""
    box = mbr(landmarks)
    if rng is not None and jitter > 0:
        dx, dy = jitter * box.width, jitter * box.height
        j = rng.uniform(-1, 1, 4)
        box = Box(box.x_min + j[0] * dx, box.y_min + j[1] * dy,
                  box.x_max + j[2] * dx, box.y_max + j[3] * dy)
    return extend_roi(box, (frame_size, frame_size))


def sample_negative_box(faces: list[Box], frame_size, like: Box, rng: np.random.Generator,
                        max_iou: float = 0.3, retries: int = 200) -> Box:
    """A box of roughly ``like``'s size whose IoU with every face is below ``max_iou``."""
    fw, fh = frame_size
    for _ in range(retries):
        w = like.width * rng.uniform(0.8, 1.2)
        h = like.height * rng.uniform(0.8, 1.2)
        if w >= fw or h >= fh:
            w, h = min(w, fw - 1), min(h, fh - 1)
        x0, y0 = rng.uniform(0, fw - w), rng.uniform(0, fh - h)
        box = Box(x0, y0, x0 + w, y0 + h)
        if all(iou(box, f) < max_iou for f in faces):
            return box
    raise SamplingExhaustedError(f"no crop with IoU < {max_iou} found after {retries} tries")


def video_params(n_frames: int, rng: np.random.Generator, frame_size: int = FRAME_SIZE,
                 vanish_at: int | None = None) -> list[SynthFaceParams]:
    """Smoothly varying parameters; the face is absent at frame ``vanish_at`` only."""
    start = random_params(rng, frame_size)
    amp = rng.uniform(0.3, 0.6, 3) * np.array([YAW_RANGE, PITCH_RANGE, ROLL_RANGE])
    phase = rng.uniform(0, 2 * np.pi, 3)
    period = rng.uniform(60, 120, 3)
    drift = rng.uniform(-0.15, 0.15, 2)
    scale = rng.uniform(56, 66)
    out = []
    for t in range(n_frames):
        ang = amp * np.sin(2 * np.pi * t / period + phase)
        cx = frame_size / 2 + drift[0] * frame_size / 2 * math.sin(2 * math.pi * t / n_frames)
        cy = frame_size / 2 + drift[1] * frame_size / 2 * math.sin(2 * math.pi * t / n_frames)
        out.append(SynthFaceParams(float(ang[0]), float(ang[1]), float(ang[2]), scale, cx, cy,
                                   noise=start.noise, visible=(t != vanish_at)))
    return out
