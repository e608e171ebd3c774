"""Landmark-distance attention heatmap and its fusion with feature maps."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import InvalidShapeError, Tensor


class InvalidInputError(ValueError):
    pass


def _as_shapes(shape) -> np.ndarray:
    s = np.asarray(shape, dtype=np.float64)
    if s.ndim == 1:
        s = s.reshape(1, -1, 2)
    elif s.ndim == 2 and s.shape[-1] != 2:
        s = s.reshape(s.shape[0], -1, 2)
    elif s.ndim == 2:
        s = s[None]
    if s.ndim != 3 or s.shape[-1] != 2:
        raise InvalidInputError(f"cannot interpret landmarks of shape {np.shape(shape)}")
    if s.shape[1] == 0:
        raise InvalidInputError("heatmap needs at least one landmark")
    return s


def generate_heatmap(shape, grid: tuple[int, int] = (28, 28), floor: float = 0.5) -> np.ndarray:
    """Heatmap of ROI-normalised landmarks on an H x W grid.

    ``shape`` is [L,2], [N,L,2] or flattened [N,2L].  Each cell holds
    ``max(floor, 1 / sqrt(1 + d))`` where ``d`` is the pixel distance to the
    nearest landmark, landmarks mapped as ``x * (W - 1)``, ``y * (H - 1)``.
    Returns float64 [H,W] for a single shape, [N,H,W] otherwise.
    """
    single = np.ndim(shape) == 2 and np.shape(shape)[-1] == 2
    s = _as_shapes(shape)
    h, w = grid
    px = s[..., 0] * (w - 1)
    py = s[..., 1] * (h - 1)
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs.reshape(1, -1, 1) - px[:, None, :]
    dy = ys.reshape(1, -1, 1) - py[:, None, :]
    dmin = np.sqrt(dx * dx + dy * dy).min(axis=2)
    hm = np.maximum(floor, 1.0 / np.sqrt(1.0 + dmin)).reshape(-1, h, w)
    return hm[0] if single else hm


def fuse(features: Tensor, heatmap) -> Tensor:
    """Elementwise product of [N,C,H,W] features with a heatmap broadcast over batch and channels.

    The heatmap is a constant: no gradient flows into it.
    """
    hm = np.asarray(heatmap)
    if features.ndim != 4:
        raise InvalidShapeError(f"fuse expects NCHW features, got {features.shape}")
    n, c, h, w = features.shape
    if hm.ndim == 2:
        hm = hm[None]
    if hm.shape[-2:] != (h, w) or hm.shape[0] not in (1, n):
        raise InvalidShapeError(f"heatmap {hm.shape} does not match features {features.shape}")
    full = np.broadcast_to(hm.astype(features.dtype)[:, None], (n, c, h, w))
    return T.mul(features, Tensor(full))
