"""Evaluation metrics: landmark NME, failure rate, CED/AUC, pose MAE, average precision."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


class DegenerateNormalizerError(MetricError):
    pass


@dataclass(frozen=True)
class NormalizationSpec:
    """Normalising distance between the centroids of two landmark index groups.

    Inter-ocular uses one outer eye corner per group; inter-pupil uses each
    eye's contour, whose mean stands in for the pupil centre.
    """

    kind: str
    left: tuple[int, ...]
    right: tuple[int, ...]

    def validate(self, n_landmarks: int) -> None:
        for i in self.left + self.right:
            if not 0 <= i < n_landmarks:
                raise MetricError(f"normaliser index {i} out of range for {n_landmarks} landmarks")

    def distance(self, shape: np.ndarray) -> np.ndarray:
        s = np.asarray(shape, dtype=np.float64)
        a = s[..., list(self.left), :].mean(axis=-2)
        b = s[..., list(self.right), :].mean(axis=-2)
        return np.linalg.norm(a - b, axis=-1)


def inter_ocular(n_landmarks: int) -> NormalizationSpec:
    if n_landmarks == 98:
        return NormalizationSpec("inter-ocular", (60,), (72,))
    if n_landmarks == 12:
        return NormalizationSpec("inter-ocular", (0,), (3,))
    if n_landmarks == 68:
        return NormalizationSpec("inter-ocular", (36,), (45,))
    raise MetricError(f"no default outer-eye-corner indices for {n_landmarks} landmarks")


def inter_pupil(n_landmarks: int) -> NormalizationSpec:
    if n_landmarks == 98:
        return NormalizationSpec("inter-pupil", tuple(range(60, 68)), tuple(range(68, 76)))
    if n_landmarks == 12:
        return NormalizationSpec("inter-pupil", (0, 1), (2, 3))
    if n_landmarks == 68:
        return NormalizationSpec("inter-pupil", tuple(range(36, 42)), tuple(range(42, 48)))
    raise MetricError(f"no default eye-contour indices for {n_landmarks} landmarks")


def normalization(kind: str, n_landmarks: int) -> NormalizationSpec:
    kinds = {"ion": inter_ocular, "inter-ocular": inter_ocular, "ipn": inter_pupil, "inter-pupil": inter_pupil}
    try:
        return kinds[kind](n_landmarks)
    except KeyError:
        raise MetricError(f"unknown normalisation {kind!r}") from None


def _shapes(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.shape[-1] != 2:
        a = a.reshape(*a.shape[:-1], -1, 2)
    return a


def nme(pred, gt, norm: NormalizationSpec) -> np.ndarray | float:
    """Mean per-landmark Euclidean error over the normalising distance of ``gt``.

    Accepts one shape [L,2] (returns a float) or a batch [N,L,2].
    """
    p, g = _shapes(pred), _shapes(gt)
    if p.shape != g.shape:
        raise MetricError(f"shape mismatch {p.shape} vs {g.shape}")
    norm.validate(g.shape[-2])
    d = norm.distance(g)
    if np.any(d <= 0):
        raise DegenerateNormalizerError("normalising distance is zero")
    err = np.linalg.norm(p - g, axis=-1).mean(axis=-1) / d
    return float(err) if np.ndim(err) == 0 else err


def _errors(errors) -> np.ndarray:
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    if e.size == 0:
        raise MetricError("empty error list")
    return e


def failure_rate(errors, threshold: float) -> float:
    """Fraction of errors strictly above ``threshold``."""
    if threshold <= 0:
        raise MetricError("threshold must be positive")
    e = _errors(errors)
    return float(np.count_nonzero(e > threshold) / e.size)


def ced_curve(errors, cutoff: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Breakpoints of the right-continuous empirical CED on [0, cutoff] and the fraction at each."""
    if cutoff <= 0:
        raise MetricError("cutoff must be positive")
    e = np.sort(_errors(errors))
    inside = e[e <= cutoff]
    thresholds = np.unique(np.concatenate([[0.0], inside, [cutoff]]))
    fractions = np.searchsorted(e, thresholds, side="right") / e.size
    return thresholds, fractions


def ced_auc(errors, cutoff: float = 0.1) -> float:
    """Area under the CED on [0, cutoff], normalised by ``cutoff``.

    For a step function the area is sum over samples of (cutoff - e_i)^+ / n.
    """
    if cutoff <= 0:
        raise MetricError("cutoff must be positive")
    e = _errors(errors)
    return float(np.clip(cutoff - e, 0.0, None).sum() / (e.size * cutoff))


def pose_mae(preds, gts) -> tuple[np.ndarray, float]:
    """Per-angle MAE (yaw, pitch, roll) and their mean, in the units of the inputs."""
    p = np.asarray(preds, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 3)
    if p.shape != g.shape:
        raise MetricError(f"length mismatch: {p.shape[0]} predictions vs {g.shape[0]} labels")
    if p.shape[0] == 0:
        raise MetricError("empty pose list")
    diff = np.abs(p - g)
    overall = float(diff.sum(axis=1).mean() / 3.0)
    return diff.mean(axis=0), overall


def pose_errors(preds, gts) -> np.ndarray:
    """Per-sample mean absolute angle error, used for FR@10 degrees and the pose CED."""
    p = np.asarray(preds, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 3)
    if p.shape != g.shape:
        raise MetricError("length mismatch")
    return np.abs(p - g).mean(axis=1)


def pr_curve(confidences, labels) -> tuple[np.ndarray, np.ndarray]:
    """Recall and precision after each rank of the descending (stable) confidence order."""
    c = np.asarray(confidences, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if c.shape != y.shape:
        raise MetricError("confidences and labels differ in length")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("average precision is undefined without positive labels")
    order = np.argsort(-c, kind="stable")
    tp = np.cumsum(y[order])
    ranks = np.arange(1, y.size + 1)
    return tp / n_pos, tp / ranks


def average_precision(confidences, labels) -> float:
    """All-point interpolated area under the precision-recall curve."""
    recall, precision = pr_curve(confidences, labels)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float((steps * envelope).sum())


# -- exports --------------------------------------------------------------
def curve_lines(xs, ys) -> str:
    return "".join(f"{x!r},{y!r}\n" for x, y in zip(map(float, xs), map(float, ys)))


def summary_block(
    nme_value=None, fr=None, auc=None, mae=None, fr10=None, ap=None
) -> str:
    def f(v):
        return "-" if v is None else f"{v:.6f}"

    return (
        "nme fr@0.1 auc@0.1 | mae fr@10 | ap\n"
        f"{f(nme_value)} {f(fr)} {f(auc)} | {f(mae)} {f(fr10)} | {f(ap)}\n"
    )
