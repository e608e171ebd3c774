"""Slow, loop-based reference implementations used to cross-check the metrics."""

import math


def nme(pred, gt, left, right):
    def centroid(idx):
        xs = [gt[i][0] for i in idx]
        ys = [gt[i][1] for i in idx]
        return sum(xs) / len(xs), sum(ys) / len(ys)

    (ax, ay), (bx, by) = centroid(left), centroid(right)
    d = math.sqrt((ax - bx) ** 2 + (ay - by) ** 2)
    total = 0.0
    for (px, py), (gx, gy) in zip(pred, gt):
        total += math.sqrt((px - gx) ** 2 + (py - gy) ** 2)
    return total / len(gt) / d


def failure_rate(errors, threshold):
    bad = 0
    for e in errors:
        if e > threshold:
            bad += 1
    return bad / len(errors)


def ced_auc(errors, cutoff):
    # integrate the right-continuous step F(t) = #{e <= t} / n over [0, cutoff]
    points = sorted({0.0, cutoff, *[e for e in errors if 0.0 <= e <= cutoff]})
    area = 0.0
    for a, b in zip(points[:-1], points[1:]):
        frac = sum(1 for e in errors if e <= a) / len(errors)
        area += frac * (b - a)
    return area / cutoff


def pose_mae(preds, gts):
    per = [0.0, 0.0, 0.0]
    total = 0.0
    for p, g in zip(preds, gts):
        row = 0.0
        for k in range(3):
            per[k] += abs(p[k] - g[k])
            row += abs(p[k] - g[k])
        total += row / 3
    n = len(preds)
    return [v / n for v in per], total / n


def average_precision(confidences, labels):
    ranked = sorted(range(len(labels)), key=lambda i: (-confidences[i], i))
    n_pos = sum(labels)
    precision, recall = [], []
    tp = 0
    for rank, i in enumerate(ranked, start=1):
        tp += labels[i]
        precision.append(tp / rank)
        recall.append(tp / n_pos)
    ap, prev = 0.0, 0.0
    for k in range(len(ranked)):
        best = max(precision[k:])
        ap += (recall[k] - prev) * best
        prev = recall[k]
    return ap


def heatmap_cell(px, py, landmarks, floor=0.5):
    dmin = min(math.sqrt((px - x) ** 2 + (py - y) ** 2) for x, y in landmarks)
    return max(floor, 1.0 / math.sqrt(1.0 + dmin)), dmin
