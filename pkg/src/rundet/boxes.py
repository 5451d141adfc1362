"""Default boxes, overlap, matching, the offset codec, NMS and the box-in-box rate.

Boxes are fractions of the image size. Center form is (cx, cy, w, h); corner
form is (x1, y1, x2, y2).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels

ASPECT_RATIOS = (1.0, 2.0, 3.0, 1 / 2, 1 / 3)
VARIANCES = (0.1, 0.2)


class BoxConfigError(ValueError):
    pass


@dataclass
class DefaultBoxSet:
    boxes: np.ndarray  # (N, 4) center form
    scales: list[float]
    feature_sizes: list[int]
    aspect_ratios: tuple[float, ...] = ASPECT_RATIOS

    def __len__(self):
        return len(self.boxes)

    @property
    def corners(self):
        return center_to_corner(self.boxes)


@dataclass
class MatchResult:
    matched_gt: np.ndarray  # (N,) gt index per default box, -1 for background
    gt_best: np.ndarray  # (G,) default index claimed by each gt

    @property
    def positive(self):
        return self.matched_gt >= 0


@dataclass
class Detection:
    class_id: int
    score: float
    box: tuple[float, float, float, float]  # corner form
    image_id: str = ""


def center_to_corner(b):
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def corner_to_center(b):
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def level_scales(k, s_min=0.2, s_max=0.9):
    if k < 2:
        raise BoxConfigError("default boxes need at least two levels")
    return [s_min + (s_max - s_min) * l / (k - 1) for l in range(k)]


def generate_default_boxes(feature_sizes, s_min=0.2, s_max=0.9, aspect_ratios=ASPECT_RATIOS):
    """Six boxes per cell: each aspect ratio at scale s_l, plus a square at sqrt(s_l*s_{l+1}).

    Order is (level, row, column, anchor) to match the heads' row layout.
    """
    k = len(feature_sizes)
    scales = level_scales(k, s_min, s_max)
    nxt = scales[1:] + [1.0]
    out = []
    for l, n in enumerate(feature_sizes):
        s = scales[l]
        shapes = [(s * math.sqrt(ar), s / math.sqrt(ar)) for ar in aspect_ratios]
        extra = math.sqrt(s * nxt[l])
        shapes.append((extra, extra))
        shapes = np.clip(np.array(shapes), 0.0, 1.0)
        centers = (np.arange(n) + 0.5) / n
        cy, cx = np.meshgrid(centers, centers, indexing="ij")
        grid = np.stack([cx, cy], axis=-1).reshape(-1, 1, 2)  # (n*n, 1, 2)
        wh = np.broadcast_to(shapes[None], (n * n, len(shapes), 2))
        out.append(np.concatenate([np.broadcast_to(grid, wh.shape), wh], axis=-1).reshape(-1, 4))
    return DefaultBoxSet(np.ascontiguousarray(np.concatenate(out)), scales, list(feature_sizes),
                         tuple(aspect_ratios))


def iou(a, b):
    """Intersection over union of two corner-form boxes."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    return kernels.iou_matrix(a, b)


def match(defaults, ground_truths, threshold=0.5):
    """Assign ground truths to default boxes (both corner form).

    Ground truths, in index order, each claim their highest-IoU default box
    not yet claimed, regardless of threshold. Every other default takes the
    ground truth it overlaps most (lowest index on ties) if that IoU reaches
    ``threshold``.
    """
    defaults = np.asarray(defaults, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(ground_truths, dtype=np.float64).reshape(-1, 4)
    n = len(defaults)
    matched = np.full(n, -1, dtype=np.int64)
    if len(gts) == 0:
        return MatchResult(matched, np.zeros(0, dtype=np.int64))
    ov = iou_matrix(gts, defaults)  # (G, N)
    best_gt = ov.argmax(axis=0)
    best_ov = ov[best_gt, np.arange(n)]
    matched[best_ov >= threshold] = best_gt[best_ov >= threshold]
    claimed = np.zeros(n, dtype=bool)
    gt_best = np.empty(len(gts), dtype=np.int64)
    for g in range(len(gts)):
        row = np.where(claimed, -1.0, ov[g])
        d = int(row.argmax())
        gt_best[g] = d
        claimed[d] = True
        matched[d] = g
    return MatchResult(matched, gt_best)


def encode(gt, default, variances=VARIANCES):
    """Regression targets of center-form ``gt`` relative to center-form ``default``."""
    gt, d = np.asarray(gt, dtype=np.float64), np.asarray(default, dtype=np.float64)
    v1, v2 = variances
    return np.concatenate([
        (gt[..., :2] - d[..., :2]) / (d[..., 2:] * v1),
        np.log(gt[..., 2:] / d[..., 2:]) / v2,
    ], axis=-1)


def decode(t, default, variances=VARIANCES):
    """Inverse of :func:`encode`; returns center form, unclipped."""
    t, d = np.asarray(t, dtype=np.float64), np.asarray(default, dtype=np.float64)
    v1, v2 = variances
    return np.concatenate([
        d[..., :2] + t[..., :2] * v1 * d[..., 2:],
        d[..., 2:] * np.exp(t[..., 2:] * v2),
    ], axis=-1)


def nms_indices(boxes, scores, iou_thresh=0.45, top_k=200):
    """Greedy NMS over one class. Ties in score keep the lower index first."""
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.ascontiguousarray(scores, dtype=np.float64).reshape(-1)
    if len(scores) == 0:
        return np.zeros(0, dtype=np.int64)
    return kernels.nms(boxes, scores, float(iou_thresh), int(top_k))


def nms(dets, iou_thresh=0.45, top_k=200):
    """Per-class (and per-image) greedy NMS over :class:`Detection` objects."""
    groups = {}
    for i, d in enumerate(dets):
        groups.setdefault((d.image_id, d.class_id), []).append(i)
    kept = []
    for key in groups:
        idx = groups[key]
        boxes = np.array([dets[i].box for i in idx], dtype=np.float64)
        scores = np.array([dets[i].score for i in idx], dtype=np.float64)
        kept.extend(dets[idx[j]] for j in nms_indices(boxes, scores, iou_thresh, top_k))
    kept.sort(key=lambda d: -d.score)
    return kept


def postprocess(loc, conf_logits, defaults: DefaultBoxSet, variances=VARIANCES,
                conf_floor=0.01, iou_thresh=0.45, top_k=200, image_id=""):
    """Turn one image's raw rows into detections: softmax, decode, floor, per-class NMS."""
    z = conf_logits - conf_logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    boxes = np.clip(center_to_corner(decode(loc, defaults.boxes, variances)), 0.0, 1.0)
    dets = []
    for c in range(1, p.shape[1]):
        sel = np.nonzero(p[:, c] > conf_floor)[0]
        if len(sel) == 0:
            continue
        keep = nms_indices(boxes[sel], p[sel, c], iou_thresh, top_k)
        for j in keep:
            i = sel[j]
            dets.append(Detection(c, float(p[i, c]), tuple(float(v) for v in boxes[i]), image_id))
    dets.sort(key=lambda d: -d.score)
    return dets


def intersection_over_smaller(a, b):
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    smaller = min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))
    return ix * iy / smaller if smaller > 0 else 0.0


def box_in_box_counts(dets, containment_iof=0.9, min_score=0.0):
    """(contained pairs, same-class pairs) over detections of the same image and class."""
    groups = {}
    for d in dets:
        if d.score >= min_score:
            groups.setdefault((d.image_id, d.class_id), []).append(d.box)
    hits = pairs = 0
    for boxes in groups.values():
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                pairs += 1
                if intersection_over_smaller(boxes[i], boxes[j]) >= containment_iof:
                    hits += 1
    return hits, pairs


def box_in_box_rate(dets, containment_iof=0.9, min_score=0.0):
    """Fraction of same-class detection pairs where one box essentially sits inside the other."""
    hits, pairs = box_in_box_counts(dets, containment_iof, min_score)
    return hits / pairs if pairs else 0.0


# --- detection dump ------------------------------------------------------------

def format_detection(d: Detection):
    x1, y1, x2, y2 = d.box
    return f"{d.image_id} {d.class_id} {d.score:.6f} {x1:.6f} {y1:.6f} {x2:.6f} {y2:.6f}"


def write_detections(path, dets):
    with open(path, "w", encoding="utf-8") as fh:
        for d in dets:
            fh.write(format_detection(d) + "\n")


def read_detections(path):
    dets = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            dets.append(Detection(int(parts[1]), float(parts[2]),
                                  tuple(float(v) for v in parts[3:]), parts[0]))
    return dets
