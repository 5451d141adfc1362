"""Detection metrics and throughput measurement.

AP is the all-point (area) interpolated precision-recall integral at a fixed
IoU threshold. Size buckets follow the COCO convention scaled to a 64-pixel
canvas: small < 12^2 px, medium < 30^2 px, large otherwise.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .boxes import Detection, iou_matrix

SMALL_AREA = 12.0 ** 2
MEDIUM_AREA = 30.0 ** 2
CANVAS = 64


def box_area_px(box, canvas=CANVAS):
    return (box[2] - box[0]) * (box[3] - box[1]) * canvas * canvas


def _score_order(dets):
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def pr_curve(dets, gts, iou_thresh=0.5, gt_ignore=None, det_ignore_fn=None):
    """Greedy TP/FP assignment in score order.

    ``gts`` maps image id -> (G, 4) boxes. ``gt_ignore`` maps image id ->
    bool mask of ground truths that neither count as positives nor make a
    matching detection a false positive. ``det_ignore_fn(det)`` marks
    unmatched detections to drop. Returns (tp, fp, n_positive).
    """
    gt_ignore = gt_ignore or {}
    n_pos = sum(int((~gt_ignore.get(k, np.zeros(len(v), bool))).sum()) for k, v in gts.items())
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    # best-overlap ground truth per detection, computed image by image
    best = np.zeros(len(dets))
    best_j = np.full(len(dets), -1, dtype=np.int64)
    by_image = {}
    for i, d in enumerate(dets):
        by_image.setdefault(d.image_id, []).append(i)
    for k, idx in by_image.items():
        g = gts.get(k)
        if g is None or len(g) == 0:
            continue
        ov = iou_matrix(np.array([dets[i].box for i in idx]), g)
        best_j[idx] = ov.argmax(axis=1)
        best[idx] = ov.max(axis=1)
    tp, fp = [], []
    for i in _score_order(dets):
        d, j = dets[i], best_j[i]
        if j >= 0 and best[i] >= iou_thresh:
            ign = gt_ignore.get(d.image_id)
            if ign is not None and ign[j]:
                continue
            hit = not used[d.image_id][j]
            used[d.image_id][j] = True
            tp.append(1 if hit else 0)
            fp.append(0 if hit else 1)
            continue
        if det_ignore_fn is not None and det_ignore_fn(d):
            continue
        tp.append(0)
        fp.append(1)
    return np.array(tp, dtype=np.float64), np.array(fp, dtype=np.float64), n_pos


def area_under_pr(tp, fp, n_pos):
    if n_pos == 0:
        return None
    if len(tp) == 0:
        return 0.0
    ctp, cfp = np.cumsum(tp), np.cumsum(fp)
    recall = ctp / n_pos
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]).sum())


def average_precision(dets, gts, iou_thresh=0.5):
    """AP of one class. ``gts``: image id -> (G, 4) corner boxes. None when there are no gts."""
    return area_under_pr(*pr_curve(dets, gts, iou_thresh))


def _class_split(dets, gt_by_image, cls):
    cd = [d for d in dets if d.class_id == cls]
    cg = {k: boxes[labels == cls] for k, (boxes, labels) in gt_by_image.items()}
    return cd, cg


def size_bucketed_ap(dets, gts, iou_thresh=0.5, small=SMALL_AREA, medium=MEDIUM_AREA):
    """AP per size bucket for one class; buckets without ground truth are absent.

    Ground truths outside the bucket are ignored (a detection matching one
    is neither TP nor FP); unmatched detections outside the bucket's area
    range are dropped.
    """
    ranges = {"S": (0.0, small), "M": (small, medium), "L": (medium, np.inf)}
    out = {}
    for name, (lo, hi) in ranges.items():
        ignore = {}
        for k, g in gts.items():
            areas = np.array([box_area_px(b) for b in g]) if len(g) else np.zeros(0)
            ignore[k] = ~((areas >= lo) & (areas < hi))
        outside = lambda d, lo=lo, hi=hi: not (lo <= box_area_px(d.box) < hi)  # noqa: E731
        ap = area_under_pr(*pr_curve(dets, gts, iou_thresh, ignore, outside))
        if ap is not None:
            out[name] = ap
    return out


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    mAP: float
    size_ap: dict[str, float]
    recall_at_100: float
    det_histogram: dict[int, int] = field(default_factory=dict)
    box_in_box: float | None = None

    def lines(self):
        out = [f"mAP={self.mAP:.6f}"]
        out += [f"AP_class{c}={v:.6f}" for c, v in sorted(self.per_class_ap.items())]
        out += [f"AP_{k}={v:.6f}" for k, v in self.size_ap.items()]
        out.append(f"recall@100={self.recall_at_100:.6f}")
        if self.box_in_box is not None:
            out.append(f"box_in_box_rate={self.box_in_box:.6f}")
        out += [f"dets_per_image[{k}]={v}" for k, v in sorted(self.det_histogram.items())]
        return out


def recall_at(dets, gt_by_image, top=100, iou_thresh=0.5):
    """Class-aware recall using each image's ``top`` highest-scoring detections."""
    per_image = {}
    for d in dets:
        per_image.setdefault(d.image_id, []).append(d)
    found = total = 0
    for k, (boxes, labels) in gt_by_image.items():
        total += len(boxes)
        mine = sorted(per_image.get(k, []), key=lambda d: -d.score)[:top]
        for cls in np.unique(labels):
            g = boxes[labels == cls]
            cd = [d for d in mine if d.class_id == cls]
            tp, _, _ = pr_curve(cd, {k: g}, iou_thresh)
            found += int(tp.sum())
    return found / total if total else 0.0


def evaluate(dets, gt_by_image, num_classes, iou_thresh=0.5, small=SMALL_AREA, medium=MEDIUM_AREA,
             recall_top=100) -> EvalReport:
    """Per-class AP, mAP over classes with ground truth, pooled size-bucket AP, recall@top."""
    per_class, buckets = {}, {}
    for cls in range(1, num_classes + 1):
        cd, cg = _class_split(dets, gt_by_image, cls)
        ap = average_precision(cd, cg, iou_thresh)
        if ap is not None:
            per_class[cls] = ap
        for k, v in size_bucketed_ap(cd, cg, iou_thresh, small, medium).items():
            buckets.setdefault(k, []).append(v)
    m = float(np.mean(list(per_class.values()))) if per_class else 0.0
    size_ap = {k: float(np.mean(v)) for k, v in buckets.items()}
    counts = {}
    for d in dets:
        counts[d.image_id] = counts.get(d.image_id, 0) + 1
    hist = {}
    for k in gt_by_image:
        n = counts.get(k, 0)
        hist[n] = hist.get(n, 0) + 1
    return EvalReport(per_class, m, size_ap, recall_at(dets, gt_by_image, recall_top, iou_thresh), hist)


def run_detector(model, dataset, batch_size=50):
    """All post-processed detections of ``model`` over ``dataset`` (iterable of samples)."""
    dets, batch = [], []

    def flush():
        images = np.stack([s.image for s in batch])
        for lst in model.detect(images, [s.sample_id for s in batch]):
            dets.extend(lst)
        batch.clear()

    for s in dataset:
        batch.append(s)
        if len(batch) == batch_size:
            flush()
    if batch:
        flush()
    return dets


# --- throughput ----------------------------------------------------------------

@dataclass
class FpsReport:
    median_ms: float
    p95_ms: float
    images_per_second: float
    batch_size: int
    repeats: int
    macs: int

    def lines(self):
        return [f"median_ms_per_image={self.median_ms:.4f}", f"p95_ms_per_image={self.p95_ms:.4f}",
                f"images_per_second={self.images_per_second:.2f}", f"batch_size={self.batch_size}",
                f"repeats={self.repeats}", f"macs_per_image={self.macs}"]


def benchmark_fps(model, images, repeats=10, warmup=3, clock=time.perf_counter) -> FpsReport:
    """Per-image wall-clock latency of detect() (forward + decode + NMS)."""
    images = np.asarray(images, dtype=np.float64)
    for _ in range(warmup):
        model.detect(images)
    times = []
    for _ in range(max(repeats, 1)):
        t0 = clock()
        model.detect(images)
        times.append((clock() - t0) / len(images))
    times = np.array(times) * 1e3
    med = float(np.median(times))
    p95 = float(np.percentile(times, 95)) if len(times) > 1 else med
    return FpsReport(med, p95, 1e3 / med if med > 0 else float("inf"), len(images), len(times),
                     model.macs()["total"])


def compare_latency(models, images, rounds=15, repeats=3, warmup=1):
    """Median per-image latency (ms) of each named model, measured round-robin.

    Interleaving spreads slow drift (frequency scaling, other processes)
    evenly over the models instead of charging it to whichever ran last.
    """
    acc = {name: [] for name in models}
    for _ in range(rounds):
        for name, model in models.items():
            acc[name].append(benchmark_fps(model, images, repeats, warmup).median_ms)
    return {name: float(np.median(v)) for name, v in acc.items()}
