"""Multibox objective: smooth-L1 on matched boxes, cross-entropy with 3:1 hard negatives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import VARIANCES, DefaultBoxSet, MatchResult, corner_to_center, encode, match
from .heads import RawPredictions
from .tensor import Tensor, add, affine, log_softmax, smooth_l1, softmax_ce


class ContractError(RuntimeError):
    pass


@dataclass
class Targets:
    labels: np.ndarray  # (B, N) class per anchor, 0 = background
    loc: np.ndarray  # (B, N, 4) encoded offsets (zero where background)
    matches: list[MatchResult]

    @property
    def positive(self):
        return self.labels > 0


@dataclass
class MultiboxLossReport:
    total: Tensor
    loc: float
    conf: float
    num_pos: int
    num_neg: int


def build_targets(defaults: DefaultBoxSet, gt_boxes, gt_labels, threshold=0.5, variances=VARIANCES):
    """Match every image's corner-form ground truths and encode regression targets.

    ``gt_labels`` hold class ids starting at 1.
    """
    n = len(defaults)
    corners = defaults.corners
    labels = np.zeros((len(gt_boxes), n), dtype=np.int64)
    loc = np.zeros((len(gt_boxes), n, 4))
    matches = []
    for i, (boxes, cls) in enumerate(zip(gt_boxes, gt_labels)):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        m = match(corners, boxes, threshold)
        matches.append(m)
        pos = m.positive
        if pos.any():
            labels[i, pos] = np.asarray(cls, dtype=np.int64)[m.matched_gt[pos]]
            loc[i, pos] = encode(corner_to_center(boxes[m.matched_gt[pos]]), defaults.boxes[pos], variances)
    return Targets(labels, loc, matches)


def background_loss(conf_logits):
    """Per-anchor cross-entropy against the background class."""
    return -log_softmax(conf_logits)[..., 0]


def mine_negatives(conf_logits, positive, ratio=3.0):
    """Per image, the ``ratio * num_pos`` non-positive anchors with the highest background loss.

    Ties go to the lower anchor index.
    """
    bg = background_loss(conf_logits)
    neg = np.zeros_like(positive)
    for i in range(positive.shape[0]):
        n_pos = int(positive[i].sum())
        k = min(int(ratio * n_pos), int((~positive[i]).sum()))
        if k == 0:
            continue
        cand = np.where(positive[i], -np.inf, bg[i])
        order = np.argsort(-cand, kind="stable")
        neg[i, order[:k]] = True
    return neg


def multibox_loss(preds: RawPredictions, targets: Targets, neg_pos_ratio=3.0) -> MultiboxLossReport:
    """total = (loc + conf) / max(N, 1), N the number of positives in the batch."""
    if preds.loc.shape[:2] != targets.labels.shape:
        raise ContractError(
            f"predictions have {preds.loc.shape[:2]} rows but targets have {targets.labels.shape}")
    pos = targets.positive
    neg = mine_negatives(preds.conf.data, pos, neg_pos_ratio)
    n_pos = int(pos.sum())
    loc = smooth_l1(preds.loc, targets.loc, mask=pos[..., None], tag="loss.loc")
    conf = softmax_ce(preds.conf, targets.labels, mask=pos | neg, tag="loss.conf")
    total = affine(add(loc, conf), 1.0 / max(n_pos, 1), tag="loss.total")
    return MultiboxLossReport(total, loc.item(), conf.item(), n_pos, int(neg.sum()))
