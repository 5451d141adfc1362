"""Prediction heads: one 3x3 conv pair (loc + conf) per level, shared or separate."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import kaiming
from .tensor import DimensionError, Param, Tensor, conv2d, to_rows


@dataclass
class RawPredictions:
    """Head outputs. ``loc`` is (B, N, 4) and ``conf`` is (B, N, C+1), rows in
    (level, row, column, anchor) order; ``levels`` keeps the per-level maps."""

    loc: Tensor
    conf: Tensor
    levels: list[tuple[Tensor, Tensor]]

    @property
    def num_anchors(self):
        return self.loc.shape[1]


class PredictionHead:
    def __init__(self, in_depths, num_classes, boxes_per_location, mode, rng):
        if mode not in ("unified", "separate"):
            raise ValueError(f"unknown head mode {mode!r}")
        if mode == "unified" and len(set(in_depths)) != 1:
            raise DimensionError(f"unified head needs equal input depths, got {in_depths}")
        self.mode = mode
        self.in_depths = list(in_depths)
        self.num_classes = num_classes
        self.A = boxes_per_location
        n_sets = 1 if mode == "unified" else len(in_depths)
        self.sets = []
        for i in range(n_sets):
            d = in_depths[i]
            pre = "head" if mode == "unified" else f"head.{i + 1}"
            loc_out, conf_out = self.A * 4, self.A * (num_classes + 1)
            self.sets.append((
                Param(kaiming(rng, (loc_out, d, 3, 3), d * 9) * 0.1, f"{pre}.loc.w"),
                Param(np.zeros(loc_out), f"{pre}.loc.b"),
                Param(kaiming(rng, (conf_out, d, 3, 3), d * 9) * 0.1, f"{pre}.conf.w"),
                Param(np.zeros(conf_out), f"{pre}.conf.b"),
            ))

    def params(self):
        return [p for s in self.sets for p in s]

    def slot(self, level):
        """Parameter set used for ``level`` (0-based)."""
        return self.sets[0] if self.mode == "unified" else self.sets[level]

    def predict_level(self, x, level):
        lw, lb, cw, cb = self.slot(level)
        if x.shape[1] != lw.shape[1]:
            raise DimensionError(f"level {level + 1}: depth {x.shape[1]} but head expects {lw.shape[1]}")
        loc = conv2d(x, lw, lb, 1, 1, tag=f"head.{level + 1}.loc")
        conf = conv2d(x, cw, cb, 1, 1, tag=f"head.{level + 1}.conf")
        return loc, conf

    def predict(self, maps) -> RawPredictions:
        levels = [self.predict_level(x, i) for i, x in enumerate(maps)]
        loc = to_rows([l for l, _ in levels], 4)
        conf = to_rows([c for _, c in levels], self.num_classes + 1)
        return RawPredictions(loc, conf, levels)


def parameter_count(depth, boxes_per_location, num_classes, mode, k):
    """Weights + biases of a 3x3 head on ``depth``-channel inputs."""
    per_set = 9 * depth * boxes_per_location * (4 + num_classes + 1) + boxes_per_location * (4 + num_classes + 1)
    return per_set if mode == "unified" else k * per_set
