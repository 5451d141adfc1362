"""Full detector: backbone -> (optional) residual blocks -> prediction head."""
from __future__ import annotations

import numpy as np

from .backbone import Backbone, FeaturePyramid, stage_sizes
from .boxes import generate_default_boxes, postprocess
from .config import ExperimentConfig
from .heads import PredictionHead, RawPredictions
from .resblock import ResidualBlocks, ResidualPyramid
from .tensor import Tensor


class Detector:
    """RUN-style detector; ``resblock.mode = none`` gives the SSD-style baseline
    with heads wired straight onto the backbone sources."""

    def __init__(self, cfg: ExperimentConfig, rng=None):
        if rng is None:
            rng = np.random.default_rng(cfg.schedule.seed)
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone, rng)
        if cfg.resblock.mode == "none":
            self.blocks = None
            depths = self.backbone.source_channels
        else:
            self.blocks = ResidualBlocks(cfg.resblock, self.backbone.source_channels, rng)
            depths = [cfg.resblock.depth] * len(cfg.backbone.sources)
        self.head = PredictionHead(depths, cfg.head.num_classes, cfg.head.boxes_per_location,
                                   cfg.head.mode, rng)
        self.defaults = generate_default_boxes(self.backbone.source_sizes, cfg.boxes.s_min,
                                               cfg.boxes.s_max)

    @property
    def mode(self):
        return self.cfg.resblock.mode

    def params(self):
        out = self.backbone.params()
        if self.blocks is not None:
            out += self.blocks.params()
        return out + self.head.params()

    def named_params(self):
        return {p.name: p for p in self.params()}

    def features(self, images) -> tuple[FeaturePyramid, ResidualPyramid | None]:
        pyramid = self.backbone.forward_features(images)
        enriched = self.blocks.forward(pyramid) if self.blocks is not None else None
        return pyramid, enriched

    def forward(self, images) -> RawPredictions:
        pyramid, enriched = self.features(images)
        maps = enriched.maps if enriched is not None else pyramid.maps
        return self.head.predict(maps)

    __call__ = forward

    def detect(self, images, image_ids=None):
        """Run inference and post-processing; returns one detection list per image."""
        images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
        preds = self.forward(images)
        b = self.cfg.boxes
        out = []
        for i in range(images.shape[0]):
            out.append(postprocess(preds.loc.data[i], preds.conf.data[i], self.defaults,
                                   b.variances, b.conf_floor, b.nms_iou, b.top_k,
                                   image_id="" if image_ids is None else image_ids[i]))
        return out

    def macs(self):
        """Multiply-accumulates of one forward pass on a single image."""
        return count_macs(self.cfg)


def count_macs(cfg: ExperimentConfig):
    """Analytic multiply-accumulate count per image, by component."""
    bb = cfg.backbone
    sizes = stage_sizes(bb)
    out = {"backbone": 0, "resblock": 0, "head": 0}
    c_in = 3
    for n, c_out in zip(sizes, bb.widths):
        out["backbone"] += n * n * c_out * c_in * 9
        c_in = c_out
    src_c = [bb.widths[s - 1] for s in bb.sources]
    src_n = [sizes[s - 1] for s in bb.sources]
    rb = cfg.resblock
    D = rb.depth
    k = len(src_c)
    if rb.mode != "none":
        for l in range(k):
            px = src_n[l] ** 2
            if rb.branch1:
                out["resblock"] += px * D * src_c[l]
            if rb.branch2:
                out["resblock"] += px * (D // 2) * src_c[l] + px * D * (D // 2) * 9
            if rb.mode == "3way" and rb.branch3 and l + 1 < k:
                out["resblock"] += src_n[l + 1] ** 2 * src_c[l + 1] * D * 4 + px * D * D * 9
    A, C = cfg.head.boxes_per_location, cfg.head.num_classes
    for l in range(k):
        d = src_c[l] if rb.mode == "none" else D
        out["head"] += src_n[l] ** 2 * d * 9 * A * (4 + C + 1)
    out["total"] = out["backbone"] + out["resblock"] + out["head"]
    return out
