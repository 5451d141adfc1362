"""Desk-scale backbone: a plain conv-ReLU-pool stack producing the source pyramid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import BackboneConfig
from .tensor import DimensionError, Param, Tensor, as_tensor, conv2d, l2norm_channels, maxpool2d, relu


@dataclass
class FeaturePyramid:
    """Source feature maps in coarse-to-fine order.

    ``maps`` are what prediction sees (the first may be L2-normalized);
    ``raw`` are the plain stage outputs the next stage consumes.
    """

    stages: list[int]
    maps: list[Tensor]
    raw: list[Tensor]

    def __len__(self):
        return len(self.maps)


def kaiming(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def stage_sizes(cfg: BackboneConfig):
    """Spatial size after each stage: stage 1 keeps the input size, later ones halve it."""
    sizes, n = [], cfg.input_size
    for i in range(len(cfg.widths)):
        if i > 0:
            n //= 2
        sizes.append(n)
    return sizes


class Backbone:
    def __init__(self, cfg: BackboneConfig, rng):
        self.cfg = cfg
        sizes = stage_sizes(cfg)
        src = [sizes[s - 1] for s in cfg.sources]
        if any(a <= b for a, b in zip(src, src[1:])) or src[-1] < 1:
            raise DimensionError(f"source spatial sizes must strictly decrease, got {src}")
        self.weights, self.biases = [], []
        c_in = 3
        for i, c_out in enumerate(cfg.widths):
            self.weights.append(Param(kaiming(rng, (c_out, c_in, 3, 3), c_in * 9), f"backbone.stage{i + 1}.w"))
            self.biases.append(Param(np.zeros(c_out), f"backbone.stage{i + 1}.b"))
            c_in = c_out
        self.gamma = None
        if cfg.l2norm:
            c0 = cfg.widths[cfg.sources[0] - 1]
            self.gamma = Param(np.full(c0, cfg.l2norm_gamma), "backbone.l2norm.gamma")

    @property
    def source_channels(self):
        return [self.cfg.widths[s - 1] for s in self.cfg.sources]

    @property
    def source_sizes(self):
        sizes = stage_sizes(self.cfg)
        return [sizes[s - 1] for s in self.cfg.sources]

    def params(self):
        out = [p for pair in zip(self.weights, self.biases) for p in pair]
        if self.gamma is not None:
            out.append(self.gamma)
        return out

    def stage(self, i, x):
        """Apply stage ``i`` (0-based): 2x2 max-pool (except the first) then 3x3 conv + ReLU."""
        if i > 0:
            x = maxpool2d(x, 2, 2, tag=f"backbone.stage{i + 1}.pool")
        x = conv2d(x, self.weights[i], self.biases[i], 1, 1, tag=f"backbone.stage{i + 1}.conv")
        return relu(x, tag=f"backbone.stage{i + 1}.relu")

    def transition(self, x, from_stage, to_stage):
        """Map the output of stage ``from_stage`` to that of ``to_stage`` (1-based)."""
        for i in range(from_stage, to_stage):
            x = self.stage(i, x)
        return x

    def forward_features(self, image) -> FeaturePyramid:
        image = as_tensor(image)
        S = self.cfg.input_size
        if image.data.ndim != 4 or image.shape[1] != 3 or image.shape[2:] != (S, S):
            raise DimensionError(f"expected images of shape (B,3,{S},{S}), got {image.shape}")
        raw, x, done = [], image, 0
        for s in self.cfg.sources:
            x = self.transition(x, done, s)
            raw.append(x)
            done = s
        maps = list(raw)
        if self.gamma is not None:
            maps[0] = l2norm_channels(raw[0], self.gamma, tag="backbone.l2norm")
        return FeaturePyramid(list(self.cfg.sources), maps, raw)
