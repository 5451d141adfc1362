"""2-way and 3-way residual feature blocks.

Each pyramid level gets its own block. The enriched map is the plain sum of
the branch outputs:

    two-way:    x_hat_l = B1(x_l) + B2(x_l)
    three-way:  x_hat_l = B1(x_l) + B2(x_l) + B3(x_{l+1})   (top level: two-way)

B3 takes the *backbone* feature of the next coarser level, not its enriched
version, so every level can be computed independently.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import FeaturePyramid, kaiming
from .config import ResblockConfig
from .tensor import (DimensionError, Param, Tensor, add, conv2d, deconv2d, deconv_output_size,
                     relu, topological_order)

LARGE_SCALE_DEPTH = 256  # depth used with full-size backbones


@dataclass
class ResidualPyramid:
    maps: list[Tensor]
    mode: str  # "two-way" | "three-way"

    def __len__(self):
        return len(self.maps)


class BranchSet:
    """Branch parameters for one level."""

    def __init__(self, level, c_in, c_next, depth, rng, cfg: ResblockConfig, with_branch3):
        pre = f"resblock.{level}"
        half = depth // 2
        self.level = level
        self.b1 = self.b2a = self.b2b = self.b3d = self.b3c = None
        if cfg.branch1:
            self.b1 = (Param(kaiming(rng, (depth, c_in, 1, 1), c_in), f"{pre}.b1.w"),
                       Param(np.zeros(depth), f"{pre}.b1.b"))
        if cfg.branch2:
            self.b2a = (Param(kaiming(rng, (half, c_in, 1, 1), c_in), f"{pre}.b2a.w"),
                        Param(np.zeros(half), f"{pre}.b2a.b"))
            self.b2b = (Param(kaiming(rng, (depth, half, 3, 3), half * 9), f"{pre}.b2b.w"),
                        Param(np.zeros(depth), f"{pre}.b2b.b"))
        if with_branch3:
            self.b3d = (Param(kaiming(rng, (c_next, depth, 2, 2), c_next), f"{pre}.b3d.w"),
                        Param(np.zeros(depth), f"{pre}.b3d.b"))
            # zero final conv: a fresh branch3 contributes nothing until trained
            self.b3c = (Param(np.zeros((depth, depth, 3, 3)), f"{pre}.b3c.w"),
                        Param(np.zeros(depth), f"{pre}.b3c.b"))

    def params(self):
        out = []
        for pair in (self.b1, self.b2a, self.b2b, self.b3d, self.b3c):
            if pair is not None:
                out.extend(pair)
        return out

    def branch1(self, x):
        w, b = self.b1
        return relu(conv2d(x, w, b, tag=f"resblock.{self.level}.b1.conv"))

    def branch2(self, x):
        w, b = self.b2a
        h = relu(conv2d(x, w, b, tag=f"resblock.{self.level}.b2a.conv"))
        w, b = self.b2b
        return relu(conv2d(h, w, b, 1, 1, tag=f"resblock.{self.level}.b2b.conv"))

    def branch3(self, x_next, size):
        w, b = self.b3d
        if deconv_output_size(x_next.shape[2], 2, 2, 0) != size:
            raise DimensionError(
                f"level {self.level}: deconv of {x_next.shape[2]}px map gives "
                f"{deconv_output_size(x_next.shape[2], 2, 2, 0)}px, expected {size}px")
        h = relu(deconv2d(x_next, w, b, 2, 0, tag=f"resblock.{self.level}.b3d.deconv"))
        w, b = self.b3c
        return conv2d(h, w, b, 1, 1, tag=f"resblock.{self.level}.b3c.conv")


class ResidualBlocks:
    def __init__(self, cfg: ResblockConfig, in_channels, rng):
        if cfg.mode not in ("2way", "3way"):
            raise ValueError(f"ResidualBlocks needs mode 2way or 3way, got {cfg.mode!r}")
        if not (cfg.branch1 or cfg.branch2):
            raise ValueError("at least one of branch1/branch2 must be enabled")
        self.cfg = cfg
        self.depth = cfg.depth
        k = len(in_channels)
        three = cfg.mode == "3way" and cfg.branch3
        self.levels = [
            BranchSet(l + 1, in_channels[l], in_channels[l + 1] if l + 1 < k else None,
                      cfg.depth, rng, cfg, with_branch3=three and l + 1 < k)
            for l in range(k)
        ]

    def params(self):
        return [p for lvl in self.levels for p in lvl.params()]

    def _base_terms(self, lvl, x):
        terms = []
        if lvl.b1 is not None:
            terms.append(lvl.branch1(x))
        if lvl.b2a is not None:
            terms.append(lvl.branch2(x))
        return terms

    def _combine(self, terms, level):
        out = terms[0] if len(terms) == 1 else add(*terms, tag=f"resblock.{level}.sum")
        return relu(out) if self.cfg.post_relu else out

    def two_way_forward(self, pyramid: FeaturePyramid) -> ResidualPyramid:
        maps = [self._combine(self._base_terms(lvl, x), lvl.level)
                for lvl, x in zip(self.levels, pyramid.maps)]
        return ResidualPyramid(maps, "two-way")

    def three_way_forward(self, pyramid: FeaturePyramid) -> ResidualPyramid:
        if len(pyramid) < 2:
            raise DimensionError("three-way blocks need at least two pyramid levels")
        maps = []
        for i, (lvl, x) in enumerate(zip(self.levels, pyramid.maps)):
            terms = self._base_terms(lvl, x)
            if lvl.b3d is not None:
                terms.append(lvl.branch3(pyramid.maps[i + 1], x.shape[2]))
            maps.append(self._combine(terms, lvl.level))
        return ResidualPyramid(maps, "three-way")

    def forward(self, pyramid: FeaturePyramid) -> ResidualPyramid:
        if self.cfg.mode == "3way" and self.cfg.branch3:
            return self.three_way_forward(pyramid)
        return self.two_way_forward(pyramid)


# --- gradient-path audit -------------------------------------------------------

@dataclass
class PathReport:
    level: int
    total_paths: int
    direct_paths: int

    @property
    def decoupled(self):
        return self.total_paths > 0 and self.direct_paths == 0


def is_branch_node(node):
    return node.op in ("conv2d", "deconv2d") and bool(node.tag) and node.tag.startswith("resblock.")


def decoupling_check(pyramid: FeaturePyramid, loss) -> list[PathReport]:
    """Count loss-to-source paths per backbone source, and those avoiding every branch conv.

    A source is decoupled when gradient can only reach it through some
    residual-branch convolution.
    """
    order = topological_order(loss)
    total = {id(loss): 1}
    direct = {id(loss): 1}
    for node in reversed(order):
        t = total.get(id(node), 0)
        d = 0 if is_branch_node(node) else direct.get(id(node), 0)
        for p in node.parents:
            total[id(p)] = total.get(id(p), 0) + t
            direct[id(p)] = direct.get(id(p), 0) + d
    return [PathReport(i + 1, total.get(id(x), 0), direct.get(id(x), 0))
            for i, x in enumerate(pyramid.raw)]
