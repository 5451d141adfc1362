"""Backbone, residual blocks, heads and the assembled detector."""
import numpy as np
import pytest

from rundet.backbone import Backbone, stage_sizes
from rundet.config import ExperimentConfig
from rundet.detector import Detector, count_macs
from rundet.heads import PredictionHead, parameter_count
from rundet.loss import build_targets, multibox_loss
from rundet.resblock import ResidualBlocks, decoupling_check
from rundet.tensor import DimensionError, backward

from conftest import numeric_grad, rel_err, tiny_config


def images(rng, n=2):
    return rng.random((n, 3, 64, 64))


def copy_shared(src, dst):
    theirs = dst.named_params()
    for name, p in src.named_params().items():
        theirs[name].data = p.data.copy()


class TestBackbone:
    def test_stage_sizes(self):
        assert stage_sizes(ExperimentConfig().backbone) == [64, 32, 16, 8, 4, 2]

    def test_source_shapes(self, rng):
        bb = Backbone(ExperimentConfig().backbone, rng)
        pyr = bb.forward_features(images(rng))
        assert [m.shape for m in pyr.maps] == [(2, 64, 16, 16), (2, 64, 8, 8), (2, 64, 4, 4), (2, 64, 2, 2)]

    def test_zero_image_gives_zero_pyramid(self, rng):
        bb = Backbone(ExperimentConfig().backbone, rng)
        pyr = bb.forward_features(np.zeros((1, 3, 64, 64)))
        assert all(not m.data.any() for m in pyr.maps)

    def test_compositional(self, rng):
        bb = Backbone(ExperimentConfig().backbone, rng)
        pyr = bb.forward_features(images(rng))
        again = bb.transition(pyr.raw[0].data, 3, 4)
        np.testing.assert_array_equal(again.data, pyr.raw[1].data)

    def test_only_first_source_normalized(self, rng):
        bb = Backbone(ExperimentConfig().backbone, rng)
        pyr = bb.forward_features(images(rng))
        norms = np.sqrt((pyr.maps[0].data ** 2).sum(axis=1))
        live = norms > 1e-3
        np.testing.assert_allclose(norms[live], 5.0, rtol=1e-6)
        assert pyr.maps[1] is pyr.raw[1]

    def test_wrong_input_size(self, rng):
        with pytest.raises(DimensionError):
            Backbone(ExperimentConfig().backbone, rng).forward_features(np.zeros((1, 3, 32, 32)))


class TestResidualBlocks:
    def setup_method(self):
        self.rng = np.random.default_rng(5)
        self.cfg = ExperimentConfig()
        self.bb = Backbone(self.cfg.backbone, self.rng)
        self.pyr = self.bb.forward_features(images(self.rng))

    def blocks(self, mode, seed=9):
        rc = self.cfg.replace(**{"resblock.mode": mode}).resblock
        return ResidualBlocks(rc, self.bb.source_channels, np.random.default_rng(seed))

    def test_two_way_shapes(self):
        out = self.blocks("2way").forward(self.pyr)
        assert [m.shape for m in out.maps] == [(2, 32, 16, 16), (2, 32, 8, 8), (2, 32, 4, 4), (2, 32, 2, 2)]
        assert out.mode == "two-way"

    def test_sum_of_branches_bitwise(self):
        blk = self.blocks("2way")
        out = blk.forward(self.pyr)
        for lvl, x, m in zip(blk.levels, self.pyr.maps, out.maps):
            np.testing.assert_array_equal(m.data, lvl.branch1(x).data + lvl.branch2(x).data)

    def test_zero_branch2_leaves_branch1(self):
        blk = self.blocks("2way")
        for lvl in blk.levels:
            lvl.b2b[0].data[:] = 0
            lvl.b2b[1].data[:] = 0
        for lvl, x, m in zip(blk.levels, self.pyr.maps, blk.forward(self.pyr).maps):
            np.testing.assert_array_equal(m.data, lvl.branch1(x).data)

    def test_fresh_three_way_equals_two_way(self):
        two, three = self.blocks("2way", seed=1), self.blocks("3way", seed=2)
        for a, b in zip(two.levels, three.levels):
            for name in ("b1", "b2a", "b2b"):
                for pa, pb in zip(getattr(a, name), getattr(b, name)):
                    pb.data = pa.data.copy()
        for m2, m3 in zip(two.forward(self.pyr).maps, three.forward(self.pyr).maps):
            np.testing.assert_array_equal(m2.data, m3.data)

    def test_top_level_has_no_branch3(self):
        blk = self.blocks("3way")
        assert blk.levels[-1].b3d is None
        assert all(lvl.b3d is not None for lvl in blk.levels[:-1])

    def test_branch3_upsamples_next_backbone_map(self):
        lvl = self.blocks("3way").levels[1]
        out = lvl.branch3(self.pyr.raw[2], 8)
        assert out.shape == (2, 32, 8, 8)

    def test_branch3_size_mismatch(self):
        lvl = self.blocks("3way").levels[0]
        with pytest.raises(DimensionError):
            lvl.branch3(self.pyr.raw[2], 16)


class TestDecoupling:
    def loss_of(self, mode, rng):
        cfg = tiny_config(mode, **({"head.mode": "separate"} if mode == "none" else {}))
        det = Detector(cfg, np.random.default_rng(0))
        x = images(rng, 1)
        pyr, enriched = det.features(x)
        maps = enriched.maps if enriched is not None else pyr.maps
        preds = det.head.predict(maps)
        t = build_targets(det.defaults, [[[0.2, 0.2, 0.6, 0.5]]], [[1]])
        loss = multibox_loss(preds, t).total
        backward(loss)
        return pyr, loss

    @pytest.mark.parametrize("mode", ["2way", "3way"])
    def test_residual_graph_decoupled(self, rng, mode):
        pyr, loss = self.loss_of(mode, rng)
        reports = decoupling_check(pyr, loss)
        assert all(r.decoupled for r in reports)

    def test_baseline_has_direct_paths(self, rng):
        pyr, loss = self.loss_of("none", rng)
        assert not any(r.decoupled for r in decoupling_check(pyr, loss))

    def test_path_counts_repeatable(self, rng):
        a = decoupling_check(*self.loss_of("3way", np.random.default_rng(1)))
        b = decoupling_check(*self.loss_of("3way", np.random.default_rng(1)))
        assert [(r.total_paths, r.direct_paths) for r in a] == [(r.total_paths, r.direct_paths) for r in b]
        # the coarsest source feeds one block, finer sources also feed the next stage
        assert a[-1].total_paths < a[0].total_paths


class TestHeads:
    def test_parameter_counts(self):
        assert parameter_count(32, 6, 3, "unified", 4) == 13_872
        assert parameter_count(32, 6, 3, "separate", 4) == 55_488
        assert parameter_count(32, 6, 3, "separate", 1) == parameter_count(32, 6, 3, "unified", 1)

    def test_counts_match_instantiated_params(self, rng):
        for mode, expected in (("unified", 13_872), ("separate", 55_488)):
            head = PredictionHead([32] * 4, 3, 6, mode, rng)
            assert sum(p.data.size for p in head.params()) == expected

    def test_unified_slot_shared(self, rng):
        head = PredictionHead([32] * 4, 3, 6, "unified", rng)
        x = rng.standard_normal((1, 32, 4, 4))
        a, b = head.predict_level(x, 0), head.predict_level(x, 2)
        np.testing.assert_array_equal(a[0].data, b[0].data)
        np.testing.assert_array_equal(a[1].data, b[1].data)

    def test_zero_input_uniform_conf(self, rng):
        head = PredictionHead([8, 8], 3, 6, "unified", rng)
        preds = head.predict([np.zeros((1, 8, 4, 4)), np.zeros((1, 8, 2, 2))])
        assert preds.num_anchors == 6 * 20
        assert not preds.loc.data.any() and not preds.conf.data.any()

    def test_unified_needs_equal_depths(self, rng):
        with pytest.raises(DimensionError):
            PredictionHead([32, 16], 3, 6, "unified", rng)

    def test_shared_gradient_is_sum_over_levels(self, rng):
        head = PredictionHead([4, 4], 2, 2, "unified", rng)
        xs = [rng.standard_normal((1, 4, 4, 4)), rng.standard_normal((1, 4, 2, 2))]

        def grad_with(levels):
            for p in head.params():
                p.zero_grad()
            preds = head.predict([x if i in levels else np.zeros_like(x) for i, x in enumerate(xs)])
            n = preds.num_anchors
            keep = np.zeros((1, n), bool)
            bound = 2 * 16
            keep[0, :bound] = 0 in levels
            keep[0, bound:] = 1 in levels
            from rundet.tensor import softmax_ce
            backward(softmax_ce(preds.conf, np.ones((1, n), int), mask=keep))
            return head.params()[2].grad.copy()

        np.testing.assert_allclose(grad_with({0, 1}), grad_with({0}) + grad_with({1}), atol=1e-12)


class TestDetector:
    def test_default_anchor_rows(self, rng):
        det = Detector(ExperimentConfig(), rng)
        preds = det(images(rng, 1))
        assert preds.loc.shape == (1, 2040, 4) and preds.conf.shape == (1, 2040, 4)
        assert len(det.defaults) == 2040

    def test_baseline_is_separate_heads_on_sources(self, rng):
        det = Detector(ExperimentConfig().replace(**{"resblock.mode": "none", "head.mode": "separate"}), rng)
        assert det.blocks is None
        assert {p.name.split(".")[1] for p in det.head.params()} == {"1", "2", "3", "4"}

    def test_three_way_zero_branch3_equals_two_way(self, rng):
        two = Detector(ExperimentConfig().replace(**{"resblock.mode": "2way"}), np.random.default_rng(3))
        three = Detector(ExperimentConfig(), np.random.default_rng(4))
        copy_shared(two, three)
        x = images(rng)
        np.testing.assert_array_equal(two(x).conf.data, three(x).conf.data)
        np.testing.assert_array_equal(two(x).loc.data, three(x).loc.data)

    def test_composite_gradient(self, rng):
        det = Detector(tiny_config("3way"), np.random.default_rng(0))
        # random b3c wakes branch3; nonzero biases keep ReLU inputs off the kink at 0
        for p in det.params():
            if ".b3c" in p.name:
                p.data = rng.standard_normal(p.shape) * 0.3
            elif p.name.endswith(".b"):
                p.data = rng.uniform(0.01, 0.1, p.shape)
        x = images(rng)
        t = build_targets(det.defaults, [[[0.1, 0.1, 0.4, 0.5]], [[0.3, 0.2, 0.6, 0.5]]], [[1], [3]])

        def loss():
            return multibox_loss(det(x), t).total

        for p in det.params():
            p.zero_grad()
        backward(loss())
        worst = 0.0
        for p in det.params()[::3]:
            idx = tuple(int(rng.integers(0, s)) for s in p.shape)
            fd = numeric_grad(lambda: loss().item(), p.data, idx)
            worst = max(worst, rel_err(fd, p.grad[idx]))
        assert worst < 1e-4

    def test_detect_returns_sorted_lists(self, rng):
        det = Detector(tiny_config("2way"), np.random.default_rng(0))
        out = det.detect(images(rng), ["a", "b"])
        assert len(out) == 2
        assert all(d.image_id == "b" for d in out[1])


class TestMacs:
    def test_desk_ablation_ordering(self):
        cfg = ExperimentConfig().replace(**{"backbone.widths": "16,32,32,32,32,32"})
        base = count_macs(cfg.replace(**{"resblock.mode": "none", "head.mode": "separate"}))["total"]
        two = count_macs(cfg.replace(**{"resblock.mode": "2way"}))["total"]
        three = count_macs(cfg)["total"]
        assert three > two > base

    def test_head_macs_by_hand(self):
        cfg = ExperimentConfig()
        # 3x3 conv, 32 in, 6 * 8 out, over 16^2 + 8^2 + 4^2 + 2^2 cells
        assert count_macs(cfg)["head"] == 340 * 32 * 9 * 48
