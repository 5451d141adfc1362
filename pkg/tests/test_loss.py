import math

import numpy as np
import pytest

from rundet.boxes import encode, generate_default_boxes
from rundet.heads import RawPredictions
from rundet.loss import ContractError, Targets, background_loss, build_targets, mine_negatives, multibox_loss
from rundet.tensor import Param, backward


def preds_from(loc, conf):
    return RawPredictions(Param(loc, "loc"), Param(conf, "conf"), [])


def mining_oracle(bg, positive, ratio):
    """Per image: non-positives sorted by (-loss, index), first ratio*n_pos taken."""
    out = np.zeros_like(positive)
    for i in range(len(bg)):
        cands = sorted((j for j in range(bg.shape[1]) if not positive[i, j]), key=lambda j: (-bg[i, j], j))
        for j in cands[:int(ratio * positive[i].sum())]:
            out[i, j] = True
    return out


class TestMining:
    def test_hand_fixture(self):
        # 8 anchors, 2 positives (0, 3); background loss grows with the class-1 logit
        conf = np.zeros((1, 8, 2))
        conf[0, :, 1] = [9.0, 0.5, 3.0, 9.0, -1.0, 2.0, 3.0, 0.1]
        pos = np.zeros((1, 8), bool)
        pos[0, [0, 3]] = True
        neg = mine_negatives(conf, pos, ratio=1.0)
        # hardest non-positives: anchor 2 and 6 tie at logit 3.0, lower index wins both slots
        assert np.flatnonzero(neg[0]).tolist() == [2, 6]
        neg = mine_negatives(conf, pos, ratio=1.5)
        assert np.flatnonzero(neg[0]).tolist() == [2, 5, 6]

    def test_against_sort_oracle(self, rng):
        for _ in range(20):
            conf = np.round(rng.standard_normal((3, 40, 4)), 1)
            pos = rng.random((3, 40)) < 0.1
            bg = background_loss(conf)
            np.testing.assert_array_equal(mine_negatives(conf, pos, 3.0), mining_oracle(bg, pos, 3.0))

    def test_capped_by_available_negatives(self):
        pos = np.array([[True, True, False]])
        assert mine_negatives(np.zeros((1, 3, 2)), pos, 3.0).sum() == 1

    def test_background_loss_values(self):
        bg = background_loss(np.array([[0.0, 0.0], [0.0, math.log(3)]]))
        np.testing.assert_allclose(bg, [math.log(2), math.log(4)])


class TestMultibox:
    def test_one_positive_by_hand(self):
        # anchor 0 positive (class 1), ratio 1 mines one of the three others
        labels = np.array([[1, 0, 0, 0]])
        loc_t = np.zeros((1, 4, 4))
        loc_t[0, 0] = [0.5, -2.0, 0.0, 0.0]
        conf = np.zeros((1, 4, 2))
        conf[0, 2, 1] = 1.0  # hardest negative
        rep = multibox_loss(preds_from(np.zeros((1, 4, 4)), conf), Targets(labels, loc_t, []), 1.0)
        loc = 0.125 + 1.5
        ce = math.log(2) + (math.log(1 + math.e))  # positive + anchor 2 as background
        assert rep.num_pos == 1 and rep.num_neg == 1
        assert rep.loc == pytest.approx(loc)
        assert rep.conf == pytest.approx(ce)
        assert rep.total.item() == pytest.approx(loc + ce)

    def test_normalized_by_positive_count(self, rng):
        labels = np.array([[1, 2, 0, 0, 0, 0, 0, 0]])
        loc, conf = rng.standard_normal((1, 8, 4)), rng.standard_normal((1, 8, 3))
        rep = multibox_loss(preds_from(loc, conf), Targets(labels, rng.standard_normal((1, 8, 4)), []))
        assert rep.total.item() == pytest.approx((rep.loc + rep.conf) / 2)

    def test_no_positives_is_zero(self, rng):
        rep = multibox_loss(preds_from(rng.standard_normal((2, 5, 4)), rng.standard_normal((2, 5, 3))),
                            Targets(np.zeros((2, 5), int), np.zeros((2, 5, 4)), []))
        assert rep.total.item() == 0.0 and rep.num_neg == 0

    def test_anchor_permutation_invariance(self, rng):
        n = 30
        labels = np.where(rng.random((2, n)) < 0.2, rng.integers(1, 4, (2, n)), 0)
        loc, conf, tgt = rng.standard_normal((2, n, 4)), rng.standard_normal((2, n, 4)), rng.standard_normal((2, n, 4))
        perm = rng.permutation(n)
        a = multibox_loss(preds_from(loc, conf), Targets(labels, tgt, [])).total.item()
        b = multibox_loss(preds_from(loc[:, perm], conf[:, perm]), Targets(labels[:, perm], tgt[:, perm], [])).total.item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_loc_gradient_only_on_positives(self, rng):
        labels = np.array([[0, 2, 0, 1, 0, 0]])
        preds = preds_from(rng.standard_normal((1, 6, 4)), rng.standard_normal((1, 6, 4)))
        backward(multibox_loss(preds, Targets(labels, rng.standard_normal((1, 6, 4)), [])).total)
        nonzero_rows = np.flatnonzero(np.abs(preds.loc.grad[0]).sum(axis=1))
        assert nonzero_rows.tolist() == [1, 3]

    def test_row_mismatch_raises(self):
        with pytest.raises(ContractError):
            multibox_loss(preds_from(np.zeros((1, 5, 4)), np.zeros((1, 5, 2))),
                          Targets(np.zeros((1, 6), int), np.zeros((1, 6, 4)), []))


class TestTargets:
    def test_labels_and_offsets(self):
        defaults = generate_default_boxes([2, 1])
        gt = defaults.corners[3:4]
        t = build_targets(defaults, [gt], [[2]])
        assert t.labels[0, 3] == 2
        # corner -> center conversion is not bit-exact, hence the tolerance
        np.testing.assert_allclose(t.loc[0, 3], [0, 0, 0, 0], atol=1e-12)
        assert (t.loc[0, ~t.positive[0]] == 0).all()

    def test_offsets_follow_codec(self):
        defaults = generate_default_boxes([2, 1])
        gt = np.array([[0.1, 0.2, 0.45, 0.5]])
        t = build_targets(defaults, [gt], [[1]])
        for j in np.flatnonzero(t.positive[0]):
            c = np.array([0.275, 0.35, 0.35, 0.3])
            np.testing.assert_allclose(t.loc[0, j], encode(c, defaults.boxes[j]), atol=1e-15)

    def test_empty_image(self):
        t = build_targets(generate_default_boxes([2, 1]), [np.zeros((0, 4))], [[]])
        assert not t.positive.any()
