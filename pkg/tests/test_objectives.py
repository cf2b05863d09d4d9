import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vertseg.imaging import BinaryMask
from vertseg.objectives import (MetricsReport, bce, bce_loss, binarize, combined_loss, confusion_counts,
                                dice_loss, dice_score, iou, soft_dice)
from vertseg.tensor import DimensionError, Tensor, grad_check


def count_sets(a, b):
    """Brute-force set sizes from pixel coordinates."""
    xs = {(i, j) for i, j in zip(*np.nonzero(a))}
    ys = {(i, j) for i, j in zip(*np.nonzero(b))}
    return len(xs & ys), len(xs), len(ys), len(xs | ys)


def shifted_blocks():
    x = np.zeros((4, 4), dtype=np.uint8)
    x[:2, :2] = 1
    y = np.roll(x, 1, axis=1)
    return x, y


masks = st.integers(1, 16).flatmap(
    lambda h: st.integers(1, 16).flatmap(
        lambda w: st.tuples(arrays(np.uint8, (h, w), elements=st.integers(0, 1)),
                            arrays(np.uint8, (h, w), elements=st.integers(0, 1)))))


class TestHardMetrics:
    def test_identical(self):
        x, _ = shifted_blocks()
        assert dice_score(x, x) == 1.0 and iou(x, x) == 1.0

    def test_disjoint(self):
        x = np.zeros((4, 4))
        y = np.zeros((4, 4))
        x[0, 0] = y[3, 3] = 1
        assert dice_score(x, y) == 0.0 and iou(x, y) == 0.0

    def test_shifted_block(self):
        x, y = shifted_blocks()
        assert count_sets(x, y) == (2, 4, 4, 6)
        assert dice_score(x, y) == 0.5
        assert iou(x, y) == pytest.approx(2 / 6, abs=1e-15)

    def test_both_empty(self):
        z = np.zeros((3, 3))
        assert dice_score(z, z) == 1.0 and iou(z, z) == 1.0

    def test_mask_types_and_mismatch(self):
        x, y = shifted_blocks()
        assert dice_score(BinaryMask(x), BinaryMask(y)) == 0.5
        with pytest.raises(DimensionError):
            dice_score(np.zeros((2, 2)), np.zeros((2, 3)))

    @given(masks)
    def test_against_set_counting(self, pair):
        a, b = pair
        inter, na, nb, union = count_sets(a, b)
        d = 1.0 if na + nb == 0 else 2 * inter / (na + nb)
        j = 1.0 if union == 0 else inter / union
        assert dice_score(a, b) == d and iou(a, b) == j

    @given(masks)
    def test_identity_and_order(self, pair):
        a, b = pair
        d, j = dice_score(a, b), iou(a, b)
        assert abs(j - d / (2 - d)) <= 1e-12
        assert d >= j
        if d == j:
            assert d in (0.0, 1.0)

    @given(masks)
    def test_symmetry_and_flips(self, pair):
        a, b = pair
        assert dice_score(a, b) == dice_score(b, a) and iou(a, b) == iou(b, a)
        for f in (np.fliplr, np.flipud):
            assert dice_score(f(a), f(b)) == dice_score(a, b)
            assert iou(f(a), f(b)) == iou(a, b)

    @given(masks, st.data())
    def test_fixing_a_pixel_never_hurts(self, pair, data):
        pred, truth = pair
        wrong = np.argwhere(pred != truth)
        if len(wrong) == 0:
            return
        i, j = wrong[data.draw(st.integers(0, len(wrong) - 1))]
        fixed = pred.copy()
        fixed[i, j] = truth[i, j]
        assert dice_score(fixed, truth) >= dice_score(pred, truth)

    def test_confusion_counts(self):
        x, y = shifted_blocks()
        assert confusion_counts(x, y) == (2, 2, 2)


class TestSoft:
    def test_soft_dice_perfect(self):
        t = np.zeros((4, 4))
        t[1:3, 1:3] = 1
        assert soft_dice(t, t) == 1.0

    def test_soft_dice_half(self):
        n = 25
        assert soft_dice(np.full((5, 5), 0.5), np.ones((5, 5))) == pytest.approx(2 * (0.5 * n) / (0.5 * n + n))
        assert soft_dice(np.full((5, 5), 0.5), np.ones((5, 5))) == pytest.approx(2 / 3)

    def test_soft_dice_empty_smoothed(self):
        assert soft_dice(np.zeros((3, 3)), np.zeros((3, 3)), smooth=1.0) == 1.0

    def test_soft_dice_range_check(self):
        with pytest.raises(ValueError):
            soft_dice(np.full((2, 2), 1.5), np.ones((2, 2)))

    @given(masks, st.data())
    def test_soft_dice_of_binarized_equals_hard(self, pair, data):
        truth = pair[1]
        probs = data.draw(arrays(np.float64, truth.shape, elements=st.floats(0, 1)))
        hard = binarize(probs, 0.5)
        assert soft_dice(hard.astype(float), truth) == pytest.approx(dice_score(hard, truth), abs=1e-12)

    def test_bce_half(self):
        t = np.random.default_rng(0).integers(0, 2, size=(6, 6))
        assert bce(np.full((6, 6), 0.5), t) == pytest.approx(math.log(2), abs=1e-12)

    def test_bce_single_pixel(self):
        assert bce(np.array([[0.25]]), np.array([[1]])) == pytest.approx(-math.log(0.25), abs=1e-12)
        assert bce(np.array([[0.25]]), np.array([[1]])) == pytest.approx(1.3863, abs=1e-4)

    def test_bce_perfect_is_near_zero(self):
        t = np.array([[0, 1], [1, 0]], dtype=float)
        assert bce(t, t) < 1e-6


class TestCombinedLoss:
    def test_half_prediction(self):
        loss = combined_loss(Tensor(np.full((1, 1, 4, 4), 0.5)), np.ones((4, 4)), smooth=0.0)
        assert float(loss.data) == pytest.approx(1 - 2 / 3 + math.log(2), abs=1e-12)
        assert float(loss.data) == pytest.approx(1.0265, abs=1e-4)

    def test_perfect_prediction(self):
        t = np.zeros((1, 1, 6, 6))
        t[0, 0, 2:4, 1:5] = 1
        assert float(combined_loss(Tensor(t), t[0, 0]).data) < 1e-5

    def test_non_negative(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = rng.uniform(size=(2, 1, 5, 5))
            t = rng.integers(0, 2, size=(2, 5, 5))
            assert float(combined_loss(Tensor(p), t).data) >= 0

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("smooth", [0.0, 1.0])
    def test_gradient(self, seed, smooth):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0.05, 0.95, size=(2, 1, 4, 5))
        t = rng.integers(0, 2, size=(2, 4, 5))
        rep = grad_check(lambda x: combined_loss(x, t, smooth=smooth), [Tensor(p)])
        assert rep["input0"] < 1e-4

    def test_matches_components(self):
        rng = np.random.default_rng(3)
        p = rng.uniform(0.05, 0.95, size=(1, 1, 6, 6))
        t = rng.integers(0, 2, size=(6, 6))
        expected = 1 - soft_dice(p, t, smooth=1.0) + bce(p, t)
        assert float(combined_loss(Tensor(p), t).data) == pytest.approx(expected, abs=1e-12)


class TestReport:
    def make(self):
        rep = MetricsReport(split="test")
        x, y = shifted_blocks()
        rep.add("a", dice_score(x, y), iou(x, y), 0.3)
        rep.add("b", 1.0, 1.0, 0.01)
        return rep

    def test_means_and_validate(self):
        rep = self.make()
        rep.validate()
        assert rep.mean_dice == pytest.approx(0.75)
        assert rep.mean_iou == pytest.approx((1 / 3 + 1) / 2)

    def test_validate_catches_inconsistency(self):
        rep = MetricsReport()
        rep.add("bad", 0.5, 0.5, 0.1)
        with pytest.raises(ValueError):
            rep.validate()

    def test_text_scaled_by_100(self):
        text = self.make().to_text()
        assert "MEAN" in text and "75.00" in text

    def test_round_trip(self, tmp_path):
        rep = self.make()
        txt, js = rep.save(tmp_path)
        import json
        back = MetricsReport.from_dict(json.loads(js.read_text()))
        assert back.per_image == rep.per_image
        assert json.loads(js.read_text())["fields"] == ["id", "dice", "iou", "loss"]


class TestLossPieces:
    @pytest.mark.parametrize("seed", range(20))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0.05, 0.95, size=(3, 1, 4, 4))
        t = rng.integers(0, 2, size=(3, 4, 4))
        assert grad_check(lambda x: dice_loss(x, t), [Tensor(p)])["input0"] < 1e-4
        assert grad_check(lambda x: bce_loss(x, t), [Tensor(p)])["input0"] < 1e-4

    def test_pieces_sum_to_combined(self):
        rng = np.random.default_rng(1)
        p = Tensor(rng.uniform(0.05, 0.95, size=(2, 1, 5, 5)))
        t = rng.integers(0, 2, size=(2, 5, 5))
        total = float(dice_loss(p, t).data) + float(bce_loss(p, t).data)
        assert float(combined_loss(p, t).data) == pytest.approx(total, abs=1e-12)

    def test_single_image_matches_numpy_versions(self):
        rng = np.random.default_rng(2)
        p = rng.uniform(0.05, 0.95, size=(1, 1, 6, 6))
        t = rng.integers(0, 2, size=(6, 6))
        assert float(dice_loss(Tensor(p), t, smooth=0.0).data) == pytest.approx(1 - soft_dice(p, t), abs=1e-12)
        assert float(bce_loss(Tensor(p), t).data) == pytest.approx(bce(p, t), abs=1e-12)
