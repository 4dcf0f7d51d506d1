import numpy as np
import pytest

from mercnn.errors import DataError
from mercnn.pipeline import build_proposals, label_dataset
from mercnn.routing import EXPERTS
from mercnn.sampling import BACKGROUND, EXCLUDED, LabeledImage, label_rois, make_training_iteration, sample_expert_batch
from oracles import label_oracle


def random_boxes(rng, n, size=60):
    xy = rng.uniform(0, size - 5, (n, 2))
    return np.hstack([xy, xy + rng.uniform(2, 30, (n, 2))])


class TestLabel:
    def test_identical_is_positive(self):
        lab = label_rois([[0, 0, 10, 20]], [[0, 0, 10, 20]], [2])
        assert lab.classes[0] == 2
        np.testing.assert_array_equal(lab.targets[0], 0.0)
        roi = lab[0]
        assert roi.cls == 2 and roi.target == (0.0, 0.0, 0.0, 0.0)
        assert roi.train_experts == {"S", "V"}

    def test_background_band(self):
        lab = label_rois([[0, 0, 10, 10]], [[5.3846153846, 0, 15.3846153846, 10]], [1])
        assert lab.max_iou[0] == pytest.approx(0.3, abs=1e-6)
        assert lab.classes[0] == BACKGROUND
        assert lab[0].target is None

    def test_excluded(self):
        lab = label_rois([[0, 0, 10, 10]], [[9.0476, 0, 19.0476, 10]], [1])
        assert lab.max_iou[0] == pytest.approx(0.05, abs=1e-4)
        assert lab.classes[0] == EXCLUDED

    def test_boundaries(self):
        half = label_rois([[0, 0, 4, 3]], [[0, 0, 4, 1.5]], [1])
        assert half.max_iou[0] == 0.5 and half.classes[0] == 1
        tenth = label_rois([[0, 0, 10, 1]], [[0, 0, 1, 1]], [1])
        assert tenth.max_iou[0] == 0.1 and tenth.classes[0] == BACKGROUND

    def test_no_gt(self):
        lab = label_rois([[0, 0, 5, 5]], [], [])
        assert lab.classes.tolist() == [EXCLUDED]

    def test_tie_picks_lowest_gt(self):
        lab = label_rois([[0, 0, 10, 10]], [[0, 0, 10, 10], [0, 0, 10, 10]], [3, 1])
        assert lab.classes[0] == 3

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        rois = random_boxes(rng, 40)
        gts = random_boxes(rng, int(rng.integers(1, 5)))
        cls = rng.integers(1, 4, len(gts))
        lab = label_rois(rois, gts, cls)
        for i, (best, label, match) in enumerate(label_oracle(rois.tolist(), gts.tolist(), cls)):
            assert lab.max_iou[i] == pytest.approx(best, abs=1e-12)
            assert lab.classes[i] == label
            if label > 0:
                g, p = gts[match], rois[i]
                tx = ((g[0] + g[2]) / 2 - (p[0] + p[2]) / 2) / (p[2] - p[0])
                assert lab.targets[i, 0] == pytest.approx(tx, abs=1e-12)


def synthetic_image(image_id, n_pos, n_neg, theta_w=20, theta_h=10):
    """Labeled image with exact counts of horizontally shaped positives / negatives."""
    boxes = np.tile([0.0, 0.0, theta_w, theta_h], (n_pos + n_neg + 3, 1))
    max_iou = np.concatenate([np.full(n_pos, 0.8), np.full(n_neg, 0.3), np.full(3, 0.01)])
    classes = np.concatenate([np.ones(n_pos, int), np.zeros(n_neg, int), np.full(3, EXCLUDED)])
    experts = np.tile([theta_w >= theta_h, True, theta_w <= theta_h], (len(boxes), 1))
    return LabeledImage(image_id, boxes, max_iou, classes, np.zeros((len(boxes), 4)), experts)


class TestBatch:
    def test_plenty(self, rng):
        pool = {k: synthetic_image(k, 30, 100) for k in "abc"}
        b = sample_expert_batch(pool, "H", rng)
        assert len(b) == 128 and b.n_pos == 32 and b.n_neg == 96
        assert len(set(b.image_ids)) == 2
        for s in (0, 1):
            assert (b.roi_image == s).sum() == 64

    def test_ten_positive_image(self, rng):
        pool = {"a": synthetic_image("a", 10, 100), "b": synthetic_image("b", 40, 100)}
        b = sample_expert_batch(pool, "H", rng)
        slot_a = b.image_ids.index("a")
        in_a = b.roi_image == slot_a
        assert (b.classes[in_a] > 0).sum() == 10
        assert (b.classes[in_a] == 0).sum() == 54
        assert b.n_pos == 32

    def test_positive_shortfall_filled_with_negatives(self, rng):
        pool = {"a": synthetic_image("a", 5, 100), "b": synthetic_image("b", 7, 100)}
        b = sample_expert_batch(pool, "S", rng)
        assert b.n_pos == 12 and b.n_neg == 116
        for s in (0, 1):
            rows = b.roi_index[(b.roi_image == s) & (b.classes > 0)]
            assert len(np.unique(rows)) == len(rows)

    def test_negative_shortfall_with_replacement(self, rng):
        pool = {"a": synthetic_image("a", 20, 5), "b": synthetic_image("b", 20, 5)}
        b = sample_expert_batch(pool, "H", rng)
        assert len(b) == 128 and b.n_pos == 32 and b.n_neg == 96

    def test_purity_and_no_low_iou(self, rng):
        pool = {"h": synthetic_image("h", 20, 60, 20, 10), "v": synthetic_image("v", 20, 60, 10, 20)}
        with pytest.raises(DataError):
            sample_expert_batch(pool, "H", rng)  # only one image is eligible for H
        pool["h2"] = synthetic_image("h2", 20, 60, 20, 10)
        b = sample_expert_batch(pool, "H", rng)
        assert set(b.image_ids) == {"h", "h2"}
        assert b.max_iou.min() >= 0.1

    def test_deterministic(self):
        pool = {k: synthetic_image(k, 30, 100) for k in "abcd"}
        a = sample_expert_batch(pool, "S", np.random.default_rng(5))
        b = sample_expert_batch(pool, "S", np.random.default_rng(5))
        assert a.image_ids == b.image_ids
        np.testing.assert_array_equal(a.roi_index, b.roi_index)


class TestIteration:
    def test_order_and_determinism(self, small_splits):
        train, _ = small_splits
        pool = label_dataset(train, build_proposals(train, "combined", 1))
        a = make_training_iteration(pool, np.random.default_rng(0))
        b = make_training_iteration(pool, np.random.default_rng(0))
        assert [x.expert for x in a] == list(EXPERTS)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.boxes, y.boxes)

    def test_square_only_dataset(self):
        from mercnn.datasets import SynthConfig, synth_dataset

        cfg = SynthConfig(classes=("square",), theta_ranges=((-0.3, 0.3),), n_train=10, n_test=0)
        train, _ = synth_dataset(cfg)
        pool = label_dataset(train, build_proposals(train, "combined", 1))
        batches = make_training_iteration(pool, np.random.default_rng(0))
        assert [len(b) for b in batches] == [128, 128, 128]

    def test_single_expert(self, small_splits):
        train, _ = small_splits
        pool = label_dataset(train, build_proposals(train, "sparse", 1))
        (b,) = make_training_iteration(pool, np.random.default_rng(0), n_experts=1)
        assert b.expert == "S" and len(b) == 128
        theta = np.log2((b.boxes[:, 2] - b.boxes[:, 0]) / (b.boxes[:, 3] - b.boxes[:, 1]))
        assert np.abs(theta).max() > 1  # shape gating is off
