import time

import numpy as np
import pytest

from mercnn.errors import UsageError
from mercnn.geometry import iou_matrix
from mercnn.roi_exhaustive import ExhaustiveConfig, ScaleStep, exhaustive_windows, size_halving_check, window_schedule
from oracles import enumerate_windows

DEFAULT = ExhaustiveConfig()

# Worst best-window IoU over the 400 seeded GT boxes of test_coverage_tau,
# computed once with the enumeration oracle in tests/oracles.py and frozen.
COVERAGE_TAU = 0.6894424345933274


def as_set(arr):
    return {tuple(r) for r in arr.tolist()}


class TestSchedule:
    def test_landscape_first_step(self):
        s = window_schedule(400, 200, 1.0)
        assert s[0] == ScaleStep(1.0, 200.0, 200.0, 50.0)

    def test_single_step(self):
        s = window_schedule(25, 25, 1.0)
        assert s == [ScaleStep(1.0, 25.0, 25.0, 6.25)]

    def test_initial_step_fails_guard(self):
        assert window_schedule(25, 25, 2.0) == []

    def test_initial_step_fits_image(self):
        for r in DEFAULT.ratios:
            first = window_schedule(300, 170, r)[0]
            assert max(first.w / 300, first.h / 170) == pytest.approx(1.0)
            assert first.w / first.h == pytest.approx(r, rel=1e-12)

    def test_invariants(self):
        for r in DEFAULT.ratios:
            for st in window_schedule(512, 384, r):
                assert st.stride == 0.25 * min(st.w, st.h)
                assert min(st.w, st.h) >= 25 * (1 - 1e-9)
                assert st.w / st.h == pytest.approx(r, rel=1e-12)

    def test_bad_config(self):
        with pytest.raises(UsageError):
            ExhaustiveConfig(ratios=())
        with pytest.raises(UsageError):
            ExhaustiveConfig(scale_decay=1.0)
        with pytest.raises(UsageError):
            ExhaustiveConfig(stride_factor=0.0)


class TestHalving:
    def test_default_schedule(self):
        assert size_halving_check(window_schedule(512, 512, 1.0))

    def test_wrong_decay(self):
        s = window_schedule(512, 512, 1.0, ExhaustiveConfig(scale_decay=1.1))
        assert len(s) >= 5
        assert not size_halving_check(s)

    def test_too_short(self):
        with pytest.raises(UsageError):
            size_halving_check(window_schedule(512, 512, 1.0)[:4])


class TestWindows:
    def test_tiny_image(self):
        np.testing.assert_array_equal(exhaustive_windows(25, 25), [[0, 0, 25, 25]])

    def test_single_ratio_degenerate(self):
        cfg = ExhaustiveConfig(ratios=(1.0,), min_side=40)
        np.testing.assert_array_equal(exhaustive_windows(40, 40, cfg), [[0, 0, 40, 40]])

    def test_400_matches_oracle(self):
        w = exhaustive_windows(400, 400)
        assert len(w) == 49904
        assert len(as_set(w)) == len(w)
        assert as_set(w) == enumerate_windows(400, 400)

    @pytest.mark.parametrize("min_side,count", [(8, 8681), (10, 3292), (12, 1932), (16, 1031), (25, 156)])
    def test_64_counts(self, min_side, count):
        cfg = ExhaustiveConfig(min_side=min_side)
        w = exhaustive_windows(64, 64, cfg)
        assert len(w) == count
        assert as_set(w) == enumerate_windows(64, 64, min_side=min_side)

    def test_inside_and_ratios(self):
        w = exhaustive_windows(300, 170)
        assert (w[:, 0] >= 0).all() and (w[:, 1] >= 0).all()
        assert (w[:, 2] <= 300).all() and (w[:, 3] <= 170).all()
        r = (w[:, 2] - w[:, 0]) / (w[:, 3] - w[:, 1])
        assert np.all(np.min(np.abs(r[:, None] - np.array(DEFAULT.ratios)[None]), axis=1) < 1e-9)
        assert np.minimum(w[:, 2] - w[:, 0], w[:, 3] - w[:, 1]).min() >= 25 * (1 - 1e-9)

    def test_flush_positions_present(self):
        w = exhaustive_windows(101, 77, ExhaustiveConfig(ratios=(1.0,)))
        assert np.isclose(w[:, 2], 101).any() and np.isclose(w[:, 3], 77).any()

    def test_count_not_decreasing_under_doubling(self):
        # doubling is exact in floating point, so every position carries over
        for W, H in [(25, 25), (40, 31), (64, 64), (100, 37), (77, 130), (26, 120)]:
            assert len(exhaustive_windows(2 * W, 2 * H)) >= len(exhaustive_windows(W, H))

    def test_count_can_drop_with_one_more_pixel(self):
        # the first window tracks the image size, so the grid is rebuilt per size
        assert len(exhaustive_windows(25, 120)) == 35
        assert len(exhaustive_windows(26, 120)) == 32

    def test_deterministic_bytes(self):
        assert exhaustive_windows(333, 250).tobytes() == exhaustive_windows(333, 250).tobytes()

    def test_runtime_512(self):
        t = time.perf_counter()
        w = exhaustive_windows(512, 512)
        assert len(w) == 74916
        assert time.perf_counter() - t < 2.0


def test_coverage_tau():
    rng = np.random.default_rng(2024)
    windows = exhaustive_windows(512, 512)
    ratios = [4, 2, 1, 0.5, 0.25]
    gts = []
    while len(gts) < 400:
        r = ratios[rng.integers(len(ratios))]
        short = rng.uniform(32, 256)
        w, h = (short * r, short) if r >= 1 else (short, short / r)
        if w > 512 or h > 512:
            continue
        x = rng.uniform(0, 512 - w)
        y = rng.uniform(0, 512 - h)
        gts.append([x, y, x + w, y + h])
    best = iou_matrix(np.array(gts), windows).max(axis=1)
    assert best.min() == pytest.approx(COVERAGE_TAU, abs=1e-12)
