"""Dense multi-scale, multi-ratio sliding-window RoI generation.

For each aspect ratio the search starts from the largest window of that
ratio that fits the image, slides it with a stride of a quarter of its
shorter side, then shrinks it by ``2 ** (1/4)`` (half size every four
scales) until the shorter side drops below ``min_side``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import UsageError

# Relative slack on the min-side guard so that sizes landing exactly on the
# threshold (e.g. 64 / 2**3 == 8) survive accumulated rounding.
_GUARD_RTOL = 1e-9


@dataclass(frozen=True)
class ScaleStep:
    ratio: float
    w: float
    h: float
    stride: float


@dataclass(frozen=True)
class ExhaustiveConfig:
    ratios: tuple[float, ...] = (4.0, 2.0, 1.0, 0.5, 0.25)
    min_side: float = 25.0
    stride_factor: float = 0.25
    scale_decay: float = 2.0 ** 0.25

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if not self.ratios or any(r <= 0 for r in self.ratios):
            raise UsageError(f"ratios must be a nonempty list of positive numbers: {self.ratios}")
        if self.min_side <= 0:
            raise UsageError("min_side must be positive")
        if not 0 < self.stride_factor <= 1:
            raise UsageError("stride_factor must lie in (0, 1]")
        if self.scale_decay <= 1:
            raise UsageError("scale_decay must exceed 1")

    def to_dict(self) -> dict:
        return {
            "ratios": list(self.ratios),
            "min_side": self.min_side,
            "stride_factor": self.stride_factor,
            "scale_decay": self.scale_decay,
        }


def _passes_guard(w: float, h: float, min_side: float) -> bool:
    return min(w, h) >= min_side * (1.0 - _GUARD_RTOL)


def window_schedule(W: float, H: float, r: float, cfg: ExhaustiveConfig = ExhaustiveConfig()) -> list[ScaleStep]:
    if W < 1 or H < 1:
        raise UsageError(f"image extent must be at least 1x1, got {W}x{H}")
    if r * H <= W:
        w, h = r * H, float(H)
    else:
        w, h = float(W), W / r
    steps = []
    while _passes_guard(w, h, cfg.min_side):
        steps.append(ScaleStep(r, w, h, cfg.stride_factor * min(w, h)))
        w /= cfg.scale_decay
        h /= cfg.scale_decay
    return steps


def _positions(extent: float, size: float, stride: float) -> list[float]:
    pos = []
    i = 0
    while i * stride + size <= extent:
        pos.append(i * stride)
        i += 1
    flush = extent - size
    if flush >= 0 and (not pos or pos[-1] != flush):
        pos.append(flush)
    return pos


def exhaustive_windows(W: float, H: float, cfg: ExhaustiveConfig = ExhaustiveConfig()) -> np.ndarray:
    """All windows for a ``W x H`` image as an ``(N, 4)`` array.

    Order is ratio (config order), then scale, then y, then x. Exact
    duplicates are dropped, keeping the first occurrence.
    """
    chunks = []
    for r in cfg.ratios:
        for step in window_schedule(W, H, r, cfg):
            xs = np.array(_positions(W, step.w, step.stride))
            ys = np.array(_positions(H, step.h, step.stride))
            if len(xs) == 0 or len(ys) == 0:
                continue
            yy, xx = np.meshgrid(ys, xs, indexing="ij")
            x1 = xx.ravel()
            y1 = yy.ravel()
            chunks.append(np.stack([x1, y1, x1 + step.w, y1 + step.h], axis=1))
    if not chunks:
        return np.zeros((0, 4))
    boxes = np.concatenate(chunks)
    _, first = np.unique(boxes, axis=0, return_index=True)
    return boxes[np.sort(first)]


def size_halving_check(schedule: Sequence[ScaleStep], rtol: float = 1e-9) -> bool:
    """True iff every fourth step halves the window width."""
    if len(schedule) < 5:
        raise UsageError(f"need at least 5 scale steps, got {len(schedule)}")
    for a, b in zip(schedule, schedule[4:]):
        if not math.isclose(b.w, a.w / 2.0, rel_tol=rtol, abs_tol=0.0):
            return False
    return True
