"""
Box geometry
============

Axis-aligned boxes in continuous pixel coordinates ``(x1, y1, x2, y2)``.
Width is ``x2 - x1`` and height is ``y2 - y1``; there is no "+1" pixel
convention anywhere in the package.

Scalar helpers operate on :class:`Box`; the ``*_array`` / ``*_matrix``
variants take ``(N, 4)`` float arrays and are what the pipeline uses
internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise DataError(f"non-finite box coordinates {vals}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise DataError(f"degenerate box {vals}: need x1<x2 and y1<y2")

    @property
    def w(self) -> float:
        return self.x2 - self.x1

    @property
    def h(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_list(cls, coords: Iterable[float]) -> "Box":
        x1, y1, x2, y2 = (float(c) for c in coords)
        return cls(x1, y1, x2, y2)

    def to_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def transpose(self) -> "Box":
        """Swap the roles of x and y."""
        return Box(self.y1, self.x1, self.y2, self.x2)


class RegressionTarget(NamedTuple):
    tx: float
    ty: float
    tw: float
    th: float


def as_array(boxes) -> np.ndarray:
    """Coerce a Box, a list of Boxes or an array-like to a float64 ``(N, 4)`` array."""
    if isinstance(boxes, Box):
        return np.array([boxes.to_list()], dtype=np.float64)
    if isinstance(boxes, np.ndarray):
        return boxes.astype(np.float64, copy=False).reshape(-1, 4)
    boxes = list(boxes)
    if len(boxes) == 4 and all(np.isscalar(v) for v in boxes):
        return np.asarray([boxes], dtype=np.float64)
    rows = [b.to_list() if isinstance(b, Box) else list(b) for b in boxes]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def valid_mask(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.isfinite(b).all(axis=1) & (b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1])


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` box arrays -> ``(N, M)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def aspect_log_ratio(b: Box) -> float:
    """Log2 of width over height; positive for wide boxes, negative for tall ones."""
    return math.log2(b.w / b.h)


def aspect_log_ratio_array(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.log2((b[:, 2] - b[:, 0]) / (b[:, 3] - b[:, 1]))


def encode_array(proposals: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Row-wise regression targets (tx, ty, tw, th) taking ``proposals`` onto ``gts``."""
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    pw = p[:, 2] - p[:, 0]
    ph = p[:, 3] - p[:, 1]
    gw = g[:, 2] - g[:, 0]
    gh = g[:, 3] - g[:, 1]
    tx = ((g[:, 0] + 0.5 * gw) - (p[:, 0] + 0.5 * pw)) / pw
    ty = ((g[:, 1] + 0.5 * gh) - (p[:, 1] + 0.5 * ph)) / ph
    return np.stack([tx, ty, np.log(gw / pw), np.log(gh / ph)], axis=1)


def decode_array(proposals: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_array`."""
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    t = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    pw = p[:, 2] - p[:, 0]
    ph = p[:, 3] - p[:, 1]
    cx = p[:, 0] + 0.5 * pw + t[:, 0] * pw
    cy = p[:, 1] + 0.5 * ph + t[:, 1] * ph
    w = pw * np.exp(t[:, 2])
    h = ph * np.exp(t[:, 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode_regression(proposal: Box, gt: Box) -> RegressionTarget:
    return RegressionTarget(*encode_array(as_array(proposal), as_array(gt))[0].tolist())


def decode_regression(proposal: Box, t: RegressionTarget | Iterable[float]) -> Box:
    return Box.from_list(decode_array(as_array(proposal), np.asarray(tuple(t)))[0])


def smooth_l1(x):
    """0.5 x^2 inside the unit interval, |x| - 0.5 outside. Works elementwise on arrays."""
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * np.square(x), ax - 0.5)
    return float(out) if np.ndim(out) == 0 else out


def smooth_l1_grad(x):
    out = np.clip(x, -1.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out


def clip_array(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    b[:, 0::2] = np.clip(b[:, 0::2], 0.0, width)
    b[:, 1::2] = np.clip(b[:, 1::2], 0.0, height)
    return b


def clip_to_image(b: Box, width: float, height: float) -> Box:
    """Clamp ``b`` to ``[0, width] x [0, height]``.

    Raises:
        DataError: if nothing of the box survives the clamp.
    """
    if width <= 0 or height <= 0:
        raise DataError(f"image extent must be positive, got {width}x{height}")
    x1, y1, x2, y2 = clip_array(as_array(b), width, height)[0]
    if not (x2 > x1 and y2 > y1):
        raise DataError(f"box {b.to_list()} lies outside the {width}x{height} image")
    return Box(x1, y1, x2, y2)
