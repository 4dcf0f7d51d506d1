"""
Detection metrics and RoI-set analyses.

AP is the area under the all-points interpolated precision-recall curve.
Detections are matched greedily in score order, each to the unmatched
ground truth of its class (same image) with the highest IoU, and count as
true positives when that IoU reaches the threshold.
"""

from __future__ import annotations

import math
from typing import Iterable, Mapping, Sequence

import numpy as np

from .datasets import Dataset
from .detection import SCORE_THRESHOLD, Detection, detect
from .errors import DataError
from .geometry import as_array, iou_matrix
from .network import Network
from .parallel import ordered_map

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_THRESHOLDS = tuple(np.round(np.arange(0.1, 0.901, 0.05), 2))
HISTOGRAM_EDGES = tuple(np.linspace(0.0, 1.0, 21))

GroundTruth = Mapping[str, tuple[np.ndarray, np.ndarray]]


def _match(dets: Sequence[Detection], gts: GroundTruth, cls: int, iou_thresh: float) -> tuple[np.ndarray, int]:
    gt_boxes = {}
    for image_id, (boxes, classes) in gts.items():
        sel = np.asarray(classes) == cls
        gt_boxes[image_id] = as_array(boxes)[sel] if sel.any() else np.zeros((0, 4))
    n_gt = sum(len(b) for b in gt_boxes.values())
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gt_boxes.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for i, d in enumerate(dets):
        g = gt_boxes.get(d.image_id)
        if g is None or len(g) == 0:
            continue
        ious = iou_matrix(as_array(d.box), g)[0]
        ious[used[d.image_id]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_thresh:
            tp[i] = True
            used[d.image_id][j] = True
    return tp, n_gt


def average_precision(dets: Iterable[Detection], gts: GroundTruth, cls: int, iou_thresh: float = 0.5) -> float:
    """AP for one class; NaN when the class has no ground truth."""
    mine = [d for d in dets if d.cls == cls]
    mine.sort(key=lambda d: -d.score)
    tp, n_gt = _match(mine, gts, cls, iou_thresh)
    if n_gt == 0:
        return math.nan
    if len(mine) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(mine) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_ap(
    dets: Sequence[Detection], gts: GroundTruth, classes: Sequence[int], iou_thresh: float | str = 0.5
) -> tuple[float, dict[int, float]]:
    """Mean AP over classes with ground truth, plus the per-class APs.

    ``iou_thresh="coco"`` averages over IoU 0.50:0.05:0.95.

    Raises:
        DataError: if no class has any ground truth.
    """
    grid = COCO_THRESHOLDS if iou_thresh == "coco" else (float(iou_thresh),)
    per_class = {}
    for c in classes:
        aps = [average_precision(dets, gts, c, t) for t in grid]
        per_class[c] = math.nan if math.isnan(aps[0]) else float(np.mean(aps))
    valid = [v for v in per_class.values() if not math.isnan(v)]
    if not valid:
        raise DataError("no class has ground truth; mAP is undefined")
    return float(np.mean(valid)), per_class


def _max_ious(rois: np.ndarray, gts: np.ndarray, axis: int) -> np.ndarray:
    m = iou_matrix(rois, gts)
    if m.size == 0:
        return np.zeros(m.shape[1 - axis])
    return m.max(axis=axis)


def recall_curve(
    rois: Mapping[str, np.ndarray], gts: Mapping[str, np.ndarray], thresholds: Sequence[float] = RECALL_THRESHOLDS
) -> list[tuple[float, float]]:
    """Fraction of ground-truth boxes covered by some RoI at IoU >= t, per threshold."""
    if list(thresholds) != sorted(thresholds):
        raise DataError("thresholds must be ascending")
    best = []
    for image_id, g in gts.items():
        g = as_array(g) if len(g) else np.zeros((0, 4))
        if len(g) == 0:
            continue
        r = rois.get(image_id, np.zeros((0, 4)))
        r = as_array(r) if len(r) else np.zeros((0, 4))
        best.append(_max_ious(r, g, axis=0))
    if not best:
        raise DataError("no ground truth boxes; recall is undefined")
    best = np.concatenate(best)
    return [(float(t), float(np.mean(best >= t))) for t in thresholds]


def iou_histogram(
    rois: Mapping[str, np.ndarray], gts: Mapping[str, np.ndarray], bin_edges: Sequence[float] = HISTOGRAM_EDGES
) -> np.ndarray:
    """Counts of RoIs by their best IoU with the ground truth of their image."""
    edges = np.asarray(bin_edges, dtype=np.float64)
    if np.any(np.diff(edges) <= 0) or edges[0] > 0 or edges[-1] < 1:
        raise DataError("bin edges must be ascending and span [0, 1]")
    vals = []
    for image_id, r in rois.items():
        r = as_array(r) if len(r) else np.zeros((0, 4))
        g = gts.get(image_id, np.zeros((0, 4)))
        g = as_array(g) if len(g) else np.zeros((0, 4))
        vals.append(_max_ious(r, g, axis=1) if len(g) else np.zeros(len(r)))
    vals = np.concatenate(vals) if vals else np.zeros(0)
    counts, _ = np.histogram(vals, bins=edges)
    return counts


def detect_dataset(
    net: Network,
    ds: Dataset,
    proposals: Mapping,
    score_threshold: float = SCORE_THRESHOLD,
    expert: str | None = None,
    threads: int = 1,
) -> list[Detection]:
    """Run :func:`detect` over every image; output order is dataset order."""

    def one(r):
        p = proposals.get(r.image_id)
        if p is None:
            return []
        return detect(net, r.image(), p, score_threshold, image_id=r.image_id, expert=expert)

    per_image = ordered_map(one, ds.images, threads)
    return [d for dets in per_image for d in dets]


def per_expert_eval(
    net: Network,
    ds: Dataset,
    proposals: Mapping,
    mode: str = "single_expert_only",
    iou_thresh: float | str = 0.5,
    threads: int = 1,
) -> dict[str, dict]:
    """mAP table keyed by expert (``single_expert_only``) or ``"full"``.

    In ``single_expert_only`` mode every test RoI is pushed through one
    expert regardless of its shape, once per expert.
    """
    gts = ds.ground_truth()
    classes = list(range(1, len(ds.classes) + 1))
    if mode == "full":
        runs = {"full": None}
    elif mode == "single_expert_only":
        runs = {e: e for e in net.experts}
    else:
        raise DataError(f"unknown per-expert mode {mode!r}")
    table = {}
    for name, expert in runs.items():
        dets = detect_dataset(net, ds, proposals, expert=expert, threads=threads)
        m, per_class = mean_ap(dets, gts, classes, iou_thresh)
        table[name] = {"mAP": m, **{ds.classes[c - 1]: v for c, v in per_class.items()}}
    return table
