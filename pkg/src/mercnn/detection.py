"""Inference: route proposals, score them, refine boxes, fuse experts, suppress."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .geometry import Box, as_array, clip_array, decode_array, iou_matrix, valid_mask
from .network import Network, forward_boxes
from .routing import EXPERTS, test_index

NMS_THRESHOLD = 0.3
SCORE_THRESHOLD = 0.05
MAX_PER_CLASS = 100

DETECTION_COLUMNS = ("image_id", "class", "score", "x1", "y1", "x2", "y2", "expert")


@dataclass(frozen=True)
class Detection:
    image_id: str
    cls: int  # 1-based category id
    score: float
    box: Box
    expert: str


def nms(boxes, scores, thresh: float = NMS_THRESHOLD) -> np.ndarray:
    """Greedy suppression for one class; returns kept indices, best first.

    Equal scores keep their input order.
    """
    boxes = as_array(boxes) if len(boxes) else np.zeros((0, 4))
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > thresh
    return np.array(keep, dtype=np.int64)


def detect(
    net: Network,
    image: np.ndarray,
    proposals,
    score_threshold: float = SCORE_THRESHOLD,
    image_id: str = "",
    expert: str | None = None,
    nms_threshold: float = NMS_THRESHOLD,
    max_per_class: int = MAX_PER_CLASS,
) -> list[Detection]:
    """Detections for one image, highest score first.

    ``proposals`` is a ProposalSet or an ``(N, 4)`` array. With ``expert``
    set, every proposal goes to that expert instead of its routed one.
    """
    boxes = getattr(proposals, "boxes", proposals)
    boxes = as_array(boxes) if len(boxes) else np.zeros((0, 4))
    if len(boxes) == 0:
        return []
    cfg = net.config
    if expert is not None:
        idx = np.full(len(boxes), net.experts.index(expert), dtype=np.int64)
    elif cfg.n_experts == 1:
        idx = np.zeros(len(boxes), dtype=np.int64)
    else:
        idx = test_index(boxes)
    probs, deltas = forward_boxes(net, image, boxes, idx)
    h, w = cfg.image_size
    dets: list[Detection] = []
    for c in range(1, cfg.n_classes + 1):
        sel = np.flatnonzero(probs[:, c] >= score_threshold)
        if len(sel) == 0:
            continue
        d = deltas[sel, 4 * (c - 1) : 4 * c]
        if cfg.bbox_target_stds is not None:
            d = d * np.asarray(cfg.bbox_target_stds)
        refined = clip_array(decode_array(boxes[sel], d), w, h)
        ok = valid_mask(refined)
        sel, refined = sel[ok], refined[ok]
        scores = probs[sel, c]
        keep = nms(refined, scores, nms_threshold)[:max_per_class]
        for k in keep:
            dets.append(
                Detection(image_id, c, float(scores[k]), Box.from_list(refined[k]), net.experts[idx[sel[k]]])
            )
    dets.sort(key=lambda d: -d.score)
    return dets


def write_detections(dets: Iterable[Detection], classes: Sequence[str], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(DETECTION_COLUMNS)
        for d in dets:
            w.writerow(
                [d.image_id, classes[d.cls - 1], repr(d.score), *(repr(v) for v in d.box.to_list()), d.expert]
            )


def read_detections(path, classes: Sequence[str]) -> list[Detection]:
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != DETECTION_COLUMNS:
            raise DataError(f"{path}: expected columns {','.join(DETECTION_COLUMNS)}")
        for n, row in enumerate(reader, start=2):
            try:
                cls = list(classes).index(row["class"]) + 1
                box = Box(float(row["x1"]), float(row["y1"]), float(row["x2"]), float(row["y2"]))
                if row["expert"] not in EXPERTS:
                    raise ValueError(f"unknown expert {row['expert']!r}")
                out.append(Detection(row["image_id"], cls, float(row["score"]), box, row["expert"]))
            except (ValueError, DataError) as e:
                raise DataError(f"{path}: line {n}: {e}") from None
    return out
