"""
Labeling RoIs against ground truth and assembling per-expert minibatches.

An RoI is positive when its best IoU with a ground-truth box is at least
0.5, background when that IoU is in ``[0.1, 0.5)``, and excluded from
training otherwise.

Each training iteration draws one batch per expert. A batch is 128 RoIs
from two images (64 each) with positives and negatives at 1:3, restricted
to RoIs whose training shape categories include that expert.

Shortfall policy:
    * Per-image quota is 16 positives / 48 negatives. If one image has
      fewer than 16 positives the other image makes up the difference when
      it can, so the batch reaches 32 positives whenever the two images
      hold that many between them.
    * Positives are never duplicated within a batch; missing positives are
      replaced by extra negatives.
    * If an image has too few negatives they are drawn with replacement.
      Only an image with no negatives at all falls back to repeating its
      eligible RoIs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import DataError
from .geometry import Box, as_array, encode_array, iou_matrix
from .routing import EXPERTS, train_mask

BACKGROUND = 0
EXCLUDED = -1

POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.1


@dataclass(frozen=True)
class LabeledRoI:
    image_id: str
    box: Box
    max_iou: float
    cls: int
    target: tuple[float, float, float, float] | None
    train_experts: frozenset[str]


@dataclass
class LabeledImage:
    """Column-oriented labels for every RoI of one image.

    ``classes`` holds the category id, :data:`BACKGROUND` or
    :data:`EXCLUDED`; ``targets`` is zero for non-positives; ``experts`` is
    the ``(N, 3)`` training eligibility table in :data:`EXPERTS` order.
    """

    image_id: str
    boxes: np.ndarray
    max_iou: np.ndarray
    classes: np.ndarray
    targets: np.ndarray
    experts: np.ndarray

    def __len__(self):
        return len(self.boxes)

    def __getitem__(self, i) -> LabeledRoI:
        cls = int(self.classes[i])
        return LabeledRoI(
            image_id=self.image_id,
            box=Box.from_list(self.boxes[i]),
            max_iou=float(self.max_iou[i]),
            cls=cls,
            target=tuple(self.targets[i].tolist()) if cls > 0 else None,
            train_experts=frozenset(e for e, ok in zip(EXPERTS, self.experts[i]) if ok),
        )

    def candidates(self, expert: str | None) -> tuple[np.ndarray, np.ndarray]:
        """Indices of (positive, negative) RoIs usable by ``expert`` (None = any)."""
        ok = self.classes != EXCLUDED
        if expert is not None:
            ok &= self.experts[:, EXPERTS.index(expert)]
        pos = np.flatnonzero(ok & (self.classes > 0))
        neg = np.flatnonzero(ok & (self.classes == BACKGROUND))
        return pos, neg


def label_rois(rois, gt_boxes, gt_classes, image_id: str = "") -> LabeledImage:
    """Match each RoI to its highest-IoU ground truth (lowest index on ties)."""
    boxes = as_array(rois) if len(rois) else np.zeros((0, 4))
    gts = as_array(gt_boxes) if len(gt_boxes) else np.zeros((0, 4))
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    n = len(boxes)
    targets = np.zeros((n, 4))
    if len(gts) == 0:
        max_iou = np.zeros(n)
        classes = np.full(n, EXCLUDED, dtype=np.int64)
    else:
        ious = iou_matrix(boxes, gts)
        match = ious.argmax(axis=1)
        max_iou = ious[np.arange(n), match]
        classes = np.full(n, EXCLUDED, dtype=np.int64)
        classes[max_iou >= NEGATIVE_IOU] = BACKGROUND
        pos = max_iou >= POSITIVE_IOU
        classes[pos] = gt_classes[match[pos]]
        if pos.any():
            targets[pos] = encode_array(boxes[pos], gts[match[pos]])
    experts = train_mask(boxes) if n else np.zeros((0, 3), dtype=bool)
    return LabeledImage(image_id, boxes, max_iou, classes, targets, experts)


@dataclass
class ExpertBatch:
    expert: str
    image_ids: tuple[str, ...]
    roi_image: np.ndarray  # position in image_ids for each RoI
    roi_index: np.ndarray  # row in that image's LabeledImage
    boxes: np.ndarray
    classes: np.ndarray
    targets: np.ndarray
    max_iou: np.ndarray

    def __len__(self):
        return len(self.boxes)

    @property
    def n_pos(self) -> int:
        return int((self.classes > 0).sum())

    @property
    def n_neg(self) -> int:
        return int((self.classes == BACKGROUND).sum())

    @classmethod
    def empty(cls, expert: str) -> "ExpertBatch":
        z = np.zeros(0, dtype=np.int64)
        return cls(expert, (), z, z, np.zeros((0, 4)), z, np.zeros((0, 4)), np.zeros(0))


def _take(rng: np.random.Generator, idx: np.ndarray, k: int) -> np.ndarray:
    """``k`` draws from ``idx``: without replacement while possible, then with."""
    if k <= 0:
        return idx[:0]
    if len(idx) >= k:
        return rng.choice(idx, size=k, replace=False)
    extra = rng.choice(idx, size=k - len(idx), replace=True)
    return np.concatenate([rng.permutation(idx), extra])


def _split_positive_quota(n_pos: list[int], total: int, per_image: int) -> list[int]:
    base = total // len(n_pos)
    quota = [min(base, p) for p in n_pos]
    short = total - sum(quota)
    for i, p in enumerate(n_pos):
        if short <= 0:
            break
        extra = min(short, min(p, per_image) - quota[i])
        if extra > 0:
            quota[i] += extra
            short -= extra
    return quota


def sample_expert_batch(
    pool: Mapping[str, LabeledImage],
    expert: str,
    rng: np.random.Generator,
    batch_size: int = 128,
    images_per_batch: int = 2,
    fg_fraction: float = 0.25,
    route_all: bool = False,
) -> ExpertBatch:
    """Draw one expert's minibatch.

    ``route_all`` ignores shape eligibility (single-expert baseline).

    Raises:
        DataError: if fewer than ``images_per_batch`` images hold any RoI
            the expert may train on.
    """
    gate = None if route_all else expert
    eligible = []
    for image_id, lab in pool.items():
        pos, neg = lab.candidates(gate)
        if len(pos) + len(neg):
            eligible.append((image_id, pos, neg))
    if len(eligible) < images_per_batch:
        raise DataError(
            f"expert {expert}: only {len(eligible)} images have eligible RoIs, "
            f"need {images_per_batch}"
        )
    chosen = rng.choice(len(eligible), size=images_per_batch, replace=False)
    per_image = batch_size // images_per_batch
    fg_total = int(round(fg_fraction * batch_size))
    picks = [eligible[i] for i in chosen]
    quotas = _split_positive_quota([len(p[1]) for p in picks], fg_total, per_image)

    image_ids, roi_image, roi_index = [], [], []
    for slot, ((image_id, pos, neg), q) in enumerate(zip(picks, quotas)):
        take_pos = rng.choice(pos, size=q, replace=False) if q else pos[:0]
        n_neg = per_image - q
        if len(neg):
            take_neg = _take(rng, neg, n_neg)
        else:
            rest = np.setdiff1d(pos, take_pos)
            take_neg = _take(rng, rest if len(rest) else pos, n_neg)
        idx = np.concatenate([take_pos, take_neg]).astype(np.int64)
        image_ids.append(image_id)
        roi_image.append(np.full(len(idx), slot, dtype=np.int64))
        roi_index.append(idx)

    roi_image = np.concatenate(roi_image)
    roi_index = np.concatenate(roi_index)
    labs = [pool[i] for i in image_ids]
    gather = lambda attr: np.concatenate(
        [getattr(labs[s], attr)[roi_index[roi_image == s]] for s in range(len(labs))]
    )
    return ExpertBatch(
        expert=expert,
        image_ids=tuple(image_ids),
        roi_image=roi_image,
        roi_index=roi_index,
        boxes=gather("boxes"),
        classes=gather("classes"),
        targets=gather("targets"),
        max_iou=gather("max_iou"),
    )


def make_training_iteration(
    pool: Mapping[str, LabeledImage], rng: np.random.Generator, n_experts: int = 3, **kwargs
) -> tuple[ExpertBatch, ...]:
    """One batch per expert, H then S then V. With one expert, a single S batch over all RoIs."""
    if n_experts == 1:
        return (sample_expert_batch(pool, "S", rng, route_all=True, **kwargs),)
    if n_experts != 3:
        raise DataError(f"n_experts must be 1 or 3, got {n_experts}")
    return tuple(sample_expert_batch(pool, e, rng, **kwargs) for e in EXPERTS)
