"""Sparse proposal sources: loading external files, simulating, merging.

Proposal JSON is a list of records::

    [{"image_id": "...", "width": W, "height": H, "boxes": [[x1, y1, x2, y2], ...]}, ...]

Records written by the exhaustive generator use the key ``windows``
instead of ``boxes``; both are accepted on load.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Collection, Iterable

import numpy as np

from .errors import DataError
from .geometry import as_array, clip_array, valid_mask

log = logging.getLogger(__name__)

SOURCES = ("selective", "exhaustive", "simulated", "combined")


@dataclass
class ProposalSet:
    image_id: str
    width: float
    height: float
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    source: str = "selective"

    def __post_init__(self):
        self.boxes = as_array(self.boxes) if len(self.boxes) else np.zeros((0, 4))
        if self.source not in SOURCES:
            raise DataError(f"unknown proposal source {self.source!r}")

    def __len__(self):
        return len(self.boxes)

    def to_record(self, key: str = "boxes") -> dict:
        return {
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "source": self.source,
            key: self.boxes.tolist(),
        }


def _clip_and_filter(boxes: np.ndarray, width: float, height: float) -> tuple[np.ndarray, int]:
    finite = np.isfinite(boxes).all(axis=1)
    clipped = clip_array(boxes[finite], width, height)
    keep = valid_mask(clipped)
    return clipped[keep], int(len(boxes) - keep.sum())


def load_proposals(path, known_ids: Collection[str] | None = None) -> dict[str, ProposalSet]:
    """Read a proposal file into ``{image_id: ProposalSet}``.

    Boxes are clipped to the record's image extent and degenerate ones are
    dropped (logged as a warning with the count).

    Raises:
        DataError: on unparsable JSON (with line number), malformed
            records, or an image id not in ``known_ids``.
    """
    text = Path(path).read_text()
    try:
        records = json.loads(text)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: line {e.lineno}: {e.msg}") from None
    if not isinstance(records, list):
        raise DataError(f"{path}: expected a JSON list of records")
    out: dict[str, ProposalSet] = {}
    dropped = 0
    for i, rec in enumerate(records):
        try:
            image_id = str(rec["image_id"])
            width = float(rec["width"])
            height = float(rec["height"])
            raw = rec["boxes"] if "boxes" in rec else rec["windows"]
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path}: record {i} is malformed ({e})") from None
        if known_ids is not None and image_id not in known_ids:
            raise DataError(f"{path}: unknown image_id {image_id!r}")
        try:
            boxes = np.asarray(raw, dtype=np.float64).reshape(-1, 4)
        except ValueError:
            raise DataError(f"{path}: record {i} boxes are not [x1, y1, x2, y2] arrays") from None
        boxes, n_bad = _clip_and_filter(boxes, width, height)
        dropped += n_bad
        source = rec.get("source", "selective")
        if image_id in out:
            raise DataError(f"{path}: duplicate image_id {image_id!r}")
        out[image_id] = ProposalSet(image_id, width, height, boxes, source)
    if dropped:
        log.warning("%s: dropped %d invalid boxes", path, dropped)
    return out


def save_proposals(sets: Iterable[ProposalSet], path, key: str = "boxes") -> None:
    records = [s.to_record(key) for s in sets]
    Path(path).write_text(json.dumps(records))


def simulate_proposals(
    gts,
    width: float,
    height: float,
    n_random: int,
    jitter: float,
    rng: np.random.Generator,
    image_id: str = "",
    min_size: float = 4.0,
) -> ProposalSet:
    """Selective-search stand-in: 4 jittered copies per GT box plus uniform random boxes.

    Each corner coordinate moves by ``U(-jitter, jitter)`` times the box side
    along that axis. A jittered copy that degenerates after clipping falls
    back to the GT box itself.
    """
    if n_random < 0:
        raise DataError("n_random must be non-negative")
    if not 0.0 <= jitter <= 0.5:
        raise DataError("jitter must lie in [0, 0.5]")
    g = as_array(gts) if len(gts) else np.zeros((0, 4))
    rows = []
    for box in g:
        w = box[2] - box[0]
        h = box[3] - box[1]
        scale = np.array([w, h, w, h])
        for _ in range(4):
            cand = box + rng.uniform(-jitter, jitter, size=4) * scale
            cand = clip_array(cand, width, height)[0]
            rows.append(cand if valid_mask(cand)[0] else box.copy())
    min_w = min(min_size, width)
    min_h = min(min_size, height)
    for _ in range(n_random):
        bw = rng.uniform(min_w, width)
        bh = rng.uniform(min_h, height)
        x1 = rng.uniform(0.0, width - bw)
        y1 = rng.uniform(0.0, height - bh)
        rows.append(np.array([x1, y1, x1 + bw, y1 + bh]))
    boxes = np.array(rows) if rows else np.zeros((0, 4))
    return ProposalSet(image_id, width, height, boxes, "simulated")


def dedup_rows(boxes: np.ndarray) -> np.ndarray:
    """Drop exact duplicate rows, keeping first occurrences in order."""
    if len(boxes) == 0:
        return boxes
    _, first = np.unique(boxes, axis=0, return_index=True)
    return boxes[np.sort(first)]


def merge_roi_sets(a: ProposalSet, b: ProposalSet) -> ProposalSet:
    if a.image_id != b.image_id:
        raise DataError(f"cannot merge proposals of {a.image_id!r} and {b.image_id!r}")
    boxes = dedup_rows(np.concatenate([a.boxes, b.boxes]))
    source = a.source if a.source == b.source else "combined"
    return ProposalSet(a.image_id, a.width, a.height, boxes, source)
