"""
Synthetic shape-correlated detection data and dataset I/O.

Three classes whose appearance and aspect ratio are correlated:

    h_bar   horizontal stripes, log2(w/h) in [1, 2]
    square  flat fill,          log2(w/h) in [-0.3, 0.3]
    v_bar   vertical stripes,   log2(w/h) in [-2, -1]

Object boxes have integer corners so the aspect-ratio ranges are hard
constraints. Each image is generated from its own generator seeded with
``SeedSequence(seed, spawn_key=(split, index))``, so images can be built in
any order or in parallel without changing the output.

On-disk layout of one split::

    <dir>/images/<image_id>.raw
    <dir>/annotations.json   [{image_id, width, height, objects: [{class, box}]}]
    <dir>/manifest.json      {"classes": [...], "split": ..., "config": {...}}

``.raw`` files are ``b"RAW1"`` followed by little-endian uint32 width,
height and channel count, then ``width * height * channels`` uint8 pixels in
row-major (y, x, channel) order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .parallel import ordered_map

RAW_MAGIC = b"RAW1"
SPLIT_CODES = {"train": 0, "test": 1}


@dataclass(frozen=True)
class SynthConfig:
    image_size: tuple[int, int] = (64, 64)  # (height, width)
    classes: tuple[str, ...] = ("h_bar", "square", "v_bar")
    theta_ranges: tuple[tuple[float, float], ...] = ((1.0, 2.0), (-0.3, 0.3), (-2.0, -1.0))
    objects_per_image: tuple[int, int] = (1, 3)
    short_side: tuple[int, int] = (10, 20)
    min_side: int = 8
    max_overlap: float = 0.1
    n_distractors: tuple[int, int] = (0, 2)
    noise_std: float = 0.08
    n_train: int = 200
    n_test: int = 50
    seed: int = 0

    def __post_init__(self):
        for name in ("image_size", "classes", "objects_per_image", "short_side", "n_distractors"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "theta_ranges", tuple(tuple(float(v) for v in r) for r in self.theta_ranges))
        if len(self.theta_ranges) != len(self.classes):
            raise DataError("need one theta range per class")
        if self.short_side[0] < self.min_side:
            raise DataError("short_side lower bound below min_side")
        if self.objects_per_image[0] < 1:
            raise DataError("every image needs at least one object")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d) -> "SynthConfig":
        return cls(**d)


@dataclass
class ImageRecord:
    image_id: str
    width: int
    height: int
    gt_boxes: np.ndarray
    gt_classes: np.ndarray  # 1-based category ids
    pixels: np.ndarray  # (H, W) uint8

    def image(self) -> np.ndarray:
        """Pixels as float64 in [0, 1]."""
        return self.pixels.astype(np.float64) / 255.0


@dataclass
class Dataset:
    classes: tuple[str, ...]
    images: list[ImageRecord] = field(default_factory=list)
    split: str = "train"
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.image_id: r for r in self.images}

    def class_id(self, name: str) -> int:
        return self.classes.index(name) + 1

    def ground_truth(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {r.image_id: (r.gt_boxes, r.gt_classes) for r in self.images}


def image_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(SPLIT_CODES[split], index)))


def _width_range(h: int, lo: float, hi: float) -> tuple[int, int]:
    return math.ceil(h * 2.0**lo - 1e-9), math.floor(h * 2.0**hi + 1e-9)


def _sample_shape(cfg: SynthConfig, cls_index: int, rng) -> tuple[int, int] | None:
    lo, hi = cfg.theta_ranges[cls_index]
    H, W = cfg.image_size
    for _ in range(50):
        short = int(rng.integers(cfg.short_side[0], cfg.short_side[1] + 1))
        if hi <= 0:  # tall: width is the short side
            hmin, hmax = _width_range(short, -hi, -lo)
            hmax = min(hmax, H - 2)
            if hmin > hmax:
                continue
            return short, int(rng.integers(hmin, hmax + 1))
        wmin, wmax = _width_range(short, lo, hi)
        wmax = min(wmax, W - 2)
        wmin = max(wmin, cfg.min_side)
        if wmin > wmax:
            continue
        return int(rng.integers(wmin, wmax + 1)), short
    return None


def _texture(cls_name: str, h: int, w: int, rng) -> np.ndarray:
    phase = int(rng.integers(0, 4))
    if cls_name == "h_bar":
        rows = ((np.arange(h) + phase) // 2) % 2
        return np.repeat(rows[:, None], w, axis=1) * 0.5 + 0.45
    if cls_name == "v_bar":
        cols = ((np.arange(w) + phase) // 2) % 2
        return np.repeat(cols[None, :], h, axis=0) * 0.5 + 0.45
    return np.full((h, w), 0.75)


def _box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def synth_image(cfg: SynthConfig, split: str, index: int) -> ImageRecord:
    rng = image_rng(cfg.seed, split, index)
    H, W = cfg.image_size
    canvas = np.full((H, W), rng.uniform(0.1, 0.3))
    n_obj = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
    boxes, classes = [], []
    for j in range(n_obj):
        # rotate through classes so counts stay balanced across images
        ci = (index + j) % len(cfg.classes)
        for _ in range(100):
            shape = _sample_shape(cfg, ci, rng)
            if shape is None:
                continue
            bw, bh = shape
            x1 = int(rng.integers(0, W - bw + 1))
            y1 = int(rng.integers(0, H - bh + 1))
            box = (x1, y1, x1 + bw, y1 + bh)
            if all(_box_iou(box, b) <= cfg.max_overlap for b in boxes):
                boxes.append(box)
                classes.append(ci + 1)
                break
    if not boxes:
        raise DataError(f"could not place any object in image {index}; relax the config")
    n_dis = int(rng.integers(cfg.n_distractors[0], cfg.n_distractors[1] + 1))
    for _ in range(n_dis):
        s = int(rng.integers(3, 7))
        x1 = int(rng.integers(0, W - s + 1))
        y1 = int(rng.integers(0, H - s + 1))
        canvas[y1 : y1 + s, x1 : x1 + s] = rng.uniform(0.4, 0.9)
    for box, c in zip(boxes, classes):
        x1, y1, x2, y2 = box
        canvas[y1:y2, x1:x2] = _texture(cfg.classes[c - 1], y2 - y1, x2 - x1, rng)
    canvas += rng.normal(0.0, cfg.noise_std, size=canvas.shape)
    pixels = np.round(np.clip(canvas, 0.0, 1.0) * 255).astype(np.uint8)
    return ImageRecord(
        image_id=f"{split}_{index:05d}",
        width=W,
        height=H,
        gt_boxes=np.array(boxes, dtype=np.float64),
        gt_classes=np.array(classes, dtype=np.int64),
        pixels=pixels,
    )


def synth_dataset(cfg: SynthConfig = SynthConfig(), threads: int = 1) -> tuple[Dataset, Dataset]:
    """Build the (train, test) splits."""
    out = []
    for split, n in (("train", cfg.n_train), ("test", cfg.n_test)):
        images = ordered_map(lambda i, s=split: synth_image(cfg, s, i), range(n), threads)
        manifest = {"classes": list(cfg.classes), "split": split, "config": cfg.to_dict()}
        out.append(Dataset(tuple(cfg.classes), images, split, manifest))
    return out[0], out[1]


# ------------------------------------------------------------------ I/O


def write_raw(path, pixels: np.ndarray) -> None:
    px = np.asarray(pixels, dtype=np.uint8)
    if px.ndim == 2:
        px = px[:, :, None]
    h, w, c = px.shape
    with open(path, "wb") as f:
        f.write(RAW_MAGIC + struct.pack("<III", w, h, c) + px.tobytes())


def read_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != RAW_MAGIC:
        raise DataError(f"{path}: not a RAW1 image")
    w, h, c = struct.unpack("<III", data[4:16])
    body = data[16:]
    if len(body) != w * h * c:
        raise DataError(f"{path}: expected {w * h * c} pixel bytes, found {len(body)}")
    px = np.frombuffer(body, dtype=np.uint8).reshape(h, w, c)
    return px[:, :, 0].copy() if c == 1 else px.copy()


def annotations(ds: Dataset) -> list[dict]:
    return [
        {
            "image_id": r.image_id,
            "width": r.width,
            "height": r.height,
            "objects": [
                {"class": ds.classes[c - 1], "box": b.tolist()} for b, c in zip(r.gt_boxes, r.gt_classes)
            ],
        }
        for r in ds.images
    ]


def save_dataset(ds: Dataset, path) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for r in ds.images:
        write_raw(root / "images" / f"{r.image_id}.raw", r.pixels)
    (root / "annotations.json").write_text(json.dumps(annotations(ds), indent=1))
    manifest = dict(ds.manifest)
    manifest.setdefault("classes", list(ds.classes))
    manifest.setdefault("split", ds.split)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(path) -> Dataset:
    """Read a split written by :func:`save_dataset`.

    Raises:
        DataError: missing or corrupt files; the message names the image id
            for a missing or mismatched raster.
    """
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        records = json.loads((root / "annotations.json").read_text())
    except FileNotFoundError as e:
        raise DataError(f"{root}: missing {Path(e.filename).name}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{root}: corrupt JSON at line {e.lineno}: {e.msg}") from None
    classes = tuple(manifest["classes"])
    images = []
    for rec in records:
        image_id = rec["image_id"]
        raw = root / "images" / f"{image_id}.raw"
        if not raw.exists():
            raise DataError(f"{root}: image file for {image_id!r} is missing")
        pixels = read_raw(raw)
        if pixels.shape[:2] != (rec["height"], rec["width"]):
            raise DataError(f"{root}: image {image_id!r} size does not match its annotation")
        try:
            cls = [classes.index(o["class"]) + 1 for o in rec["objects"]]
        except ValueError as e:
            raise DataError(f"{root}: image {image_id!r}: {e}") from None
        boxes = np.array([o["box"] for o in rec["objects"]], dtype=np.float64).reshape(-1, 4)
        images.append(
            ImageRecord(image_id, int(rec["width"]), int(rec["height"]), boxes, np.array(cls, dtype=np.int64), pixels)
        )
    return Dataset(classes, images, manifest.get("split", "train"), manifest)


def theta_of(records: Sequence[ImageRecord], class_id: int) -> np.ndarray:
    vals = [
        math.log2((b[2] - b[0]) / (b[3] - b[1])) for r in records for b, c in zip(r.gt_boxes, r.gt_classes) if c == class_id
    ]
    return np.array(vals)
