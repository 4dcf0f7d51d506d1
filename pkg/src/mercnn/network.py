"""
Multi-expert detection network
==============================

A desk-scale analogue of a Fast R-CNN style detector with three experts::

    image -> conv1 (frozen) -> conv2 -> RoI max pool (P x P)
          -> fc6 -> fc7 -> {cls: C+1 softmax, bbox: 4*C deltas}

``fc6`` (and optionally ``fc7``) is shared; everything after the shared
part is replicated per expert. Each RoI runs through the trunk, the shared
layers and only the head of the expert it is routed to.

All layers use ReLU except the two sibling outputs. Feature maps are
``(H, W, C)``; conv weights are ``(k, k, C_in, C_out)``; fc weights are
``(fan_in, fan_out)``. Gradients are derived by hand and checked against
finite differences in the test suite.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import _kernels
from .errors import DataError, UsageError
from .geometry import Box, as_array, smooth_l1, smooth_l1_grad
from .routing import EXPERTS, test_index

SHARING = {"none": (), "fc6": ("fc6",), "fc6+fc7": ("fc6", "fc7")}
CONV_STRIDE = 2
CONV_PAD = 1


@dataclass(frozen=True)
class NetConfig:
    n_classes: int = 3
    image_size: tuple[int, int] = (64, 64)  # (height, width)
    conv1_channels: int = 8
    conv2_channels: int = 16
    kernel: int = 3
    pool_size: int = 4
    fc_width: int = 64
    shared_fc: str = "fc6"
    n_experts: int = 3
    # None selects He scaling sqrt(2 / fan_in) for conv/fc layers
    hidden_init_std: float | None = 0.01
    cls_init_std: float = 0.01
    bbox_init_std: float = 0.001
    freeze_conv1: bool = True
    # None means 1/3 with three experts, 1 with a single expert
    shared_lr_multiplier: float | None = None
    # divide regression targets by these before the loss (None = raw targets)
    bbox_target_stds: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        if self.bbox_target_stds is not None:
            object.__setattr__(self, "bbox_target_stds", tuple(float(v) for v in self.bbox_target_stds))
        if self.shared_fc not in SHARING:
            raise UsageError(f"shared_fc must be one of {sorted(SHARING)}, got {self.shared_fc!r}")
        if self.n_experts not in (1, 3):
            raise UsageError(f"n_experts must be 1 or 3, got {self.n_experts}")
        if self.n_classes < 1:
            raise UsageError("n_classes must be at least 1")

    @property
    def experts(self) -> tuple[str, ...]:
        return EXPERTS if self.n_experts == 3 else ("S",)

    @property
    def shared_multiplier(self) -> float:
        if self.shared_lr_multiplier is not None:
            return self.shared_lr_multiplier
        return 1.0 / 3.0 if self.n_experts == 3 else 1.0

    @property
    def feature_stride(self) -> int:
        return CONV_STRIDE * CONV_STRIDE

    @property
    def feature_size(self) -> tuple[int, int]:
        def out(n):
            return (n + 2 * CONV_PAD - self.kernel) // CONV_STRIDE + 1

        return out(out(self.image_size[0])), out(out(self.image_size[1]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        if self.bbox_target_stds is not None:
            d["bbox_target_stds"] = list(self.bbox_target_stds)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise DataError(f"unknown network config keys: {sorted(extra)}")
        d = dict(d)
        if d.get("bbox_target_stds") is not None:
            d["bbox_target_stds"] = tuple(d["bbox_target_stds"])
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(**d)


@dataclass
class LayerSpec:
    name: str
    kind: str  # conv | fully_connected | softmax_cls | bbox_reg
    owner: str  # trunk | shared | expert_H | expert_S | expert_V
    shape: tuple[int, ...]
    lr_multiplier: float = 1.0
    frozen: bool = False


def build_layers(cfg: NetConfig) -> list[LayerSpec]:
    k = cfg.kernel
    shared = SHARING[cfg.shared_fc]
    hf, wf = cfg.feature_size
    if hf < 1 or wf < 1:
        raise UsageError(f"image size {cfg.image_size} too small for the trunk")
    pooled = cfg.pool_size * cfg.pool_size * cfg.conv2_channels
    m = cfg.shared_multiplier
    layers = [
        LayerSpec("conv1", "conv", "trunk", (k, k, 1, cfg.conv1_channels), m, cfg.freeze_conv1),
        LayerSpec("conv2", "conv", "trunk", (k, k, cfg.conv1_channels, cfg.conv2_channels), m),
    ]
    fc_in = {"fc6": pooled, "fc7": cfg.fc_width}
    for fc in ("fc6", "fc7"):
        if fc in shared:
            layers.append(LayerSpec(fc, "fully_connected", "shared", (fc_in[fc], cfg.fc_width), m))
    for e in cfg.experts:
        for fc in ("fc6", "fc7"):
            if fc not in shared:
                layers.append(
                    LayerSpec(f"{fc}_{e}", "fully_connected", f"expert_{e}", (fc_in[fc], cfg.fc_width))
                )
        layers.append(LayerSpec(f"cls_{e}", "softmax_cls", f"expert_{e}", (cfg.fc_width, cfg.n_classes + 1)))
        layers.append(LayerSpec(f"bbox_{e}", "bbox_reg", f"expert_{e}", (cfg.fc_width, 4 * cfg.n_classes)))
    return layers


class Network:
    """Parameter store. ``params`` maps ``"<layer>.weight"`` / ``"<layer>.bias"`` to arrays."""

    def __init__(self, config: NetConfig, layers: list[LayerSpec], params: dict[str, np.ndarray]):
        self.config = config
        self.layers = layers
        self.params = params
        self._by_name = {l.name: l for l in layers}

    @property
    def experts(self) -> tuple[str, ...]:
        return self.config.experts

    def layer(self, name: str) -> LayerSpec:
        return self._by_name[name]

    def head(self, expert: str) -> tuple[str, str, str, str]:
        shared = SHARING[self.config.shared_fc]
        fc6 = "fc6" if "fc6" in shared else f"fc6_{expert}"
        fc7 = "fc7" if "fc7" in shared else f"fc7_{expert}"
        return fc6, fc7, f"cls_{expert}", f"bbox_{expert}"

    def trainable_keys(self) -> list[str]:
        return [f"{l.name}.{p}" for l in self.layers if not l.frozen for p in ("weight", "bias")]

    def copy(self) -> "Network":
        layers = [LayerSpec(**asdict(l)) for l in self.layers]
        return Network(self.config, layers, {k: v.copy() for k, v in self.params.items()})


def init_network(cfg: NetConfig, rng: np.random.Generator) -> Network:
    """Gaussian weights, zero biases.

    Classification outputs use ``cls_init_std``, regression outputs
    ``bbox_init_std``; conv and hidden fc layers use ``hidden_init_std`` or
    He scaling when that is None.
    """
    layers = build_layers(cfg)
    params = {}
    for l in layers:
        if l.kind == "softmax_cls":
            std = cfg.cls_init_std
        elif l.kind == "bbox_reg":
            std = cfg.bbox_init_std
        elif cfg.hidden_init_std is None:
            std = math.sqrt(2.0 / int(np.prod(l.shape[:-1])))
        else:
            std = cfg.hidden_init_std
        params[f"{l.name}.weight"] = rng.normal(0.0, std, size=l.shape)
        params[f"{l.name}.bias"] = np.zeros(l.shape[-1])
    return Network(cfg, layers, params)


# ---------------------------------------------------------------- trunk


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, tuple[int, int]]:
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride]
    ho, wo = win.shape[:2]
    # (ho, wo, C, k, k) -> (ho*wo, k*k*C) matching weight layout (k, k, C, Cout)
    cols = win.transpose(0, 1, 3, 4, 2).reshape(ho * wo, -1)
    return np.ascontiguousarray(cols), (ho, wo)


def _col2im(dcols: np.ndarray, shape: tuple[int, int, int], k: int, stride: int, pad: int) -> np.ndarray:
    h, w, c = shape
    dxp = np.zeros((h + 2 * pad, w + 2 * pad, c))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    d = dcols.reshape(ho, wo, k, k, c)
    for i in range(k):
        for j in range(k):
            dxp[i : i + stride * ho : stride, j : j + stride * wo : stride] += d[:, :, i, j]
    return dxp[pad : pad + h, pad : pad + w]


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    cols, (ho, wo) = _im2col(x, w.shape[0], CONV_STRIDE, CONV_PAD)
    out = cols @ w.reshape(-1, w.shape[-1]) + b
    return out.reshape(ho, wo, -1), cols


def prepare_image(net: Network, image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[:2] != net.config.image_size:
        raise DataError(f"image shape {img.shape[:2]} != configured input {net.config.image_size}")
    # pixels are [0, 1]; centre them
    return img - 0.5


def conv1_features(net: Network, image: np.ndarray) -> np.ndarray:
    """Post-ReLU conv1 activations; cacheable while conv1 is frozen."""
    p = net.params
    pre, _ = conv_forward(prepare_image(net, image), p["conv1.weight"], p["conv1.bias"])
    return np.maximum(pre, 0.0)


@dataclass
class TrunkCache:
    x: np.ndarray
    cols1: np.ndarray | None
    f1: np.ndarray
    cols2: np.ndarray
    pre2: np.ndarray
    f2: np.ndarray


def trunk_forward(net: Network, image: np.ndarray, f1: np.ndarray | None = None) -> TrunkCache:
    p = net.params
    x = prepare_image(net, image)
    cols1 = None
    if f1 is None or not net.layer("conv1").frozen:
        pre1, cols1 = conv_forward(x, p["conv1.weight"], p["conv1.bias"])
        f1 = np.maximum(pre1, 0.0)
    pre2, cols2 = conv_forward(f1, p["conv2.weight"], p["conv2.bias"])
    return TrunkCache(x, cols1, f1, cols2, pre2, np.maximum(pre2, 0.0))


def trunk_backward(net: Network, cache: TrunkCache, df2: np.ndarray, grads: dict) -> None:
    p = net.params
    k = net.config.kernel
    dpre2 = df2 * (cache.pre2 > 0)
    d2 = dpre2.reshape(-1, dpre2.shape[-1])
    _accum(grads, "conv2.weight", (cache.cols2.T @ d2).reshape(p["conv2.weight"].shape))
    _accum(grads, "conv2.bias", d2.sum(axis=0))
    if net.layer("conv1").frozen:
        return
    w2 = p["conv2.weight"]
    df1 = _col2im(d2 @ w2.reshape(-1, w2.shape[-1]).T, cache.f1.shape, k, CONV_STRIDE, CONV_PAD)
    dpre1 = (df1 * (cache.f1 > 0)).reshape(-1, cache.f1.shape[-1])
    if cache.cols1 is None:
        _, cols1 = conv_forward(cache.x, p["conv1.weight"], p["conv1.bias"])
    else:
        cols1 = cache.cols1
    _accum(grads, "conv1.weight", (cols1.T @ dpre1).reshape(p["conv1.weight"].shape))
    _accum(grads, "conv1.bias", dpre1.sum(axis=0))


def _accum(grads: dict, key: str, g: np.ndarray) -> None:
    if key in grads:
        grads[key] += g
    else:
        grads[key] = g.copy()


# ------------------------------------------------------------- RoI pool

_CELL_EPS = 1e-6


def roi_cells(boxes: np.ndarray, scale: float, hf: int, wf: int) -> np.ndarray:
    """Image boxes -> integer feature-map rectangles ``x1, y1, x2, y2`` (exclusive ends).

    Each side covers at least one cell.
    """
    b = as_array(boxes) * scale
    x1 = np.floor(b[:, 0] + _CELL_EPS).astype(np.int64)
    y1 = np.floor(b[:, 1] + _CELL_EPS).astype(np.int64)
    x2 = np.ceil(b[:, 2] - _CELL_EPS).astype(np.int64)
    y2 = np.ceil(b[:, 3] - _CELL_EPS).astype(np.int64)
    x1 = np.clip(x1, 0, wf - 1)
    y1 = np.clip(y1, 0, hf - 1)
    x2 = np.clip(np.maximum(x2, x1 + 1), 1, wf)
    y2 = np.clip(np.maximum(y2, y1 + 1), 1, hf)
    return np.stack([x1, y1, x2, y2], axis=1)


def roi_max_pool(feature_map: np.ndarray, box, P: int, scale: float = 1.0) -> np.ndarray:
    """Pool one box (image coordinates times ``scale`` = feature coordinates) to ``(P, P, C)``."""
    fm = np.asarray(feature_map, dtype=np.float64)
    if fm.ndim == 2:
        fm = fm[:, :, None]
    cells = roi_cells(as_array(box), scale, fm.shape[0], fm.shape[1])
    out, _ = _kernels.roi_pool_forward(np.ascontiguousarray(fm), cells, P)
    return out[0]


def _check_inside(net: Network, boxes: np.ndarray) -> None:
    h, w = net.config.image_size
    tol = 1e-6
    bad = (boxes[:, 0] < -tol) | (boxes[:, 1] < -tol) | (boxes[:, 2] > w + tol) | (boxes[:, 3] > h + tol)
    bad |= (boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1])
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DataError(f"RoI {boxes[i].tolist()} is not a valid box inside the {w}x{h} image")


def pool_rois(net: Network, f2: np.ndarray, boxes: np.ndarray):
    cfg = net.config
    cells = roi_cells(boxes, 1.0 / cfg.feature_stride, f2.shape[0], f2.shape[1])
    pooled, arg = _kernels.roi_pool_forward(f2, cells, cfg.pool_size)
    return pooled.reshape(len(boxes), -1), arg


# ---------------------------------------------------------------- heads


def head_forward(net: Network, expert: str, x: np.ndarray):
    p = net.params
    fc6, fc7, cls, bbox = net.head(expert)
    h6 = np.maximum(x @ p[f"{fc6}.weight"] + p[f"{fc6}.bias"], 0.0)
    h7 = np.maximum(h6 @ p[f"{fc7}.weight"] + p[f"{fc7}.bias"], 0.0)
    logits = h7 @ p[f"{cls}.weight"] + p[f"{cls}.bias"]
    deltas = h7 @ p[f"{bbox}.weight"] + p[f"{bbox}.bias"]
    return logits, deltas, (x, h6, h7)


def head_backward(net: Network, expert: str, cache, dlogits, ddeltas, grads: dict) -> np.ndarray:
    p = net.params
    fc6, fc7, cls, bbox = net.head(expert)
    x, h6, h7 = cache
    _accum(grads, f"{cls}.weight", h7.T @ dlogits)
    _accum(grads, f"{cls}.bias", dlogits.sum(axis=0))
    _accum(grads, f"{bbox}.weight", h7.T @ ddeltas)
    _accum(grads, f"{bbox}.bias", ddeltas.sum(axis=0))
    dh7 = (dlogits @ p[f"{cls}.weight"].T + ddeltas @ p[f"{bbox}.weight"].T) * (h7 > 0)
    _accum(grads, f"{fc7}.weight", h6.T @ dh7)
    _accum(grads, f"{fc7}.bias", dh7.sum(axis=0))
    dh6 = (dh7 @ p[f"{fc7}.weight"].T) * (h6 > 0)
    _accum(grads, f"{fc6}.weight", x.T @ dh6)
    _accum(grads, f"{fc6}.bias", dh6.sum(axis=0))
    return dh6 @ p[f"{fc6}.weight"].T


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# -------------------------------------------------------------- forward


def _expert_indices(net: Network, boxes: np.ndarray, experts) -> np.ndarray:
    if experts is None:
        if net.config.n_experts == 1:
            return np.zeros(len(boxes), dtype=np.int64)
        return test_index(boxes)
    if isinstance(experts, str):
        return np.full(len(boxes), net.experts.index(experts), dtype=np.int64)
    return np.array([net.experts.index(e) if isinstance(e, str) else int(e) for e in experts], dtype=np.int64)


def forward_boxes(net: Network, image: np.ndarray, boxes, experts=None, f1: np.ndarray | None = None):
    """Class probabilities ``(N, C+1)`` and raw deltas ``(N, 4C)`` for ``boxes``.

    ``experts`` is None (route by the test rule), one expert name for all
    boxes, or a per-box sequence of names / indices into ``net.experts``.
    """
    cfg = net.config
    boxes = as_array(boxes) if len(boxes) else np.zeros((0, 4))
    n = len(boxes)
    probs = np.zeros((n, cfg.n_classes + 1))
    deltas = np.zeros((n, 4 * cfg.n_classes))
    if n == 0:
        return probs, deltas
    _check_inside(net, boxes)
    idx = _expert_indices(net, boxes, experts)
    trunk = trunk_forward(net, image, f1)
    pooled, _ = pool_rois(net, trunk.f2, boxes)
    for k, e in enumerate(net.experts):
        sel = idx == k
        if sel.any():
            logits, d, _ = head_forward(net, e, pooled[sel])
            probs[sel] = softmax(logits)
            deltas[sel] = d
    return probs, deltas


def forward(net: Network, image: np.ndarray, routed_rois: Sequence[tuple[Box, str]]):
    """Run ``(box, expert)`` pairs through the network; see :func:`forward_boxes`."""
    if not routed_rois:
        return forward_boxes(net, image, [])
    boxes = as_array([b for b, _ in routed_rois])
    return forward_boxes(net, image, boxes, [e for _, e in routed_rois])


# ----------------------------------------------------------------- loss

LOSS_TERMS = ("softmax_H", "smooth_H", "softmax_S", "smooth_S", "softmax_V", "smooth_V", "reg")


def _scaled_targets(cfg: NetConfig, targets: np.ndarray) -> np.ndarray:
    if cfg.bbox_target_stds is None:
        return targets
    return targets / np.asarray(cfg.bbox_target_stds)


def _regression_slots(classes: np.ndarray) -> np.ndarray:
    base = 4 * (classes - 1)
    return base[:, None] + np.arange(4)[None, :]


def smooth_term(deltas: np.ndarray, classes: np.ndarray, targets: np.ndarray):
    """Mean over positives of the summed smooth-L1 on the matched class's 4 outputs."""
    pos = np.flatnonzero(classes > 0)
    grad = np.zeros_like(deltas)
    if len(pos) == 0:
        return 0.0, grad
    slots = _regression_slots(classes[pos])
    diff = deltas[pos[:, None], slots] - targets[pos]
    grad[pos[:, None], slots] = smooth_l1_grad(diff) / len(pos)
    return float(smooth_l1(diff).sum() / len(pos)), grad


def weight_penalty(net: Network, weight_decay: float) -> float:
    if weight_decay == 0:
        return 0.0
    total = 0.0
    for l in net.layers:
        if not l.frozen:
            w = net.params[f"{l.name}.weight"]
            total += float(np.dot(w.ravel(), w.ravel()))
    return 0.5 * weight_decay * total


def total_of(breakdown: Mapping[str, float]) -> float:
    return float(sum(breakdown[k] for k in LOSS_TERMS))


def compute_loss(outputs, batches, reg: float = 0.0, bbox_target_stds=None):
    """Loss from already computed ``(probs, deltas)`` pairs, one per batch.

    Returns ``(total, breakdown)`` where breakdown holds the seven logged
    terms; experts without a batch contribute zeros.
    """
    breakdown = dict.fromkeys(LOSS_TERMS, 0.0)
    breakdown["reg"] = float(reg)
    for (probs, deltas), batch in zip(outputs, batches):
        if len(batch) == 0:
            continue
        p = np.clip(probs[np.arange(len(batch)), batch.classes], 1e-300, None)
        breakdown[f"softmax_{batch.expert}"] += float(-np.log(p).mean())
        targets = batch.targets
        if bbox_target_stds is not None:
            targets = targets / np.asarray(bbox_target_stds)
        breakdown[f"smooth_{batch.expert}"] += smooth_term(deltas, batch.classes, targets)[0]
    return total_of(breakdown), breakdown


def loss_and_gradients(
    net: Network,
    batches,
    images: Mapping[str, np.ndarray],
    weight_decay: float = 0.0,
    conv1_cache: Mapping[str, np.ndarray] | None = None,
):
    """Forward every batch, evaluate the multi-expert loss and backpropagate.

    Each image is run through the trunk once even when several batches use
    it; shared layers receive the sum of all experts' contributions,
    accumulated in H, S, V order. Frozen layers get no gradient entry.

    Returns:
        (total, breakdown, grads)
    """
    cfg = net.config
    order: list[str] = []
    for b in batches:
        for i in b.image_ids:
            if i not in order:
                order.append(i)

    trunks, pooled, args = {}, {}, {}
    members: dict[str, list[tuple[int, np.ndarray]]] = {i: [] for i in order}
    for bi, b in enumerate(batches):
        for slot, image_id in enumerate(b.image_ids):
            members[image_id].append((bi, np.flatnonzero(b.roi_image == slot)))
    for image_id in order:
        f1 = conv1_cache.get(image_id) if conv1_cache is not None else None
        trunks[image_id] = trunk_forward(net, images[image_id], f1)
        boxes = np.concatenate([batches[bi].boxes[rows] for bi, rows in members[image_id]])
        _check_inside(net, boxes)
        pooled[image_id], args[image_id] = pool_rois(net, trunks[image_id].f2, boxes)

    # regroup pooled rows per batch
    batch_x = [np.zeros((len(b), cfg.pool_size * cfg.pool_size * cfg.conv2_channels)) for b in batches]
    for image_id in order:
        start = 0
        for bi, rows in members[image_id]:
            batch_x[bi][rows] = pooled[image_id][start : start + len(rows)]
            start += len(rows)

    breakdown = dict.fromkeys(LOSS_TERMS, 0.0)
    grads: dict[str, np.ndarray] = {}
    dx = []
    for b, x in zip(batches, batch_x):
        if len(b) == 0:
            dx.append(x)
            continue
        logits, deltas, cache = head_forward(net, b.expert, x)
        n = len(b)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        breakdown[f"softmax_{b.expert}"] += float(-logp[np.arange(n), b.classes].mean())
        dlogits = np.exp(logp)
        dlogits[np.arange(n), b.classes] -= 1.0
        dlogits /= n
        smooth, ddeltas = smooth_term(deltas, b.classes, _scaled_targets(cfg, b.targets))
        breakdown[f"smooth_{b.expert}"] += smooth
        dx.append(head_backward(net, b.expert, cache, dlogits, ddeltas, grads))

    for image_id in order:
        parts = [dx[bi][rows] for bi, rows in members[image_id]]
        dpool = np.concatenate(parts).reshape(-1, cfg.pool_size, cfg.pool_size, cfg.conv2_channels)
        f2 = trunks[image_id].f2
        df2 = _kernels.roi_pool_backward(np.ascontiguousarray(dpool), args[image_id], f2.shape[0], f2.shape[1])
        trunk_backward(net, trunks[image_id], df2, grads)

    breakdown["reg"] = weight_penalty(net, weight_decay)
    for l in net.layers:
        if l.frozen:
            continue
        for part in ("weight", "bias"):
            key = f"{l.name}.{part}"
            if key not in grads:
                grads[key] = np.zeros_like(net.params[key])
        if weight_decay:
            grads[f"{l.name}.weight"] = grads[f"{l.name}.weight"] + weight_decay * net.params[f"{l.name}.weight"]
    return total_of(breakdown), breakdown, grads


# ------------------------------------------------------------ weight I/O

MAGIC = b"MERCNNW\x01"
FORMAT_VERSION = 1


def save_weights(net: Network, path) -> None:
    """Write the self-describing weight file (format in the README)."""
    layers_meta = []
    blobs = []
    offset = 0
    for l in net.layers:
        entry = asdict(l)
        entry["shape"] = list(l.shape)
        entry["params"] = []
        for part in ("weight", "bias"):
            arr = np.ascontiguousarray(net.params[f"{l.name}.{part}"], dtype="<f8")
            entry["params"].append({"key": part, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        layers_meta.append(entry)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "config": net.config.to_dict(), "layers": layers_meta},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_weights(path, expect: NetConfig | Network | None = None) -> Network:
    """Read a weight file.

    Raises:
        DataError: bad magic/version, truncated data, or (with ``expect``)
            an architecture mismatch naming the first differing layer.
    """
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC) - 1] != MAGIC[:-1]:
        raise DataError(f"{path}: not a weight file")
    if data[len(MAGIC) - 1] != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported weight format version {data[len(MAGIC) - 1]}")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if len(data) < start + hlen:
        raise DataError(f"{path}: truncated header")
    try:
        header = json.loads(data[start : start + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise DataError(f"{path}: corrupt header") from None
    body = data[start + hlen :]
    cfg = NetConfig.from_dict(header["config"])
    layers, params = [], {}
    for entry in header["layers"]:
        p_meta = entry.pop("params")
        entry["shape"] = tuple(entry["shape"])
        layers.append(LayerSpec(**entry))
        for pm in p_meta:
            end = pm["offset"] + pm["nbytes"]
            if end > len(body):
                raise DataError(f"{path}: truncated data in layer {entry['name']}")
            arr = np.frombuffer(body[pm["offset"] : end], dtype="<f8").reshape(pm["shape"])
            params[f"{entry['name']}.{pm['key']}"] = arr.astype(np.float64)
    expected_total = sum(a.nbytes for a in params.values())
    if len(body) != expected_total:
        raise DataError(f"{path}: data section is {len(body)} bytes, header describes {expected_total}")
    net = Network(cfg, layers, params)
    reference = build_layers(cfg)
    _compare_layers(path, reference, layers, "stored config")
    if expect is not None:
        exp_cfg = expect.config if isinstance(expect, Network) else expect
        _compare_layers(path, build_layers(exp_cfg), layers, "expected architecture")
    return net


def _compare_layers(path, want: list[LayerSpec], got: list[LayerSpec], what: str) -> None:
    for w, g in zip(want, got):
        if (w.name, tuple(w.shape)) != (g.name, tuple(g.shape)):
            raise DataError(
                f"{path}: layer {g.name!r} {tuple(g.shape)} does not match {what} "
                f"layer {w.name!r} {tuple(w.shape)}"
            )
    if len(want) != len(got):
        extra = (want if len(want) > len(got) else got)[min(len(want), len(got))]
        raise DataError(f"{path}: layer {extra.name!r} present in only one of file / {what}")
