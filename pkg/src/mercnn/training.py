"""SGD training of the multi-expert network."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from typing import Callable, Mapping

import numpy as np

from .datasets import Dataset
from .errors import UsageError
from .network import LOSS_TERMS, NetConfig, Network, conv1_features, init_network, loss_and_gradients
from .sampling import LabeledImage, make_training_iteration

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "lr", "total") + LOSS_TERMS


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.001
    lr_drop_factor: float = 0.1
    step_iteration: int = 60_000
    total_iterations: int = 80_000
    weight_decay: float = 5e-4
    seed: int = 0
    batch_size: int = 128
    images_per_batch: int = 2
    fg_fraction: float = 0.25

    def __post_init__(self):
        if not self.total_iterations >= self.step_iteration >= 1:
            raise UsageError("need total_iterations >= step_iteration >= 1")
        if self.base_lr < 0 or self.weight_decay < 0:
            raise UsageError("learning rate and weight decay must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate(iteration: int, cfg: TrainConfig) -> float:
    """Step schedule; ``iteration`` is 0-based."""
    return cfg.base_lr * (cfg.lr_drop_factor if iteration >= cfg.step_iteration else 1.0)


def sgd_step(net: Network, grads: Mapping[str, np.ndarray], iteration: int, cfg: TrainConfig) -> Network:
    """In-place plain SGD: ``p -= lr * lr_multiplier * grad``; frozen layers are skipped."""
    lr = learning_rate(iteration, cfg)
    for layer in net.layers:
        if layer.frozen:
            continue
        step = lr * layer.lr_multiplier
        for part in ("weight", "bias"):
            key = f"{layer.name}.{part}"
            g = grads.get(key)
            if g is not None:
                net.params[key] -= step * g
    return net


def train(
    dataset: Dataset,
    pool: Mapping[str, LabeledImage],
    net_cfg: NetConfig,
    cfg: TrainConfig,
    progress: Callable[[int, dict], None] | None = None,
) -> tuple[Network, list[dict]]:
    """Run ``cfg.total_iterations`` multi-batch SGD iterations.

    Initialisation and batch sampling draw from separate streams spawned
    from ``cfg.seed``, so runs are bit-reproducible.
    """
    init_seq, sample_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    net = init_network(net_cfg, np.random.default_rng(init_seq))
    rng = np.random.default_rng(sample_seq)
    images = {r.image_id: r.image() for r in dataset.images if r.image_id in pool}
    conv1_cache = None
    if net.layer("conv1").frozen:
        conv1_cache = {k: conv1_features(net, img) for k, img in images.items()}
    history = []
    for it in range(cfg.total_iterations):
        batches = make_training_iteration(
            pool,
            rng,
            n_experts=net_cfg.n_experts,
            batch_size=cfg.batch_size,
            images_per_batch=cfg.images_per_batch,
            fg_fraction=cfg.fg_fraction,
        )
        total, breakdown, grads = loss_and_gradients(net, batches, images, cfg.weight_decay, conv1_cache)
        row = {"iteration": it, "lr": learning_rate(it, cfg), "total": total, **breakdown}
        history.append(row)
        if not np.isfinite(total):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        sgd_step(net, grads, it, cfg)
        if progress is not None:
            progress(it, row)
    return net, history


def write_log(history, path) -> None:
    """CSV with full-precision floats so the logged terms re-add to the total exactly."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_COLUMNS)
        for row in history:
            w.writerow([row["iteration"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])


def read_log(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(v) if k == "iteration" else float(v)) for k, v in r.items()} for r in rows]


def smoothed(values, window: int = 25) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return v
    kernel = np.ones(min(window, len(v))) / min(window, len(v))
    return np.convolve(v, kernel, mode="valid")
