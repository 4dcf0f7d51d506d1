"""Scripted desk-scale experiments: the experts x RoI-source ablation grid.

Every arm trains on the same synthetic train split and is evaluated on the
same test split with the same simulated sparse test proposals; arms differ
only in expert count and training RoI source.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from .datasets import Dataset, SynthConfig, synth_dataset
from .evaluation import detect_dataset, mean_ap, per_expert_eval
from .network import NetConfig, Network
from .pipeline import SIM_JITTER, SIM_N_RANDOM, SYNTH_EXHAUSTIVE, build_proposals, label_dataset
from .roi_exhaustive import ExhaustiveConfig
from .training import TrainConfig, train

log = logging.getLogger(__name__)

# Desk-scale optimisation settings (schedule shape 3:4 like the full-size runs).
DESK_TRAIN = TrainConfig(base_lr=0.03, step_iteration=1500, total_iterations=2000, weight_decay=5e-4, seed=0)
DESK_NET = NetConfig(hidden_init_std=None)
ARMS = ((1, "sparse"), (1, "combined"), (3, "sparse"), (3, "combined"))


@dataclass
class AblationConfig:
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(n_test=200))
    net: NetConfig = DESK_NET
    train: TrainConfig = DESK_TRAIN
    exhaustive: ExhaustiveConfig = SYNTH_EXHAUSTIVE
    sim_n_random: int = SIM_N_RANDOM
    sim_jitter: float = SIM_JITTER
    train_proposal_seed: int = 1
    test_proposal_seed: int = 2
    iou_thresh: float = 0.5


@dataclass
class ArmResult:
    n_experts: int
    rois: str
    net: Network
    history: list
    mAP: float
    per_class: dict


def run_arm(
    n_experts: int,
    rois: str,
    cfg: AblationConfig,
    train_ds: Dataset,
    test_ds: Dataset,
    test_props,
    threads: int = 1,
) -> ArmResult:
    props = build_proposals(
        train_ds, rois, cfg.train_proposal_seed, cfg.exhaustive, cfg.sim_n_random, cfg.sim_jitter, threads
    )
    pool = label_dataset(train_ds, props, threads)
    net_cfg = replace(cfg.net, n_experts=n_experts)
    net, history = train(train_ds, pool, net_cfg, cfg.train)
    dets = detect_dataset(net, test_ds, test_props, threads=threads)
    m, per_class = mean_ap(dets, test_ds.ground_truth(), range(1, len(test_ds.classes) + 1), cfg.iou_thresh)
    log.info("arm experts=%d rois=%s mAP=%.4f", n_experts, rois, m)
    return ArmResult(n_experts, rois, net, history, m, {test_ds.classes[c - 1]: v for c, v in per_class.items()})


def run_ablation(cfg: AblationConfig = AblationConfig(), threads: int = 1, arms=ARMS):
    """Train and evaluate every arm. Returns ``({(experts, rois): ArmResult}, train_ds, test_ds, test_props)``."""
    train_ds, test_ds = synth_dataset(cfg.synth, threads)
    test_props = build_proposals(
        test_ds, "sparse", cfg.test_proposal_seed, n_random=cfg.sim_n_random, jitter=cfg.sim_jitter, threads=threads
    )
    results = {
        (n, rois): run_arm(n, rois, cfg, train_ds, test_ds, test_props, threads) for n, rois in arms
    }
    return results, train_ds, test_ds, test_props


def single_expert_table(result: ArmResult, test_ds: Dataset, test_props, threads: int = 1) -> dict:
    return per_expert_eval(result.net, test_ds, test_props, "single_expert_only", threads=threads)
