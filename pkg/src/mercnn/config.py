"""Resolved experiment configuration embedded in every run manifest."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .datasets import SynthConfig
from .detection import NMS_THRESHOLD, SCORE_THRESHOLD
from .evaluation import HISTOGRAM_EDGES, RECALL_THRESHOLDS
from .experiments import DESK_NET, DESK_TRAIN
from .network import NetConfig
from .pipeline import SIM_JITTER, SIM_N_RANDOM, SYNTH_EXHAUSTIVE
from .roi_exhaustive import ExhaustiveConfig
from .routing import SQUARE_BAND, TEST_BOUNDARY
from .training import TrainConfig


@dataclass
class Paths:
    dataset: str | None = None
    proposals: list[str] = field(default_factory=list)
    weights: str | None = None
    out: str | None = None


@dataclass
class EvalConfig:
    score_threshold: float = SCORE_THRESHOLD
    nms_threshold: float = NMS_THRESHOLD
    iou_thresh: float | str = 0.5
    recall_thresholds: tuple[float, ...] = RECALL_THRESHOLDS
    histogram_edges: tuple[float, ...] = HISTOGRAM_EDGES


@dataclass
class ExperimentConfig:
    paths: Paths = field(default_factory=Paths)
    exhaustive: ExhaustiveConfig = SYNTH_EXHAUSTIVE
    synth: SynthConfig = field(default_factory=SynthConfig)
    net: NetConfig = DESK_NET
    train: TrainConfig = DESK_TRAIN
    router: dict = field(default_factory=lambda: {"test_boundary": TEST_BOUNDARY, "square_band": SQUARE_BAND})
    eval: EvalConfig = field(default_factory=EvalConfig)
    sim_n_random: int = SIM_N_RANDOM
    sim_jitter: float = SIM_JITTER
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "paths": asdict(self.paths),
            "exhaustive": self.exhaustive.to_dict(),
            "synth": self.synth.to_dict(),
            "net": self.net.to_dict(),
            "train": self.train.to_dict(),
            "router": dict(self.router),
            "eval": {
                k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.eval).items()
            },
            "sim_n_random": self.sim_n_random,
            "sim_jitter": self.sim_jitter,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        ev = dict(d.get("eval", {}))
        for k in ("recall_thresholds", "histogram_edges"):
            if k in ev:
                ev[k] = tuple(ev[k])
        return cls(
            paths=Paths(**d.get("paths", {})),
            exhaustive=ExhaustiveConfig(**d.get("exhaustive", {})),
            synth=SynthConfig.from_dict(d.get("synth", {})),
            net=NetConfig.from_dict(d.get("net", {})),
            train=TrainConfig(**d.get("train", {})),
            router=d.get("router", {"test_boundary": TEST_BOUNDARY, "square_band": SQUARE_BAND}),
            eval=EvalConfig(**ev),
            sim_n_random=d.get("sim_n_random", SIM_N_RANDOM),
            sim_jitter=d.get("sim_jitter", SIM_JITTER),
            seed=d.get("seed", 0),
        )
