"""
Command line interface.

    mercnn synth     --out DIR                         synthetic train/test splits
    mercnn gen-rois  --dataset DIR --mode M --out DIR  exhaustive / simulated / merged proposals
    mercnn train     --dataset DIR --out DIR           weights, CSV log, loss figure
    mercnn detect    --dataset DIR --weights W --out DIR
    mercnn eval      --dataset DIR --detections CSV --out DIR
    mercnn analyze   --dataset DIR --out DIR [--weights W]
    mercnn ablate    --out DIR                         experts x RoI-source grid

Every command writes ``manifest.json`` into its output directory. Passing
that file back with ``--config`` reruns the command with the same resolved
arguments; explicit flags override it. ``--threads`` and ``--out`` are not
recorded since they never change the outputs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, Paths
from .datasets import SynthConfig, load_dataset, save_dataset, synth_dataset
from .detection import read_detections, write_detections
from .errors import DataError, MercnnError, UsageError
from .evaluation import (
    HISTOGRAM_EDGES,
    RECALL_THRESHOLDS,
    detect_dataset,
    iou_histogram,
    mean_ap,
    per_expert_eval,
    recall_curve,
)
from .experiments import DESK_NET, DESK_TRAIN, AblationConfig, run_ablation, single_expert_table
from .network import NetConfig, load_weights, save_weights
from .pipeline import (
    ROI_MODES,
    SIM_JITTER,
    SIM_N_RANDOM,
    SYNTH_EXHAUSTIVE,
    build_proposals,
    dense_proposals,
    label_dataset,
    sparse_proposals,
)
from .plotting import plot_iou_histograms, plot_loss, plot_per_expert, plot_recall_curves
from .roi_exhaustive import ExhaustiveConfig
from .roi_ingest import load_proposals, merge_roi_sets, save_proposals
from .training import TrainConfig, train, write_log

log = logging.getLogger("mercnn")

UNRECORDED = ("out", "threads", "force", "config", "command")

# per-command defaults; None-valued argparse defaults let us tell explicit flags apart
DEFAULTS = {
    "synth": {"seed": 0, "n_train": 200, "n_test": 50, "image_size": 64},
    "gen-rois": {
        "seed": 1,
        "dataset": None,
        "split": "train",
        "mode": None,
        "inputs": [],
        "min_side": SYNTH_EXHAUSTIVE.min_side,
        "ratios": list(SYNTH_EXHAUSTIVE.ratios),
        "n_random": SIM_N_RANDOM,
        "jitter": SIM_JITTER,
        "allow_dense_test": False,
    },
    "train": {
        "seed": DESK_TRAIN.seed,
        "dataset": None,
        "split": "train",
        "proposals": None,
        "rois": "combined",
        "experts": 3,
        "shared_fc": DESK_NET.shared_fc,
        "iterations": DESK_TRAIN.total_iterations,
        "step": DESK_TRAIN.step_iteration,
        "lr": DESK_TRAIN.base_lr,
        "lr_drop": DESK_TRAIN.lr_drop_factor,
        "weight_decay": DESK_TRAIN.weight_decay,
        "hidden_init": "he",
        "min_side": SYNTH_EXHAUSTIVE.min_side,
        "n_random": SIM_N_RANDOM,
        "jitter": SIM_JITTER,
        "proposal_seed": 1,
    },
    "detect": {
        "seed": 2,
        "dataset": None,
        "split": "test",
        "weights": None,
        "proposals": None,
        "score_threshold": 0.05,
        "expert": None,
        "n_random": SIM_N_RANDOM,
        "jitter": SIM_JITTER,
        "allow_dense_test": False,
    },
    "eval": {"seed": 0, "dataset": None, "split": "test", "detections": None, "iou": "0.5"},
    "analyze": {
        "seed": 1,
        "dataset": None,
        "split": "train",
        "weights": None,
        "eval_split": "test",
        "min_side": SYNTH_EXHAUSTIVE.min_side,
        "n_random": SIM_N_RANDOM,
        "jitter": SIM_JITTER,
        "proposal_seed": 2,
        "thresholds": list(RECALL_THRESHOLDS),
        "bins": len(HISTOGRAM_EDGES) - 1,
    },
    "ablate": {"seed": 0, "iterations": DESK_TRAIN.total_iterations, "step": DESK_TRAIN.step_iteration, "n_train": 200, "n_test": 200},
}


GEN_MODES = ("exhaustive", "simulate", "both", "merge")
SPLIT_HELP = "split subdirectory when --dataset is a synth output root"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("global")
    g.add_argument("--config", help="JSON config or a previous run's manifest.json")
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int, default=1)
    g.add_argument("--out", help="output directory")
    g.add_argument("--force", action="store_true", help="allow a non-empty output directory")

    p = _Parser(prog="mercnn", description="Multi-expert region-based detection at desk scale.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate the synthetic dataset")
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-test", type=int)
    s.add_argument("--image-size", type=int)

    s = sub.add_parser("gen-rois", parents=[common], help="write proposal files")
    s.add_argument("--dataset")
    s.add_argument("--split", choices=("train", "test"), help=SPLIT_HELP)
    s.add_argument("--mode", choices=GEN_MODES)
    s.add_argument("--inputs", nargs="+", help="proposal files to merge")
    s.add_argument("--min-side", type=float)
    s.add_argument("--ratios", type=float, nargs="+")
    s.add_argument("--n-random", type=int)
    s.add_argument("--jitter", type=float)
    s.add_argument("--allow-dense-test", action="store_true", default=None)

    s = sub.add_parser("train", parents=[common], help="train the network")
    s.add_argument("--dataset")
    s.add_argument("--split", choices=("train", "test"), help=SPLIT_HELP)
    s.add_argument("--proposals", help="proposal file; overrides --rois")
    s.add_argument("--rois", choices=ROI_MODES)
    s.add_argument("--experts", type=int, choices=(1, 3))
    s.add_argument("--shared-fc", choices=("none", "fc6", "fc6+fc7"))
    s.add_argument("--iterations", type=int)
    s.add_argument("--step", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--lr-drop", type=float)
    s.add_argument("--weight-decay", type=float)
    s.add_argument("--hidden-init", help="'he' or a Gaussian standard deviation")
    s.add_argument("--min-side", type=float)
    s.add_argument("--n-random", type=int)
    s.add_argument("--jitter", type=float)
    s.add_argument("--proposal-seed", type=int)

    s = sub.add_parser("detect", parents=[common], help="run detection on a split")
    s.add_argument("--dataset")
    s.add_argument("--split", choices=("train", "test"), help=SPLIT_HELP)
    s.add_argument("--weights")
    s.add_argument("--proposals")
    s.add_argument("--score-threshold", type=float)
    s.add_argument("--expert", choices=("H", "S", "V"))
    s.add_argument("--n-random", type=int)
    s.add_argument("--jitter", type=float)
    s.add_argument("--allow-dense-test", action="store_true", default=None)

    s = sub.add_parser("eval", parents=[common], help="score a detections CSV")
    s.add_argument("--dataset")
    s.add_argument("--split", choices=("train", "test"), help=SPLIT_HELP)
    s.add_argument("--detections")
    s.add_argument("--iou", help="match IoU threshold or 'coco'")

    s = sub.add_parser("analyze", parents=[common], help="recall / histogram / per-expert reports")
    s.add_argument("--dataset")
    s.add_argument("--split", choices=("train", "test"), help=SPLIT_HELP)
    s.add_argument("--weights")
    s.add_argument("--eval-split", choices=("train", "test"), help="split for the per-expert table")
    s.add_argument("--min-side", type=float)
    s.add_argument("--n-random", type=int)
    s.add_argument("--jitter", type=float)
    s.add_argument("--proposal-seed", type=int)
    s.add_argument("--thresholds", type=float, nargs="+")
    s.add_argument("--bins", type=int)

    s = sub.add_parser("ablate", parents=[common], help="experts x RoI-source ablation grid")
    s.add_argument("--iterations", type=int)
    s.add_argument("--step", type=int)
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-test", type=int)
    return p


def resolve_args(ns: argparse.Namespace) -> dict:
    """Defaults, then the ``--config`` file's args, then explicit flags."""
    cmd = ns.command
    args = dict(DEFAULTS[cmd])
    if ns.config:
        try:
            loaded = json.loads(Path(ns.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read config {ns.config}: {e}") from None
        if "command" in loaded and loaded["command"] != cmd:
            raise UsageError(f"{ns.config} is a manifest for {loaded['command']!r}, not {cmd!r}")
        stored = loaded.get("args", loaded)
        unknown = set(stored) - set(args)
        if unknown:
            raise UsageError(f"{ns.config}: unknown keys for {cmd}: {sorted(unknown)}")
        args.update(stored)
    for key, val in vars(ns).items():
        if key in UNRECORDED or val is None:
            continue
        args[key] = val
    return args


def _prepare_out(ns) -> Path:
    if not ns.out:
        raise UsageError("--out is required")
    out = Path(ns.out)
    if out.exists() and any(out.iterdir()) and not ns.force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, cmd: str, args: dict, config: ExperimentConfig | None = None) -> None:
    manifest = {"command": cmd, "version": __version__, "args": args}
    if config is not None:
        manifest["config"] = config.to_dict()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _need(args: dict, *keys: str) -> None:
    missing = [k for k in keys if not args.get(k)]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _exhaustive(args) -> ExhaustiveConfig:
    return ExhaustiveConfig(ratios=tuple(args.get("ratios", SYNTH_EXHAUSTIVE.ratios)), min_side=args["min_side"])


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return "nan" if v != v else f"{v:.4f}"


def _markdown_table(header, rows) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------- commands


def _dataset(args, split_key: str = "split"):
    """Load ``--dataset``, descending into ``<dataset>/<split>`` for a synth output root."""
    _need(args, "dataset")
    root = Path(args["dataset"])
    split = args.get(split_key)
    if split and (root / split / "manifest.json").is_file():
        return load_dataset(root / split)
    ds = load_dataset(root)
    if split and ds.split != split:
        raise UsageError(f"{root} holds the {ds.split!r} split, not {split!r}")
    return ds


def _sparse(ds, args, seed_key: str, threads: int):
    return sparse_proposals(ds, args[seed_key], args["n_random"], args["jitter"], threads)


def cmd_synth(args, ns, out: Path) -> None:
    size = int(args["image_size"])
    cfg = SynthConfig(image_size=(size, size), n_train=args["n_train"], n_test=args["n_test"], seed=args["seed"])
    train_ds, test_ds = synth_dataset(cfg, ns.threads)
    save_dataset(train_ds, out / "train")
    save_dataset(test_ds, out / "test")
    _write_manifest(out, "synth", args, ExperimentConfig(synth=cfg, seed=args["seed"]))


def cmd_gen_rois(args, ns, out: Path) -> None:
    _need(args, "mode")
    mode = args["mode"]
    if mode == "merge":
        if len(args["inputs"]) < 2:
            raise UsageError("merge mode needs at least two --inputs files")
        merged = load_proposals(args["inputs"][0])
        for path in args["inputs"][1:]:
            for k, v in load_proposals(path).items():
                merged[k] = merge_roi_sets(merged[k], v) if k in merged else v
        save_proposals(merged.values(), out / "merged.json")
        _write_manifest(out, "gen-rois", args, ExperimentConfig(paths=Paths(proposals=list(args["inputs"]))))
        return
    ds = _dataset(args)
    cfg = _exhaustive(args)
    written = {}
    if mode in ("exhaustive", "both"):
        if ds.split == "test" and not args["allow_dense_test"]:
            raise UsageError(
                "exhaustive search is only used for training; refusing to write dense RoIs for the "
                "test split (pass --allow-dense-test to override)"
            )
        written["exhaustive"] = dense_proposals(ds, cfg)
        save_proposals(written["exhaustive"].values(), out / "exhaustive.json", key="windows")
    if mode in ("simulate", "both"):
        written["simulated"] = _sparse(ds, args, "seed", ns.threads)
        save_proposals(written["simulated"].values(), out / "simulated.json")
    if mode == "both":
        dense, sparse = written["exhaustive"], written["simulated"]
        save_proposals([merge_roi_sets(sparse[k], dense[k]) for k in sparse], out / "combined.json")
    exp = ExperimentConfig(paths=Paths(dataset=args["dataset"]), exhaustive=cfg, sim_n_random=args["n_random"], sim_jitter=args["jitter"], seed=args["seed"])
    _write_manifest(out, "gen-rois", args, exp)


def _net_config(args, n_classes: int, image_size) -> NetConfig:
    hidden = str(args["hidden_init"])
    try:
        std = None if hidden.lower() == "he" else float(hidden)
    except ValueError:
        raise UsageError(f"--hidden-init must be 'he' or a number, got {hidden!r}") from None
    return replace(
        DESK_NET,
        n_classes=n_classes,
        image_size=tuple(image_size),
        n_experts=int(args["experts"]),
        shared_fc=args["shared_fc"],
        hidden_init_std=std,
    )


def cmd_train(args, ns, out: Path) -> None:
    ds = _dataset(args)
    if not ds.images:
        raise DataError(f"{args['dataset']}: dataset is empty")
    if args["proposals"]:
        props = load_proposals(args["proposals"], known_ids={r.image_id for r in ds.images})
    else:
        props = build_proposals(
            ds, args["rois"], args["proposal_seed"], _exhaustive(args), args["n_random"], args["jitter"], ns.threads
        )
    pool = label_dataset(ds, props, ns.threads)
    first = ds.images[0]
    net_cfg = _net_config(args, len(ds.classes), (first.height, first.width))
    tcfg = TrainConfig(
        base_lr=args["lr"],
        lr_drop_factor=args["lr_drop"],
        step_iteration=min(args["step"], args["iterations"]),
        total_iterations=args["iterations"],
        weight_decay=args["weight_decay"],
        seed=args["seed"],
    )
    net, history = train(ds, pool, net_cfg, tcfg)
    save_weights(net, out / "weights.bin")
    write_log(history, out / "train_log.csv")
    plot_loss(history, out / "loss.png")
    paths = Paths(dataset=args["dataset"], proposals=[args["proposals"]] if args["proposals"] else [])
    exp = ExperimentConfig(
        paths=paths, exhaustive=_exhaustive(args), net=net_cfg, train=tcfg,
        sim_n_random=args["n_random"], sim_jitter=args["jitter"], seed=args["seed"],
    )
    _write_manifest(out, "train", args, exp)


def cmd_detect(args, ns, out: Path) -> None:
    _need(args, "weights")
    ds = _dataset(args)
    net = load_weights(args["weights"])
    if len(ds.classes) != net.config.n_classes:
        raise DataError(f"weights have {net.config.n_classes} classes, dataset has {len(ds.classes)}")
    if args["proposals"]:
        props = load_proposals(args["proposals"], known_ids={r.image_id for r in ds.images})
        dense = any(p.source in ("exhaustive", "combined") for p in props.values())
        if dense and not args["allow_dense_test"]:
            raise UsageError(
                "proposal file holds exhaustive-search RoIs, which are for training only "
                "(pass --allow-dense-test to override)"
            )
    else:
        props = _sparse(ds, args, "seed", ns.threads)
    dets = detect_dataset(net, ds, props, args["score_threshold"], expert=args["expert"], threads=ns.threads)
    write_detections(dets, ds.classes, out / "detections.csv")
    _write_manifest(out, "detect", args, ExperimentConfig(paths=Paths(dataset=args["dataset"], weights=args["weights"]), net=net.config, seed=args["seed"]))


def cmd_eval(args, ns, out: Path) -> None:
    _need(args, "detections")
    ds = _dataset(args)
    dets = read_detections(args["detections"], ds.classes)
    if str(args["iou"]) == "coco":
        iou = "coco"
    else:
        try:
            iou = float(args["iou"])
        except ValueError:
            raise UsageError(f"--iou must be a number or 'coco', got {args['iou']!r}") from None
    m, per_class = mean_ap(dets, ds.ground_truth(), range(1, len(ds.classes) + 1), iou)
    names = {c: ds.classes[c - 1] for c in per_class}
    _write_rows(out / "eval.csv", ("class", "AP"), [(names[c], repr(v)) for c, v in per_class.items()] + [("mAP", repr(m))])
    md = f"# Detection accuracy ({ds.split} split, IoU {args['iou']})\n\n"
    md += f"{len(dets)} detections over {len(ds.images)} images.\n\n"
    md += _markdown_table(("class", "AP"), [(names[c], _fmt(v)) for c, v in per_class.items()] + [("**mAP**", _fmt(m))])
    (out / "report.md").write_text(md)
    _write_manifest(out, "eval", args)


def cmd_analyze(args, ns, out: Path) -> None:
    ds = _dataset(args)
    gts = {r.image_id: r.gt_boxes for r in ds.images}
    exh = {k: p.boxes for k, p in dense_proposals(ds, _exhaustive(args)).items()}
    sparse = {k: p.boxes for k, p in _sparse(ds, args, "proposal_seed", ns.threads).items()}
    thresholds = [float(t) for t in args["thresholds"]]
    curves = {"exhaustive": recall_curve(exh, gts, thresholds), "sparse": recall_curve(sparse, gts, thresholds)}
    _write_rows(
        out / "recall_curve.csv",
        ("threshold", "exhaustive", "sparse"),
        [(repr(t), repr(a), repr(b)) for (t, a), (_, b) in zip(curves["exhaustive"], curves["sparse"])],
    )
    edges = np.linspace(0.0, 1.0, int(args["bins"]) + 1)
    hists = {"exhaustive": iou_histogram(exh, gts, edges), "sparse": iou_histogram(sparse, gts, edges)}
    _write_rows(
        out / "iou_histogram.csv",
        ("bin_lo", "bin_hi", "exhaustive", "sparse"),
        [(repr(lo), repr(hi), int(a), int(b)) for lo, hi, a, b in zip(edges[:-1], edges[1:], hists["exhaustive"], hists["sparse"])],
    )
    plot_recall_curves(curves, out / "recall_curve.png")
    plot_iou_histograms(hists, edges, out / "iou_histogram.png")
    n_exh = sum(len(v) for v in exh.values())
    n_sp = sum(len(v) for v in sparse.values())
    rec_exh, rec_sp = dict(curves["exhaustive"]), dict(curves["sparse"])
    md = [f"# RoI analysis ({ds.split} split, {len(ds.images)} images)", ""]
    md.append(f"RoIs: exhaustive {n_exh}, sparse {n_sp} (ratio {n_exh / max(n_sp, 1):.1f}x)\n")
    md.append(_markdown_table(("IoU", "recall exhaustive", "recall sparse"), [(f"{t:.2f}", _fmt(rec_exh[t]), _fmt(rec_sp[t])) for t in thresholds]))
    if args["weights"]:
        net = load_weights(args["weights"])
        eval_ds = _dataset(args, "eval_split")
        eval_props = _sparse(eval_ds, args, "proposal_seed", ns.threads)
        table = per_expert_eval(net, eval_ds, eval_props, "single_expert_only", threads=ns.threads)
        cols = ["mAP", *eval_ds.classes]
        _write_rows(out / "per_expert.csv", ("expert", *cols), [(e, *(repr(row[c]) for c in cols)) for e, row in table.items()])
        plot_per_expert(table, list(eval_ds.classes), out / "per_expert.png")
        md += [
            f"## Single-expert evaluation ({eval_ds.split} split)",
            "",
            _markdown_table(("expert", *cols), [(e, *(_fmt(row[c]) for c in cols)) for e, row in table.items()]),
        ]
    (out / "summary.md").write_text("\n".join(md))
    _write_manifest(out, "analyze", args)


def cmd_ablate(args, ns, out: Path) -> None:
    cfg = AblationConfig(
        synth=SynthConfig(n_train=args["n_train"], n_test=args["n_test"], seed=args["seed"]),
        train=replace(DESK_TRAIN, total_iterations=args["iterations"], step_iteration=min(args["step"], args["iterations"])),
    )
    results, _, test_ds, test_props = run_ablation(cfg, ns.threads)
    classes = list(test_ds.classes)
    rows = [(n, rois, repr(r.mAP), *(repr(r.per_class[c]) for c in classes)) for (n, rois), r in results.items()]
    _write_rows(out / "ablation.csv", ("experts", "rois", "mAP", *classes), rows)
    md = ["# Experts x RoI source", "", _markdown_table(("experts", "RoIs", "mAP"), [(n, rois, _fmt(r.mAP)) for (n, rois), r in results.items()])]
    if (3, "combined") in results:
        table = single_expert_table(results[(3, "combined")], test_ds, test_props, ns.threads)
        cols = ["mAP", *classes]
        _write_rows(out / "per_expert.csv", ("expert", *cols), [(e, *(repr(row[c]) for c in cols)) for e, row in table.items()])
        plot_per_expert(table, classes, out / "per_expert.png")
        md += [
            "## Single-expert evaluation (3 experts, combined RoIs)",
            "",
            _markdown_table(("expert", *cols), [(e, *(_fmt(row[c]) for c in cols)) for e, row in table.items()]),
        ]
    (out / "summary.md").write_text("\n".join(md))
    exp = ExperimentConfig(exhaustive=cfg.exhaustive, synth=cfg.synth, net=cfg.net, train=cfg.train, seed=args["seed"])
    _write_manifest(out, "ablate", args, exp)


COMMANDS = {
    "synth": cmd_synth,
    "gen-rois": cmd_gen_rois,
    "train": cmd_train,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
}


def run(argv=None) -> None:
    ns = build_parser().parse_args(argv)
    args = resolve_args(ns)
    if ns.threads < 1:
        raise UsageError("--threads must be at least 1")
    out = _prepare_out(ns)
    COMMANDS[ns.command](args, ns, out)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        run(argv)
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except MercnnError as e:
        print(f"mercnn: error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"mercnn: error: {e}", file=sys.stderr)
        return DataError.exit_code
    except Exception:
        traceback.print_exc()
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
