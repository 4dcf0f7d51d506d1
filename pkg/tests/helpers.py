"""Shared builders for network tests and the acceptance suite."""

from __future__ import annotations

import numpy as np

from mercnn.network import init_network, loss_and_gradients
from mercnn.sampling import ExpertBatch


def tiny_problem(cfg, seed=0, n_rois=6, experts="HSV"):
    """Randomised net (non-zero biases), two 8x8 images and one batch per expert."""
    rng = np.random.default_rng(seed)
    net = init_network(cfg, rng)
    for k in net.params:
        if k.endswith(".bias"):
            net.params[k] = rng.normal(0.0, 0.1, net.params[k].shape)
    for k in net.params:
        if k.startswith(("cls", "bbox")) and k.endswith(".weight"):
            net.params[k] = rng.normal(0.0, 0.5, net.params[k].shape)
    h, w = cfg.image_size
    images = {"a": rng.random((h, w)), "b": rng.random((h, w))}
    batches = []
    for e in experts:
        x1 = rng.uniform(0, w / 2, n_rois)
        y1 = rng.uniform(0, h / 2, n_rois)
        boxes = np.stack([x1, y1, x1 + rng.uniform(2, w / 2, n_rois), y1 + rng.uniform(2, h / 2, n_rois)], 1)
        classes = rng.integers(0, cfg.n_classes + 1, n_rois)
        classes[0] = 1  # at least one positive
        targets = rng.normal(0, 0.5, (n_rois, 4))
        roi_image = (np.arange(n_rois) >= n_rois // 2).astype(np.int64)
        batches.append(ExpertBatch(e, ("a", "b"), roi_image, np.arange(n_rois), boxes, classes, targets, np.ones(n_rois)))
    return net, batches, images


def finite_difference_errors(net, batches, images, weight_decay=0.0, step=1e-5):
    """Relative error per trainable scalar: |a - n| / max(|a|, |n|, 1e-6)."""
    _, _, grads = loss_and_gradients(net, batches, images, weight_decay)
    errors = {}
    for key in net.trainable_keys():
        p = net.params[key]
        errs = np.zeros(p.shape)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            lp = loss_and_gradients(net, batches, images, weight_decay)[0]
            p[idx] = old - step
            lm = loss_and_gradients(net, batches, images, weight_decay)[0]
            p[idx] = old
            num = (lp - lm) / (2 * step)
            ana = grads[key][idx]
            errs[idx] = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
        errors[key] = errs
    return errors, grads


def random_boxes(rng, n, size=50.0):
    xy = rng.uniform(0, size * 0.8, (n, 2))
    wh = rng.uniform(2, size * 0.4, (n, 2))
    return np.hstack([xy, xy + wh])


def random_ap_instance(rng, max_dets=20):
    """Scored detections and ground truth for one class over up to 3 images.

    Detections are jittered copies of ground truth or random boxes; scores are
    rounded so that ties occur.
    """
    n_img = int(rng.integers(1, 4))
    gts = {f"i{k}": [tuple(b) for b in random_boxes(rng, int(rng.integers(0, 5)))] for k in range(n_img)}
    if not any(gts.values()):
        gts["i0"] = [tuple(random_boxes(rng, 1)[0])]
    scored = []
    for _ in range(int(rng.integers(0, max_dets + 1))):
        image_id = f"i{int(rng.integers(n_img))}"
        if gts[image_id] and rng.random() < 0.6:
            g = np.array(gts[image_id][int(rng.integers(len(gts[image_id])))])
            b = g + rng.normal(0, 2.0, 4)
            b[2:] = np.maximum(b[2:], b[:2] + 0.5)
        else:
            b = random_boxes(rng, 1)[0]
        scored.append((round(float(rng.random()), 1), image_id, tuple(b)))
    return scored, gts


def random_nms_instance(rng, n_max=30):
    n = int(rng.integers(0, n_max + 1))
    centers = rng.uniform(10, 40, (max(1, n // 4), 2))
    boxes = []
    for _ in range(n):
        c = centers[int(rng.integers(len(centers)))] + rng.normal(0, 3, 2)
        half = rng.uniform(2, 8, 2)
        boxes.append(np.concatenate([c - half, c + half]))
    boxes = np.array(boxes).reshape(-1, 4)
    scores = np.round(rng.random(n), 1)
    return boxes, scores


# ----------------------------------------------------------------- CLI

CLI_STEPS = (
    ("synth", ["--n-train", "12", "--n-test", "6", "--seed", "5"]),
    ("gen-rois", ["--dataset", "{synth}", "--mode", "both", "--min-side", "16"]),
    ("gen-rois-test", ["--dataset", "{synth}", "--split", "test", "--mode", "simulate"]),
    ("train", ["--dataset", "{synth}", "--proposals", "{gen-rois}/combined.json", "--iterations", "12", "--step", "8"]),
    ("detect", ["--dataset", "{synth}", "--weights", "{train}/weights.bin", "--proposals", "{gen-rois-test}/simulated.json"]),
    ("eval", ["--dataset", "{synth}", "--detections", "{detect}/detections.csv"]),
    ("analyze", ["--dataset", "{synth}", "--weights", "{train}/weights.bin", "--min-side", "16"]),
    ("ablate", ["--iterations", "4", "--step", "3", "--n-train", "6", "--n-test", "3"]),
)


def run_cli_suite(root, main):
    """Run every command once into ``root/<step>``; returns step -> output dir."""
    outs = {}
    for step, argv in CLI_STEPS:
        cmd = step.replace("-test", "")
        out = root / step
        filled = []
        for a in argv:
            for k, v in outs.items():
                a = a.replace("{" + k + "}", str(v))
            filled.append(a)
        code = main([cmd, *filled, "--out", str(out)])
        assert code == 0, (step, code)
        outs[step] = out
    return outs


def dir_bytes(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def rerun_from_manifest(out, dest, threads, main):
    import json

    cmd = json.loads((out / "manifest.json").read_text())["command"]
    return main([cmd, "--config", str(out / "manifest.json"), "--threads", str(threads), "--out", str(dest)])
