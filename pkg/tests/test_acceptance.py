"""Acceptance criteria 1-10, one test per criterion.

Each test records a one-line PASS/FAIL verdict that is printed in the
terminal summary, then asserts.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from helpers import (
    dir_bytes,
    finite_difference_errors,
    random_ap_instance,
    random_nms_instance,
    rerun_from_manifest,
    run_cli_suite,
    tiny_problem,
)
from oracles import ap_oracle, enumerate_windows, is_greedy_nms, recall_oracle
from mercnn.cli import main
from mercnn.detection import Detection, nms
from mercnn.evaluation import average_precision
from mercnn.experiments import AblationConfig, run_ablation, single_expert_table
from mercnn.geometry import Box, aspect_log_ratio_array
from mercnn.network import LOSS_TERMS, NetConfig, loss_and_gradients
from mercnn.pipeline import SYNTH_EXHAUSTIVE, build_proposals, dense_proposals, label_dataset, sparse_proposals
from mercnn.roi_exhaustive import ExhaustiveConfig, exhaustive_windows, size_halving_check, window_schedule
from mercnn.routing import EXPERTS, MIRROR, test_category, train_categories
from mercnn.sampling import make_training_iteration
from mercnn.training import TrainConfig, learning_rate, sgd_step, train


def verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def test_criterion_1_exhaustive_windows():
    rng = np.random.default_rng(2024)
    sizes = [tuple(int(v) for v in rng.integers(25, 513, 2)) for _ in range(10)]
    cfg = ExhaustiveConfig()
    elapsed, mismatches, halving_ok = 0.0, [], True
    for W, H in sizes:
        t = time.perf_counter()
        got = exhaustive_windows(W, H, cfg)
        elapsed += time.perf_counter() - t
        if {tuple(r) for r in got.tolist()} != enumerate_windows(W, H) or len(got) != len({tuple(r) for r in got.tolist()}):
            mismatches.append((W, H))
        for r in cfg.ratios:
            sched = window_schedule(W, H, r, cfg)
            if len(sched) >= 5:
                halving_ok &= size_halving_check(sched, 1e-9)
            for a, b in zip(sched, sched[1:]):
                halving_ok &= math.isclose(a.w / b.w, 2 ** 0.25, rel_tol=1e-12)
    ok = not mismatches and halving_ok and elapsed < 10
    verdict(1, ok, f"sizes={sizes} mismatches={mismatches} halving={halving_ok} time={elapsed:.2f}s")
    assert ok


def test_criterion_2_router_sweep():
    thetas = np.concatenate([np.arange(-4000, 4001) / 1000.0, [-1.0, -0.5, 0.0, 0.5, 1.0]])
    t = time.perf_counter()
    bad = []
    for th in thetas.tolist():
        train = train_categories(th)
        test = test_category(th)
        if not train or test not in EXPERTS or test not in train:
            bad.append(th)
        if train_categories(-th) != frozenset(MIRROR[e] for e in train) or test_category(-th) != MIRROR[test]:
            bad.append(th)
    elapsed = time.perf_counter() - t
    ok = not bad and elapsed < 1.0
    verdict(2, ok, f"{len(thetas)} angles, violations={bad[:5]} time={elapsed:.3f}s")
    assert ok


def test_criterion_3_gradients(tiny_cfg):
    t = time.perf_counter()
    net, batches, images = tiny_problem(tiny_cfg, seed=0)
    errors, grads = finite_difference_errors(net, batches, images, weight_decay=5e-4)
    n_params = sum(e.size for e in errors.values())
    n_good = sum(int((e < 1e-4).sum()) for e in errors.values())
    covered = set(errors) == set(net.trainable_keys()) and "conv1.weight" not in errors

    _, _, full = loss_and_gradients(net, batches, images)
    parts = [loss_and_gradients(net, [b], images)[2] for b in batches]
    additive = max(
        float(np.abs(full[k] - sum(p[k] for p in parts)).max()) for k in ("fc6.weight", "fc6.bias")
    )

    frozen_before = {k: net.params[k].tobytes() for k in ("conv1.weight", "conv1.bias")}
    cfg = TrainConfig(base_lr=0.05, step_iteration=100, total_iterations=100)
    for it in range(100):
        _, _, g = loss_and_gradients(net, batches, images, 5e-4)
        sgd_step(net, g, it, cfg)
    frozen = all(net.params[k].tobytes() == v for k, v in frozen_before.items())
    elapsed = time.perf_counter() - t
    ok = n_good == n_params and covered and additive <= 1e-9 and frozen and elapsed < 60
    verdict(
        3, ok,
        f"fd {n_good}/{n_params} below 1e-4 (worst {max(e.max() for e in errors.values()):.2e}), "
        f"shared additivity {additive:.1e}, conv1 unchanged={frozen}, time={elapsed:.1f}s",
    )
    assert ok


@pytest.fixture(scope="module")
def default_pool(default_splits):
    train_ds, _ = default_splits
    props = build_proposals(train_ds, "combined", seed=1)
    return label_dataset(train_ds, props)


def test_criterion_4_batches(default_pool):
    rng = np.random.default_rng(0)
    problems = []
    n_ratio_checks = 0
    for it in range(1000):
        for b in make_training_iteration(default_pool, rng):
            e = EXPERTS.index(b.expert)
            avail = sum(len(default_pool[i].candidates(b.expert)[0]) for i in b.image_ids)
            if len(b) != 128:
                problems.append((it, b.expert, "size", len(b)))
            if avail >= 32:
                n_ratio_checks += 1
                if (b.n_pos, b.n_neg) != (32, 96):
                    problems.append((it, b.expert, "ratio", b.n_pos, b.n_neg))
            if (b.max_iou < 0.1).any():
                problems.append((it, b.expert, "low IoU"))
            eligible = np.array(
                [default_pool[b.image_ids[j]].experts[k, e] for j, k in zip(b.roi_image, b.roi_index)]
            )
            theta = aspect_log_ratio_array(b.boxes)
            pure = all(b.expert in train_categories(float(t)) for t in theta)
            if not (eligible.all() and pure):
                problems.append((it, b.expert, "impure"))
    ok = not problems
    verdict(4, ok, f"3000 batches, {n_ratio_checks} ratio checks, problems={problems[:3]}")
    assert ok


def test_criterion_5_loss_log_and_schedule(small_splits):
    train_ds, _ = small_splits
    pool = label_dataset(train_ds, build_proposals(train_ds, "sparse", seed=0))
    net_cfg = NetConfig(conv1_channels=4, conv2_channels=8, fc_width=16, hidden_init_std=None)
    cfg = TrainConfig(base_lr=0.02, lr_drop_factor=0.1, step_iteration=60, total_iterations=100, seed=3)
    _, hist = train(train_ds, pool, net_cfg, cfg)
    worst = max(abs(r["total"] - sum(r[t] for t in LOSS_TERMS)) for r in hist)
    drop = hist[60]["lr"] / hist[59]["lr"]
    flat = all(r["lr"] == learning_rate(r["iteration"], cfg) for r in hist)
    ok = worst <= 1e-9 and drop == pytest.approx(0.1, rel=1e-12) and hist[59]["lr"] == 0.02 and flat
    verdict(5, ok, f"worst |total - sum of 7 terms| = {worst:.1e}, lr ratio at step = {drop!r}")
    assert ok


@pytest.fixture(scope="module")
def ablation():
    cfg = AblationConfig()
    results, _, test_ds, test_props = run_ablation(cfg)
    table = single_expert_table(results[(3, "combined")], test_ds, test_props)
    return results, table


@pytest.mark.slow
def test_criterion_6_ablation(ablation):
    results, _ = ablation
    m = {k: r.mAP for k, r in results.items()}
    gain = m[(3, "combined")] - m[(1, "sparse")]
    single = [
        ((1, "sparse"), (1, "combined")),
        ((1, "sparse"), (3, "sparse")),
        ((1, "combined"), (3, "combined")),
        ((3, "sparse"), (3, "combined")),
    ]
    drops = {f"{a}->{b}": m[b] - m[a] for a, b in single}
    ok = gain >= 0.02 and all(v >= -0.01 for v in drops.values())
    verdict(6, ok, f"mAP={ {f'{n}-{r}': round(v, 4) for (n, r), v in m.items()} } gain={gain:.4f}")
    assert ok


@pytest.mark.slow
def test_criterion_7_single_expert(ablation):
    _, table = ablation
    h = {e: table[e]["h_bar"] for e in EXPERTS}
    v = {e: table[e]["v_bar"] for e in EXPERTS}
    ok = h["H"] > max(h["S"], h["V"]) and v["V"] > max(v["S"], v["H"])
    verdict(
        7, ok,
        "h_bar AP " + " ".join(f"{e}={h[e]:.3f}" for e in EXPERTS)
        + " | v_bar AP " + " ".join(f"{e}={v[e]:.3f}" for e in EXPERTS),
    )
    assert ok


def test_criterion_8_recall(default_splits):
    train_ds, _ = default_splits
    dense = dense_proposals(train_ds, SYNTH_EXHAUSTIVE)
    sparse = sparse_proposals(train_ds, seed=1)
    gts = {r.image_id: r.gt_boxes.tolist() for r in train_ds.images}
    rec_dense = recall_oracle({k: v.boxes.tolist() for k, v in dense.items()}, gts, 0.5)
    rec_sparse = recall_oracle({k: v.boxes.tolist() for k, v in sparse.items()}, gts, 0.5)
    n_dense = sum(len(v.boxes) for v in dense.values())
    n_sparse = sum(len(v.boxes) for v in sparse.values())
    ok = rec_dense >= rec_sparse and n_dense >= 10 * n_sparse
    verdict(8, ok, f"recall@0.5 exhaustive={rec_dense:.4f} sparse={rec_sparse:.4f}, RoIs {n_dense} vs {n_sparse} ({n_dense / n_sparse:.1f}x)")
    assert ok


def test_criterion_9_ap_and_nms():
    worst = 0.0
    for seed in range(200):
        scored, gts = random_ap_instance(np.random.default_rng(seed), max_dets=20)
        dets = [Detection(i, 1, s, Box.from_list(b), "S") for s, i, b in scored]
        g = {k: (np.array(v, float).reshape(-1, 4), np.ones(len(v), int)) for k, v in gts.items()}
        worst = max(worst, abs(average_precision(dets, g, 1, 0.5) - ap_oracle(scored, gts, 0.5)))
    nms_bad = []
    for seed in range(200):
        boxes, scores = random_nms_instance(np.random.default_rng(10_000 + seed))
        if not is_greedy_nms(boxes.tolist(), scores.tolist(), nms(boxes, scores, 0.3).tolist(), 0.3):
            nms_bad.append(seed)
    ok = worst <= 1e-9 and not nms_bad
    verdict(9, ok, f"worst AP difference {worst:.1e} over 200 instances, NMS failures {nms_bad}")
    assert ok


def test_criterion_10_cli_reproducible(tmp_path):
    outs = run_cli_suite(tmp_path / "ref", main)
    differing = []
    for step, out in outs.items():
        runs = {}
        for threads in (1, 8):
            dest = tmp_path / "rerun" / f"{step}-{threads}"
            assert rerun_from_manifest(out, dest, threads, main) == 0
            runs[threads] = dir_bytes(dest)
        if runs[1] != runs[8] or runs[1] != dir_bytes(out):
            differing.append(step)
    ok = not differing
    verdict(10, ok, f"{len(outs)} commands rerun with 1 and 8 threads, differing={differing}")
    assert ok
