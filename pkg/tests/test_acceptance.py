"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s`. The end-to-end desk run
(criteria 7, 8, 10, 11) executes once per session at a pinned global seed.
"""

import csv
import math
import time
from collections import Counter

import numpy as np
import pytest
import torch
from numpy.random import default_rng

from tumorlab.boxes import BBox
from tumorlab.model import ALL_TASKS, CLASSIFICATION_TASKS, ModelConfig, build_network, roipool
from tumorlab.pipeline import ExperimentConfig, reseeded, run_ablations, run_pipeline
from tumorlab.retrieval import (
    DistortionParams,
    EmbeddingTable,
    RetrievalIndex,
    knn_classify,
    knn_regress,
    label_index,
    query,
    sample_box_distortion,
    task_label_key,
)
from tumorlab.training import MISSING, TrainConfig, lr_at, multitask_loss, paper_train_config
from tumorlab.viz import ProjectionConfig, count_clusters_single_linkage, project_2d
from conftest import random_embedding_table

DESK_SEED = 2
# Single-linkage cut for the schwannoma two-cluster check, pinned from the
# reference desk run at DESK_SEED: within-hemisphere merges top out near 2.0
# while the inter-hemisphere merge sits beyond 4.3.
SCHWANNOMA_CLUSTER_CUT = 3.0


def report(line: str) -> None:
    print(f"\n[acceptance] {line}")


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_run")
    config = reseeded(ExperimentConfig(), DESK_SEED)
    t0 = time.time()
    summary = run_pipeline(config, out)
    elapsed = time.time() - t0
    return {"out": out, "summary": summary, "elapsed_s": elapsed, "config": config}


def test_criterion_1_gradient_correctness():
    t0 = time.time()
    model_cfg = ModelConfig(channels=4, n_resblocks=1, n_regions=11, seed=0)
    train_cfg = TrainConfig(lambda_seg=1.0, lambda_cls=1e-3)
    net = build_network(model_cfg).double().train()
    rng = default_rng(0)
    patch = torch.from_numpy(rng.standard_normal((1, 1, 8, 8, 8)))
    seg_target = torch.from_numpy((rng.random((1, 1, 8, 8, 8)) > 0.8).astype(np.float64))
    boxes = [[BBox((1, 1, 1), (5, 5, 5)), BBox((2, 3, 0), (7, 8, 6))]]
    targets = [{
        "type": torch.tensor([0, 2]),
        "region": torch.tensor([3, 7]),
        "left_right": torch.tensor([0, 1]),
        "front_rear": torch.tensor([1, 0]),
        "upper_lower": torch.tensor([1, 1]),
    }]

    def loss_value():
        out = net(patch, boxes)
        return multitask_loss(out.seg_logits, seg_target, out.task_logits, targets, train_cfg, model_cfg).total

    params = [p for p in net.parameters() if p.requires_grad]
    analytic = torch.autograd.grad(loss_value(), params)

    h = 1e-5
    max_rel = 0.0
    n_params = 0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat, gflat = p.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                f_plus = float(loss_value())
                flat[i] = orig - h
                f_minus = float(loss_value())
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2 * h)
                rel = abs(numeric - float(gflat[i])) / max(abs(numeric), abs(float(gflat[i])), 1e-6)
                max_rel = max(max_rel, rel)
                n_params += 1
    elapsed = time.time() - t0
    assert max_rel <= 1e-3, f"max relative gradient error {max_rel}"
    assert elapsed <= 120, f"gradient check took {elapsed:.0f}s"
    report(f"criterion 1 PASS: max rel gradient error {max_rel:.2e} over {n_params} parameters in {elapsed:.0f}s")


def test_criterion_2_roipool_oracle():
    rng = default_rng(1)
    for case in range(100):
        c = int(rng.integers(1, 8))
        shape = tuple(int(s) for s in rng.integers(4, 12, size=3))
        fm = rng.standard_normal((c,) + shape).astype(np.float32)
        start = tuple(int(rng.integers(0, s)) for s in shape)
        stop = tuple(int(rng.integers(a + 1, s + 1)) for a, s in zip(start, shape))
        bbox = BBox(start, stop)
        emb = roipool(torch.from_numpy(fm), bbox).numpy()
        expected = np.full(c, -np.inf, dtype=np.float64)
        for ch in range(c):
            for i in range(start[0], stop[0]):
                for j in range(start[1], stop[1]):
                    for k in range(start[2], stop[2]):
                        expected[ch] = max(expected[ch], fm[ch, i, j, k])
        assert np.array_equal(emb.astype(np.float64), expected), f"case {case}"

    for case in range(100):
        fm = torch.from_numpy(rng.standard_normal((3, 10, 10, 10)).astype(np.float32))
        start = tuple(int(rng.integers(0, 8)) for _ in range(3))
        stop = tuple(int(rng.integers(a + 1, 11)) for a in start)
        inner = BBox(start, stop)
        outer = BBox(
            tuple(int(rng.integers(0, a + 1)) for a in start),
            tuple(int(rng.integers(b, 11)) for b in stop),
        )
        assert torch.all(roipool(fm, outer) >= roipool(fm, inner)), f"case {case}"
    report("criterion 2 PASS: 100 roipool cases match exhaustive scan exactly; 100 monotonicity cases hold")


def test_criterion_3_loss_omission():
    model_cfg = ModelConfig(channels=4, n_resblocks=1, n_regions=6)
    rng = default_rng(2)

    def ce(logits, target):
        m = logits.max()
        return -(logits[target] - m - math.log(np.exp(logits - m).sum()))

    for trial in range(20):
        batch = int(rng.integers(1, 3))
        cfg = TrainConfig(lambda_seg=1.0, lambda_cls=float(rng.uniform(0.1, 2.0)))
        seg_logits = torch.from_numpy(rng.standard_normal((batch, 1, 4, 4, 4)))
        seg_targets = torch.from_numpy((rng.random((batch, 1, 4, 4, 4)) > 0.5).astype(np.float64))
        logits, targets, targets_garbled = [], [], []
        for _ in range(batch):
            n_t = int(rng.integers(1, 4))
            li, ti, tg = {}, {}, {}
            for task in CLASSIFICATION_TASKS:
                k = {"type": 3, "region": 6}.get(task, 2)
                li[task] = torch.from_numpy(rng.standard_normal((n_t, k)))
                presence = rng.random(n_t) > 0.4
                values = rng.integers(0, k, size=n_t)
                ti[task] = torch.tensor([int(v) if p else MISSING for v, p in zip(values, presence)])
                tg[task] = ti[task].clone()
            logits.append(li)
            targets.append(ti)
            targets_garbled.append(tg)
        out = multitask_loss(seg_logits, seg_targets, logits, targets, cfg, model_cfg)

        # (a) absent labels contribute exactly zero: term-by-term recomposition
        expected = float(out.segmentation) * cfg.lambda_seg
        for task in CLASSIFICATION_TASKS:
            term = 0.0
            for li, ti in zip(logits, targets):
                for t in range(ti[task].shape[0]):
                    if int(ti[task][t]) != MISSING:
                        term += ce(li[task][t].numpy(), int(ti[task][t]))
            expected += cfg.lambda_cls * term / batch
        assert abs(float(out.total) - expected) <= 1e-9 * max(1.0, abs(expected)), f"trial {trial}"

    # (b) omitting all labels of one task == removing its term, for totals and gradients
    net = build_network(ModelConfig(channels=4, n_resblocks=1, n_regions=6, seed=5)).double().train()
    patch = torch.from_numpy(rng.standard_normal((1, 1, 8, 8, 8)))
    seg_t = torch.from_numpy((rng.random((1, 1, 8, 8, 8)) > 0.7).astype(np.float64))
    boxes = [[BBox((0, 0, 0), (4, 4, 4)), BBox((2, 2, 2), (8, 8, 8))]]
    base_targets = {
        "type": torch.tensor([1, 2]), "region": torch.tensor([0, 5]),
        "left_right": torch.tensor([1, 0]), "front_rear": torch.tensor([0, 0]),
        "upper_lower": torch.tensor([1, 1]),
    }
    for dropped in CLASSIFICATION_TASKS:
        def run(enabled, missing_task=None):
            out = net(patch, boxes)
            t = {k: (torch.full_like(v, MISSING) if k == missing_task else v) for k, v in base_targets.items()}
            cfg = TrainConfig(lambda_cls=0.7, enabled_tasks=enabled)
            loss = multitask_loss(out.seg_logits, seg_t, out.task_logits, [t], cfg, net.config)
            grads = torch.autograd.grad(loss.total, [p for p in net.parameters()], allow_unused=True)
            return float(loss.total.detach()), grads

        total_a, grads_a = run(ALL_TASKS, missing_task=dropped)
        total_b, grads_b = run(tuple(t for t in ALL_TASKS if t != dropped))
        assert abs(total_a - total_b) <= 1e-9
        for ga, gb in zip(grads_a, grads_b):
            ga = torch.zeros(()) if ga is None else ga
            gb = torch.zeros(()) if gb is None else gb
            assert float((ga - gb).abs().max()) <= 1e-9
    report("criterion 3 PASS: omission equals zeroed terms, totals and gradients within 1e-9")


def test_criterion_4_lr_schedule():
    cfg = paper_train_config()
    values = (lr_at(0, cfg), lr_at(90, cfg), lr_at(105, cfg))
    assert values == (0.1, 0.1 / 10, 0.1 / 100)
    report(f"criterion 4 PASS: lr at epochs 0/90/105 = {values}")


def test_criterion_5_distortion_sampler_moments():
    rng = default_rng(0)
    params = DistortionParams()
    log_scales = np.empty((100_000, 3))
    shifts = np.empty((100_000, 3))
    for i in range(100_000):
        s, t = sample_box_distortion(rng, params)
        log_scales[i] = np.log2(s)
        shifts[i] = t
    scale_std = float(log_scales.std())
    shift_std = float(shifts.std())
    assert abs(scale_std - 1 / 3) <= 0.01 * (1 / 3), scale_std
    assert abs(shift_std - 0.1) <= 0.01 * 0.1, shift_std
    report(f"criterion 5 PASS: 1e5 draws, std(log2 scale) = {scale_std:.5f} (target 1/3), "
           f"std(shift/side) = {shift_std:.5f} (target 0.1)")


def test_criterion_6_knn_parity_with_bruteforce():
    rng = default_rng(3)
    checked = 0
    for instance in range(1000):
        n = int(rng.integers(5, 60))
        c = int(rng.integers(2, 10))
        table = random_embedding_table(rng, n, c, n_images=max(2, n // 2))
        if rng.random() < 0.3:
            for row in table.rows:
                if rng.random() < 0.3:
                    row.labels["region_label"] = None
        index = RetrievalIndex(table)
        emb = rng.standard_normal(c).astype(np.float32)
        k = int(rng.integers(1, 9))
        exclude = table.rows[int(rng.integers(n))].image_id if rng.random() < 0.5 else None

        scored = []
        for row in table.rows:
            if exclude is not None and row.image_id == exclude:
                continue
            d = float(np.sqrt(np.sum((row.embedding.astype(np.float64) - emb.astype(np.float64)) ** 2)))
            scored.append((d, row.tumor_id, row))
        scored.sort(key=lambda t: (t[0], t[1]))
        if not scored:
            with pytest.raises(ValueError):
                query(index, emb, k, exclude)
            continue

        res = query(index, emb, k, exclude)
        top = scored[: min(k, len(scored))]
        assert [nb.tumor_id for nb in res.neighbors] == [t[1] for t in top]
        assert [nb.distance for nb in res.neighbors] == [t[0] for t in top]
        assert all(exclude is None or nb.row.image_id != exclude for nb in res.neighbors)

        labeled = [t for t in scored if t[2].labels.get(task_label_key("region")) is not None]
        if labeled:
            got = knn_classify(index, emb, k, "region", exclude)
            top_l = labeled[: min(k, len(labeled))]
            votes = Counter(t[2].labels["region_label"] for t in top_l)
            best = max(votes.values())
            tied = [lab for lab, v in votes.items() if v == best]
            sums = {lab: sum(t[0] for t in top_l if t[2].labels["region_label"] == lab) for lab in tied}
            winner = min(tied, key=lambda lab: (sums[lab], label_index("region", lab)))
            assert got.label == winner
            assert got.neighbor_ids == [t[1] for t in top_l]

        reg = knn_regress(index, emb, k, exclude)
        expected = float(np.mean([t[2].labels["linear_size_mm"] for t in top]))
        assert reg.value == expected
        checked += 1
    report(f"criterion 6 PASS: {checked} random instances match brute-force full-sort oracles exactly")


def test_criterion_7_desk_run_metrics(desk_run):
    knn = desk_run["summary"]["metrics"]["knn"]
    acc_type = knn["accuracy"]["type"]
    acc_lr = knn["accuracy"]["left_right"]
    ratio = knn["rmse_mm"] / knn["rmse_baseline_train_mean_mm"]
    elapsed = desk_run["elapsed_s"]
    assert elapsed <= 1800, f"desk run took {elapsed:.0f}s"
    assert acc_type >= 0.85, f"type accuracy {acc_type}"
    assert acc_lr >= 0.90, f"left/right accuracy {acc_lr}"
    assert ratio <= 0.5, f"size RMSE ratio {ratio}"
    report(
        f"criterion 7 PASS: desk run in {elapsed:.0f}s; type {acc_type:.3f} (>=0.85), "
        f"left/right {acc_lr:.3f} (>=0.90), RMSE {knn['rmse_mm']:.2f}mm = "
        f"{ratio:.2f}x train-mean baseline (<=0.5)"
    )


def test_criterion_8_distortion_robustness(desk_run):
    from tumorlab.io import read_json

    rep = read_json(desk_run["out"] / "reports" / "distortion.json")
    assert set(rep["accuracy_delta"]) == set(CLASSIFICATION_TASKS)
    drop = rep["clean"]["accuracy"]["type"] - rep["distorted"]["accuracy"]["type"]
    assert drop <= 0.20, f"type accuracy drop {drop}"
    report(
        f"criterion 8 PASS: distorted-box type accuracy {rep['distorted']['accuracy']['type']:.3f} vs "
        f"clean {rep['clean']['accuracy']['type']:.3f} (drop {drop:+.3f} <= 0.20); per-task deltas emitted"
    )


@pytest.fixture(scope="session")
def ablation_run(desk_run, tmp_path_factory):
    out = tmp_path_factory.mktemp("ablations")
    subsets = [tuple(ALL_TASKS), ("type",), ("segmentation",)]
    return run_ablations(desk_run["config"], subsets, out_root=out), out


def test_criterion_9_ablation_harness(ablation_run):
    report_dict, out = ablation_run
    rows = {r["name"]: r for r in report_dict["rows"]}
    assert len(report_dict["rows"]) == 3
    assert (out / "ablations" / "comparison.json").exists()
    assert (out / "ablations" / "comparison.csv").exists()
    all_tasks_acc = rows["-".join(ALL_TASKS)]["accuracy"]["type"]
    seg_only_acc = rows["segmentation"]["accuracy"]["type"]
    assert all_tasks_acc >= seg_only_acc, f"all-tasks {all_tasks_acc} vs segmentation-only {seg_only_acc}"
    report(
        f"criterion 9 PASS: 3 ablation rows; type accuracy all-tasks {all_tasks_acc:.3f} >= "
        f"segmentation-only {seg_only_acc:.3f}; type-only row {rows['type']['accuracy']['type']:.3f}"
    )


def test_criterion_10_tsne_schwannoma_clusters(desk_run):
    csv_path = desk_run["out"] / "viz" / "tsne.csv"
    with open(csv_path) as f:
        rows = list(csv.DictReader(f))
    points = np.array([[float(r["x"]), float(r["y"])] for r in rows if r["type_label"] == "schwannoma"])
    assert len(points) >= 4
    n_clusters = count_clusters_single_linkage(points, SCHWANNOMA_CLUSTER_CUT)
    assert n_clusters >= 2, f"{n_clusters} clusters at cut {SCHWANNOMA_CLUSTER_CUT}"

    table = EmbeddingTable.load(desk_run["out"] / "tables" / "test.tbl")
    cfg = ProjectionConfig(perplexity=10, seed=4)
    a = project_2d(table, cfg)
    b = project_2d(table, cfg)
    assert np.array_equal(a, b)
    report(
        f"criterion 10 PASS: scatter CSV emitted ({len(rows)} rows); schwannoma rows form "
        f"{n_clusters} single-linkage clusters at cut {SCHWANNOMA_CLUSTER_CUT}; projection deterministic"
    )


def test_criterion_11_serving_parity(desk_run):
    from fastapi.testclient import TestClient

    from tumorlab.server import build_app

    train_table = EmbeddingTable.load(desk_run["out"] / "tables" / "train.tbl")
    test_table = EmbeddingTable.load(desk_run["out"] / "tables" / "test.tbl")
    table = EmbeddingTable(train_table.fingerprint, train_table.channels, train_table.rows + test_table.rows)
    client = TestClient(build_app(table))
    index = RetrievalIndex(table)
    rows_by_id = {r.tumor_id: r for r in table.rows}

    rng = default_rng(11)
    ids = [table.rows[int(i)].tumor_id for i in rng.integers(0, len(table.rows), size=50)]
    for tumor_id in ids:
        row = rows_by_id[tumor_id]
        k = int(rng.integers(1, 9))
        http = client.get("/neighbors", params={"tumor_id": tumor_id, "k": str(k)})
        assert http.status_code == 200
        body = http.json()
        offline = query(index, row.embedding, k, exclude_image_id=row.image_id)
        assert body["query"] == tumor_id and body["k"] == k
        assert body["truncated"] == offline.truncated
        assert [n["tumor_id"] for n in body["neighbors"]] == [n.tumor_id for n in offline.neighbors]
        assert [n["distance"] for n in body["neighbors"]] == [n.distance for n in offline.neighbors]
        for got, want in zip(body["neighbors"], offline.neighbors):
            assert got["labels"] == want.row.labels

    assert client.get("/neighbors", params={"tumor_id": "missing", "k": "5"}).status_code == 404
    assert client.get("/neighbors", params={"tumor_id": ids[0], "k": "abc"}).status_code == 400
    assert client.get("/healthz").json()["fingerprint"] == table.fingerprint
    report("criterion 11 PASS: 50 endpoint responses equal offline query(); 404 and 400 paths covered")
