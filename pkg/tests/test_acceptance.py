"""Acceptance criteria; each test records one PASS/FAIL line."""
import math
import os
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellularity.annotations import disk_union
from cellularity.cli import main
from cellularity.features import (AREA_THRESHOLDS, BLOB_THRESHOLDS, N_FEATURES, extract_features,
                                  feature_schema, log_blobs, threshold_stats, total_activation)
from cellularity.gbt import GbtParams, feature_importance, fit, load_model, save_model
from cellularity.losses import LossConfig, class_loss, total_loss, total_loss_grad
from cellularity.metrics import ScorePairSet, cohens_kappa, icc, icc21, kappa4, mse
from cellularity.pmap import CANONICAL_CHANNELS, NUCLEUS_CHANNELS, PixelMap, load_pmap, save_pmap
from cellularity.synth import SynthParams, generate
from conftest import record_criterion
from oracles import (central_difference, icc21_anova, kappa_from_confusion, reference_fit, route,
                     threshold_scan, total_scan)


def test_criterion_1_gradient_matches_finite_differences():
    start = time.perf_counter()
    r = np.random.default_rng(1)
    y = (r.random((4, 16, 16)) < 0.5).astype(float)
    p = r.uniform(0.01, 0.99, (4, 16, 16))
    cfg = LossConfig()
    t = dict(zip(CANONICAL_CHANNELS, y))
    grad = total_loss_grad(t, dict(zip(CANONICAL_CHANNELS, p)), cfg)

    def f(x):
        return total_loss(t, dict(zip(CANONICAL_CHANNELS, x)), cfg)

    flat = r.choice(p.size, size=1000, replace=False)
    worst = 0.0
    for k in flat:
        idx = np.unravel_index(k, p.shape)
        fd = central_difference(f, p, idx, 1e-5)
        g = grad[CANONICAL_CHANNELS[idx[0]]][idx[1:]]
        worst = max(worst, abs(fd - g) / max(abs(g), abs(fd), 1e-12))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 5.0
    record_criterion("1 gradient vs finite differences", ok, f"max_rel_error={worst:.3g} time={elapsed:.2f}s")
    assert ok


def test_criterion_2_loss_identities():
    ones = np.ones((16, 16))
    at_target = class_loss(ones, ones, LossConfig(alpha=0.15))
    r = np.random.default_rng(2)
    worst_scale = 0.0
    for _ in range(20):
        y = dict(zip(CANONICAL_CHANNELS, (r.random((4, 16, 16)) < 0.5).astype(float)))
        p = dict(zip(CANONICAL_CHANNELS, r.uniform(0.01, 0.99, (4, 16, 16))))
        base = total_loss(y, p, LossConfig())
        for factor in (1e-3, 0.5, 3.0, 1e3):
            worst_scale = max(worst_scale, abs(total_loss(y, p, LossConfig().scaled(factor)) - base))
    ok = abs(at_target + 0.15) <= 1e-6 and worst_scale <= 1e-12
    record_criterion("2 loss identities", ok, f"class_loss(y,y)={at_target!r} scale_drift={worst_scale:.3g}")
    assert ok


@settings(max_examples=25, deadline=None)
@given(st.integers(64, 96), st.integers(64, 96), st.integers(0, 2 ** 31))
def check_feature_width(h, w, seed):
    r = np.random.default_rng(seed)
    planes = {c: r.random((h, w)) ** r.uniform(0.5, 8) for c in NUCLEUS_CHANNELS}
    f = extract_features(PixelMap.from_dict(planes))
    assert f.shape == (81,) and np.isfinite(f).all()


def test_criterion_3_feature_schema():
    structural = len(NUCLEUS_CHANNELS) * (len(AREA_THRESHOLDS) * 2 + len(BLOB_THRESHOLDS) * 2 + 1)
    schema = feature_schema()
    per_channel = [[c["family"] for c in schema if c["channel"] == ch] for ch in NUCLEUS_CHANNELS]
    expected_block = (["area", "activation"] * 7 + ["blob_count", "blob_activation"] * 6
                      + ["total_activation"])
    ok = structural == N_FEATURES == len(schema) == 81 and all(b == expected_block for b in per_channel)
    ok = ok and [c["channel"] for c in schema] == [ch for ch in NUCLEUS_CHANNELS for _ in range(27)]
    check_feature_width()
    record_criterion("3 feature schema", ok, f"3x(7x2+6x2+1)={structural}")
    assert ok


def planted(centers, size=128):
    return disk_union(centers, size, size, 15).astype(np.float32)


PLANTED = {0: [], 1: [(64, 64)], 2: [(30, 64), (98, 64)],
           5: [(20, 20), (64, 20), (108, 20), (40, 100), (100, 100)]}


def test_criterion_4_feature_oracles():
    r = np.random.default_rng(4)
    mismatches = 0
    for _ in range(100):
        plane = (r.random((64, 64)) ** r.uniform(0.5, 6)).astype(np.float32)
        for t in sorted(set(AREA_THRESHOLDS + BLOB_THRESHOLDS)):
            mismatches += threshold_stats(plane, t) != threshold_scan(plane, t)
        mismatches += total_activation(plane) != total_scan(plane)
    blob_ok = True
    for k, centers in PLANTED.items():
        for t in BLOB_THRESHOLDS:
            blobs = log_blobs(planted(centers), t)
            if len(blobs) != k:
                blob_ok = False
                continue
            for cx, cy in centers:
                if min(math.hypot(b.cx - cx, b.cy - cy) for b in blobs) > 1.0:
                    blob_ok = False
    ok = mismatches == 0 and blob_ok
    record_criterion("4 feature oracles", ok, f"scan_mismatches={mismatches} planted_blobs_ok={blob_ok}")
    assert ok


def canonical(tree, node=0):
    if tree.feature[node] < 0:
        return {"value": tree.value[node]}
    return {"feature": tree.feature[node], "threshold": tree.threshold[node], "gain": tree.gain[node],
            "left": canonical(tree, tree.left[node]), "right": canonical(tree, tree.right[node])}


def strip(ref):
    if "feature" not in ref:
        return {"value": ref["value"]}
    return {k: (strip(v) if k in ("left", "right") else v) for k, v in ref.items() if k != "value"}


def test_criterion_5_gbt_matches_reference():
    failures = []
    mse_monotone = True
    for seed in range(20):
        r = np.random.default_rng(500 + seed)
        n, width = int(r.integers(8, 65)), int(r.integers(1, 5))
        rounds, depth = int(r.integers(1, 4)), int(r.integers(1, 3))
        leaves, min_leaf = int(r.integers(2, 5)), int(r.integers(1, 4))
        lr = float(r.choice([0.01, 0.1, 0.5, 1.0]))
        # coarse grids produce ties between thresholds and features
        X = np.round(r.random((n, width)) * r.integers(2, 12)) / 4
        y = np.clip(r.random(n) * 0.5 + 0.3 * (X[:, 0] > X[:, 0].mean()), 0, 1)
        params = GbtParams(n_rounds=rounds, learning_rate=lr, max_depth=depth, max_leaves=leaves,
                           min_samples_leaf=min_leaf)
        if n < 2 * min_leaf:
            continue
        model = fit(X, y, params)
        base, ref_trees, _ = reference_fit(X, y, rounds, lr, depth, leaves, min_leaf)
        same_trees = model.base_score == base and all(
            canonical(t) == strip(rt) for t, rt in zip(model.trees, ref_trees))
        ref_pred = []
        for x in X.tolist():
            s = base
            for rt in ref_trees:
                s += lr * route(rt, x)
            ref_pred.append(min(max(s, 0.0), 1.0))
        if not (same_trees and model.predict(X).tolist() == ref_pred):
            failures.append(seed)
        h = model.train_mse
        mse_monotone &= all(b <= a for a, b in zip(h, h[1:]))
    ok = not failures and mse_monotone
    record_criterion("5 GBT vs exhaustive reference", ok, f"failing_seeds={failures} mse_monotone={mse_monotone}")
    assert ok


def test_criterion_6_metric_oracles():
    cm = [[20, 5], [10, 15]]
    a = [i for i, row in enumerate(cm) for j, c in enumerate(row) for _ in range(c)]
    b = [j for i, row in enumerate(cm) for j, c in enumerate(row) for _ in range(c)]
    kappa_err = abs(cohens_kappa(a, b) - kappa_from_confusion(cm))
    fixtures = [[[9, 2, 5, 8], [6, 1, 3, 2], [8, 4, 6, 8], [7, 1, 2, 6], [10, 5, 6, 9], [6, 2, 4, 7]],
                np.random.default_rng(6).random((30, 2)).tolist(),
                [[0.1, 0.2], [0.4, 0.35], [0.8, 0.9], [0.5, 0.5]]]
    icc_err = max(abs(icc21(m) - icc21_anova(m)) for m in fixtures)
    s = ScorePairSet([0.05, 0.3, 0.55, 0.8, 0.95], [0.05, 0.3, 0.55, 0.8, 0.95])
    identity = (mse(s), kappa4(s), icc(s))
    ok = kappa_err <= 1e-10 and icc_err <= 1e-10 and identity == (0.0, 1.0, 1.0)
    record_criterion("6 metric oracles", ok, f"kappa_err={kappa_err:.3g} icc_err={icc_err:.3g} identity={identity}")
    assert ok


@pytest.mark.slow
def test_criterion_7_end_to_end_synthetic():
    start = time.perf_counter()
    params = SynthParams(seed=7, label_noise_sigma=0.02)
    patches = generate(params, 500, threads=4)
    X = np.array([extract_features(p.maps) for p in patches])
    y = np.array([p.true_cellularity for p in patches])
    model = fit(X[:400], y[:400], GbtParams(n_rounds=300))
    s = ScorePairSet(model.predict(X[400:]), y[400:])
    test_mse, k, c = mse(s), kappa4(s), icc(s)
    elapsed = time.perf_counter() - start
    top5 = [feature_schema()[i]["channel"] for i, _ in feature_importance(model)[:5]]
    h = model.train_mse
    ok = (test_mse <= 3 * 0.02 ** 2 and k >= 0.7 and c >= 0.9 and elapsed < 120
          and all(ch == "Malignant" for ch in top5) and all(b <= a for a, b in zip(h, h[1:])))
    record_criterion("7 end-to-end synthetic", ok,
                     f"mse={test_mse:.6f} kappa={k:.3f} icc={c:.3f} time={elapsed:.1f}s top5={set(top5)}")
    assert ok


def run_pipeline(workdir, threads, monkeypatch, capsys):
    """Every subcommand with relative paths; returns {relative path: bytes} plus stdout."""
    os.makedirs(workdir)
    monkeypatch.chdir(workdir)
    common = ["--seed", "3", "--threads", str(threads), "--quiet"]
    steps = [
        ["gen-synth", "--n", "12", "--width", "64", "--height", "64", "--n-malignant", "0", "8",
         "--out-dir", "data"],
        ["synth-masks", "data/annotations.csv", "--width", "64", "--height", "64", "--out-dir", "masks"],
        ["extract", "--maps-dir", "data/maps", "--targets", "data/targets.csv", "--out", "features.csv"],
        ["train", "--features", "features.csv", "--rounds", "20", "--lr", "0.1", "--out", "model.json"],
        ["predict", "--model", "model.json", "--features", "features.csv", "--out", "pred.csv"],
        ["evaluate", "--predictions", "pred.csv", "--targets", "data/targets.csv", "--n-boot", "200",
         "--out", "report.json"],
        ["loss-check", "--trials", "100"],
    ]
    outputs = {}
    for step in steps:
        assert main(step + common) == 0, step
        outputs[f"stdout:{step[0]}"] = capsys.readouterr().out.encode()
    for root, _, files in os.walk("."):
        for name in files:
            path = os.path.join(root, name)
            with open(path, "rb") as fh:
                outputs[path] = fh.read()
    return outputs


def test_criterion_8_determinism_and_portability(tmp_path, monkeypatch, capsys):
    runs = [run_pipeline(tmp_path / name, threads, monkeypatch, capsys)
            for name, threads in (("a", 1), ("b", 1), ("c", 4))]
    identical = runs[0] == runs[1] == runs[2]
    monkeypatch.chdir(tmp_path)
    m = load_pmap(tmp_path / "a" / "data" / "maps" / "synth_00000.pmap")
    save_pmap(m, "copy.pmap")
    pmap_ok = (tmp_path / "copy.pmap").read_bytes() == (tmp_path / "a" / "data" / "maps" / "synth_00000.pmap").read_bytes()
    save_model(load_model("a/model.json"), "copy.json")
    model_ok = (tmp_path / "copy.json").read_bytes() == (tmp_path / "a" / "model.json").read_bytes()
    ok = identical and pmap_ok and model_ok
    record_criterion("8 determinism and portability", ok,
                     f"files_compared={len(runs[0])} identical={identical} pmap_rt={pmap_ok} model_rt={model_ok}")
    assert ok


def test_criterion_9_extract_throughput():
    r = np.random.default_rng(9)
    centers = [(int(x), int(y)) for x, y in r.integers(0, 512, (250, 2))]
    mal = np.clip(disk_union(centers, 512, 512, 15) + r.normal(0, 0.05, (512, 512)), 0, 1)
    planes = {"Normal": np.clip(r.normal(0.05, 0.05, (512, 512)), 0, 1),
              "Lymphocyte": np.clip(r.normal(0.05, 0.05, (512, 512)), 0, 1), "Malignant": mal}
    pmap = PixelMap.from_dict(planes)
    extract_features(pmap)
    timings = []
    for _ in range(5):
        t0 = time.perf_counter()
        extract_features(pmap)
        timings.append(time.perf_counter() - t0)
    best = min(timings)
    ok = best < 0.050
    record_criterion("9 extract throughput 512x512", ok, f"best_of_5={best * 1e3:.1f}ms")
    assert ok
