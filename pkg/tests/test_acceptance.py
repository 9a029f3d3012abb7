"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The experiment-scale tests (ablation, forgetting, bandwidth) train real models
and take several minutes each.
"""
import math
import time

import numpy as np
import pytest

from ar2vp import experiment as ex
from ar2vp import pipeline as pl
from ar2vp import training as tr
from ar2vp.config import preset
from ar2vp.dpr import build_graph
from ar2vp.evaluation import average_precision, forget, miou
from ar2vp.losses import LossConfig
from ar2vp.model import ModelDims, ModelParams, checkpoint_bytes, load_checkpoint, save_checkpoint
from ar2vp.r2vpc import CompensationConfig, compensate, similarity_ratio
from ar2vp.replay import ReplayBuffer, refresh
from ar2vp.scene import NUM_LABELS

from pipeline_oracle import oracle_forward

SEEDS = [1, 2, 3, 4, 5]


def report(number, name, ok, detail):
    print(f"\nACCEPTANCE {number} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    return ok


def _params(c_f=6, c_d=4, n=1, seed=0):
    p = ModelParams.initialize(ModelDims(12, c_f, c_d, NUM_LABELS, n), seed)
    rng = np.random.default_rng(seed + 1)
    for k, v in p.items():
        if k.endswith("_b"):
            p[k] = rng.normal(0, 0.2, v.shape)
    return p


def test_1_oracle_equivalence(tiny_frames):
    start = time.perf_counter()
    failures = []
    # full cooperative pass against the straight-line oracle, gate shut and open
    for lam in (0.5, 1.0):
        frame, params = tiny_frames[0], _params()
        out = pl.forward([frame], params, pl.PipelineFlags(threshold=lam))
        ref = oracle_forward(frame.grids.tolist(), [(tuple(p.position), p.rotation.tolist()) for p in frame.poses],
                             frame.cell_size, {k: v.tolist() for k, v in params.items()}, lam)
        worst = 0.0
        for i, (seg, det, _, _) in enumerate(ref):
            for (r, c), v in seg.items():
                worst = max(worst, np.abs(out.seg[0, i, r, c] - v).max(), np.abs(out.det[0, i, r, c] - det[r, c]).max())
        if worst > 1e-10:
            failures.append(f"pipeline lam={lam} err {worst:.2e}")
    # hand-evaluated graph weights
    g = build_graph([np.ones((1, 1, 1))] * 2, [1.0, 3.0])
    if not np.allclose(g.column(0), [0.25, 0.75], atol=1e-15):
        failures.append("graph weights")
    # textbook Pearson
    if abs(similarity_ratio([1, 2, 3, 4], [2, 4, 5, 4]) - 3.5 / math.sqrt(5 * 4.75)) > 1e-12:
        failures.append("pearson")
    # compensation coefficient 0.5
    rng = np.random.default_rng(0)
    v, r0 = rng.normal(size=(2, 2, 2)), rng.normal(size=(2, 2, 2))
    if np.abs(compensate(v, r0, 0.3, CompensationConfig(0.8)) - (v + 0.5 * r0)).max() > 1e-15:
        failures.append("compensate")
    # metric hand cases
    gt = np.zeros((4, 4), int)
    gt[:, 2:] = 1
    pred = np.zeros((4, 4), int)
    pred[2:, :] = 1
    if not math.isclose(miou(pred, gt, 2)[0], 1 / 3):
        failures.append("miou")
    preds = [(0.9, (0, 0, 2, 2)), (0.8, (10, 10, 12, 12)), (0.7, (5, 5, 7, 7))]
    if not math.isclose(average_precision(preds, [(0, 0, 2, 2), (5, 5, 7, 7)]), 0.5 + 0.5 * 2 / 3):
        failures.append("AP")
    if not math.isclose(forget([[0.9], [0.95, 0.8], [0.6, 0.7, 0.9]]), 0.225):
        failures.append("forget")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60
    report(1, "oracle equivalence", ok, f"{'; '.join(failures) or 'all oracles match'}, {elapsed:.1f}s")
    assert ok


def _fd_all(params, frames, flags, h=1e-5):
    lc = LossConfig()
    _, grads, out = tr.loss_and_grads(params, frames, flags, lc)
    worst, count = 0.0, 0
    for k, v in params.items():
        for idx in np.ndindex(v.shape):
            q = params.copy()
            q[k] = v.copy()
            q[k][idx] = v[idx] + h
            lp = tr.loss_and_grads(q, frames, flags, lc, frozen=out.frozen)[0]
            q[k][idx] = v[idx] - h
            lm = tr.loss_and_grads(q, frames, flags, lc, frozen=out.frozen)[0]
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - grads[k][idx]) / max(abs(fd) + abs(grads[k][idx]), 1e-6))
            count += 1
    return worst, count


def test_2_gradient_suite(tiny_frames):
    start = time.perf_counter()
    # default widths; threshold 1 keeps the compensation branch active
    w1, n1 = _fd_all(_params(32, 16), tiny_frames, pl.PipelineFlags(threshold=1.0))
    # the channel autoencoder sits on the same path when compressing
    w2, n2 = _fd_all(_params(32, 16, n=4), tiny_frames, pl.PipelineFlags(threshold=1.0, compression_n=4))
    elapsed = time.perf_counter() - start
    worst = max(w1, w2)
    ok = worst < 1e-4 and elapsed < 120
    report(2, "gradient suite", ok, f"{n1 + n2} parameters, worst rel err {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_3_dpr_invariants():
    rng = np.random.default_rng(3)
    bad = []
    for trial in range(1000):
        n = int(rng.integers(1, 7))
        feats = [rng.normal(size=(2, 2, 3)) for _ in range(n)]
        d = rng.uniform(0, 30, n)
        mode = "include" if trial % 2 == 0 else "exclude"
        xi = build_graph(feats, d, self_mode=mode).edge_weights
        if np.abs(xi.sum(axis=0) - 1).max() > 1e-9 or xi.min() < 0:
            bad.append((trial, "stochastic"))
        s = rng.uniform(0.01, 100)
        if np.abs(build_graph([s * f for f in feats], d, self_mode=mode).edge_weights - xi).max() > 1e-9:
            bad.append((trial, "scale"))
        if n >= 2:
            same = [feats[0]] * n
            i, j = rng.choice(n, 2, replace=False)
            before = build_graph(same, d).edge_weights[j, i]
            d2 = d.copy()
            d2[j] += rng.uniform(0.1, 5)
            if not build_graph(same, d2).edge_weights[j, i] > before:
                bad.append((trial, "monotone"))
    ok = not bad
    report(3, "DPR invariants", ok, f"1000 graphs, {len(bad)} violations")
    assert ok


def test_4_ablation_direction():
    start = time.perf_counter()
    cfg = preset("ablation").replace(seeds=SEEDS)
    _, mean = ex.ablation_table(cfg, baselines=["no_fusion"])
    m = {k: v["mIoU"] * 100 for k, v in mean.items()}
    full, graph = m["rsu1_graph1_comp1"], m["rsu0_graph1_comp0"]
    graph_comp, comp, none = m["rsu0_graph1_comp1"], m["rsu0_graph0_comp1"], m["no_fusion"]
    elapsed = time.perf_counter() - start
    checks = {
        "full > graph": full > graph,
        "graph >= graph+comp": graph >= graph_comp,
        "graph+comp > comp": graph_comp > comp,
        "full - none >= 5": full - none >= 5.0,
        "runtime < 15 min": elapsed < 900,
    }
    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    report(4, "ablation direction", ok,
           f"mIoU full {full:.2f}, graph {graph:.2f}, graph+comp {graph_comp:.2f}, comp {comp:.2f}, "
           f"none {none:.2f}; failed: {failed or 'none'}; {elapsed:.0f}s")
    assert ok


def test_5_forgetting_reduction():
    start = time.perf_counter()
    cfg = preset("forgetting").replace(seeds=SEEDS)
    rows, _ = ex.forgetting_table(cfg)
    off = {r["seed"]: r for r in rows if not r["replay_on"]}
    on = {r["seed"]: r for r in rows if r["replay_on"]}
    wins = sum(on[s]["forget_mIoU"] < off[s]["forget_mIoU"] for s in SEEDS)
    f_off = np.mean([off[s]["forget_mIoU"] for s in SEEDS])
    f_on = np.mean([on[s]["forget_mIoU"] for s in SEEDS])
    final_off = np.mean([off[s]["final_mIoU"] for s in SEEDS])
    final_on = np.mean([on[s]["final_mIoU"] for s in SEEDS])
    reduction = (f_off - f_on) / f_off if f_off > 0 else float("nan")
    elapsed = time.perf_counter() - start
    ok = wins >= 4 and reduction >= 0.30 and final_on > final_off and elapsed < 1200
    report(5, "forgetting reduction", ok,
           f"replay wins {wins}/5, Forget {100 * f_off:.2f} -> {100 * f_on:.2f} ({100 * reduction:.0f}% lower), "
           f"final mIoU {100 * final_off:.2f} -> {100 * final_on:.2f}, {elapsed:.0f}s")
    assert ok


def test_6_bandwidth_tradeoff(tmp_path):
    cfg = preset("bandwidth").replace(seeds=SEEDS)
    rows = ex.run_sweep(cfg, tmp_path, "compression_n", [1, 32])
    full, small = rows
    ratio = full["feature_bytes"] / small["feature_bytes"]
    drop = 100 * (full["mIoU"] - small["mIoU"])
    curve = [int(r["feature_bytes"]) for r in ex.read_csv(tmp_path / "bandwidth_curve.csv")]
    monotone = all(a < b for a, b in zip(curve, curve[1:]))
    ok = full["feature_bytes"] == 32 * small["feature_bytes"] and drop <= 3.0 and monotone
    report(6, "bandwidth trade-off", ok,
           f"feature bytes ratio {ratio:g}, mIoU {100 * full['mIoU']:.2f} -> {100 * small['mIoU']:.2f} "
           f"(drop {drop:.2f}), curve x monotone {monotone}")
    assert ok


def test_7_metric_correctness():
    failures = []
    p = np.array([[0, 1], [2, 1]])
    if miou(p, p, 3)[0] != 1.0:
        failures.append("miou identity")
    if miou(np.zeros(4, int), np.ones(4, int), 2)[1][1] != 0.0:
        failures.append("miou disjoint")
    gt = [(0, 0, 1, 1), (3, 3, 4, 4)]
    if average_precision([(0.9, b) for b in gt], gt) != 1.0 or average_precision([], gt) != 0.0:
        failures.append("AP trivial")
    if forget([[0.5], [0.5, 0.5]]) != 0.0 or not math.isclose(forget([[0.8], [0.6, 0.7]]), 0.2):
        failures.append("forget")
    rng = np.random.default_rng(7)
    violations = 0
    for _ in range(200):
        gts = [tuple(np.r_[xy, xy + rng.uniform(0.5, 3, 2)]) for xy in rng.uniform(0, 10, (rng.integers(1, 6), 2))]
        preds = []
        for _ in range(rng.integers(0, 8)):
            g = np.array(gts[rng.integers(len(gts))]) + rng.normal(0, 0.4, 4)
            g[2:] = np.maximum(g[2:], g[:2] + 0.1)
            preds.append((float(rng.random()), tuple(g)))
        if average_precision(preds, gts, 0.7) > average_precision(preds, gts, 0.5) + 1e-12:
            violations += 1
    if violations:
        failures.append(f"AP70 > AP50 in {violations} sets")
    ok = not failures
    report(7, "metric correctness", ok, "; ".join(failures) or "examples pass, AP70 <= AP50 on 200 sets")
    assert ok


def test_8_determinism(tmp_path):
    cfg = preset("smoke")
    ex.run(cfg, tmp_path / "a")
    ex.run(cfg, tmp_path / "b")
    same_csv = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    params = load_checkpoint(tmp_path / "a" / "checkpoints" / "stage_0.ckpt")
    save_checkpoint(params, tmp_path / "copy.ckpt")
    same_ckpt = ((tmp_path / "copy.ckpt").read_bytes()
                 == (tmp_path / "a" / "checkpoints" / "stage_0.ckpt").read_bytes()
                 and load_checkpoint(tmp_path / "copy.ckpt").equals(params)
                 and checkpoint_bytes(params) == (tmp_path / "copy.ckpt").read_bytes())
    ok = same_csv and same_ckpt
    report(8, "determinism", ok, f"identical CSVs {same_csv}, bit-exact checkpoint {same_ckpt}")
    assert ok


def test_9_replay_fuzz():
    rng = np.random.default_rng(99)

    class Sample:
        def __init__(self, sid):
            self.scenario_id = sid

    ops, violations = 0, []
    for trial in range(200):
        cap = int(rng.integers(0, 20))
        mu = int(rng.integers(0, cap + 1))
        buf = ReplayBuffer(cap, mu, rng_seed=trial)
        sizes = {}
        for step in range(50):
            sid = trial * 1000 + step
            size = int(rng.integers(1, 15))
            buf = refresh(buf, [Sample(sid) for _ in range(size)])
            sizes[sid] = size
            ops += 1
            comp = buf.composition()
            if len(buf) > cap:
                violations.append("capacity")
            if comp.get(sid, 0) != min(mu, size):
                violations.append("newest retention")
            if not set(comp) <= set(sizes):
                violations.append("unknown scene")
            if cap >= mu * len(sizes) and any(comp.get(k, 0) != min(mu, n) for k, n in sizes.items()):
                violations.append("composition")
    ok = ops == 10_000 and not violations
    report(9, "replay buffer fuzz", ok, f"{ops} operations, {len(violations)} violations")
    assert ok
