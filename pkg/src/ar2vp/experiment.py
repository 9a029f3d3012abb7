"""Experiment runners: single curriculum, ablation matrix, forgetting, sweeps, re-evaluation.

Every runner writes a resolved ``config.json`` plus CSVs into its output
directory. CSVs hold no timestamps or timings, so identical configs give
byte-identical files.
"""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from . import training as tr
from .config import ExperimentConfig
from .model import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

# (rsu_on, graph_on, compensator_on) for each ablation row
ABLATION_ROWS = (
    (False, False, True),
    (False, True, False),
    (False, True, True),
    (True, False, True),
    (True, True, False),
    (True, True, True),
)
BASELINES = {
    "no_fusion": {"flags.rsu_on": False, "flags.graph_on": False, "flags.compensator_on": False},
    "mean_fusion": {"flags.rsu_on": True, "flags.graph_on": True, "flags.compensator_on": False,
                    "flags.fusion": "mean"},
}
METRICS = ("mIoU", "AP50", "AP70")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return v


def write_csv(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])
    return path


def read_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _snapshot(cfg: ExperimentConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")


def _final(result: tr.CurriculumResult) -> dict:
    return {m: result.final_mean(m) for m in METRICS}


class SceneCache:
    """Scenes and frame splits per seed, shared by runs that differ only in flags."""

    def __init__(self):
        self._data = {}

    def get(self, cfg: ExperimentConfig, seed: int):
        key = (seed, json.dumps({k: cfg.to_dict()[k] for k in ("grid", "sensing", "scenes")}, sort_keys=True))
        if key not in self._data:
            scenes = tr.build_scenes(cfg, seed)
            self._data[key] = (scenes, [tr.split_frames(s, cfg) for s in scenes])
        return self._data[key]


def train_one(cfg: ExperimentConfig, seed: int | None = None, cache: SceneCache | None = None,
              replay_on: bool | None = None) -> tr.CurriculumResult:
    seed = cfg.seed if seed is None else seed
    cache = cache or SceneCache()
    scenes, data = cache.get(cfg, seed)
    return tr.train_curriculum(scenes, cfg, replay_on=replay_on, data=data, seed=seed)


# ---------------------------------------------------------------- runners

def run_train(cfg: ExperimentConfig, out) -> dict:
    out = Path(out)
    _snapshot(cfg, out)
    res = train_one(cfg)
    write_csv(out / "metrics.csv", tr.CSV_COLUMNS, res.rows)
    for k, params in enumerate(res.checkpoints):
        save_checkpoint(params, out / "checkpoints" / f"stage_{k}.ckpt")
    summary = {"final": _final(res), "feature_bytes": res.ledger.feature_bytes(headers=False),
               "total_bytes": res.ledger.cumulative()}
    if len(res.checkpoints) > 1:
        summary["forget"] = {m: res.forget(m) for m in METRICS}
        _forgetting_plot({cfg.flags.replay_on: [res]}, out / "forgetting.svg")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def ablation_table(cfg: ExperimentConfig, cache: SceneCache | None = None, baselines=None) -> tuple:
    """Per-seed and seed-averaged results for every ablation row and the chosen baselines."""
    cache = cache or SceneCache()
    per_seed = []
    baselines = list(BASELINES) if baselines is None else list(baselines)
    variants = [(f"rsu{int(r)}_graph{int(g)}_comp{int(c)}",
                 {"flags.rsu_on": r, "flags.graph_on": g, "flags.compensator_on": c})
                for r, g, c in ABLATION_ROWS] + [(b, BASELINES[b]) for b in baselines]
    for seed in cfg.seeds:
        for name, overrides in variants:
            vcfg = cfg.replace(**overrides)
            m = _final(train_one(vcfg, seed, cache))
            f = vcfg.flags
            per_seed.append({"seed": seed, "variant": name, "rsu": f.rsu_on, "graph": f.graph_on,
                             "compensator": f.compensator_on, "fusion": f.fusion, **m})
            log.info("seed %d %s mIoU %.4f", seed, name, m["mIoU"])
    mean = {}
    for name, _ in variants:
        rows = [r for r in per_seed if r["variant"] == name]
        mean[name] = {**{k: rows[0][k] for k in ("variant", "rsu", "graph", "compensator", "fusion")},
                      **{m: float(np.mean([r[m] for r in rows])) for m in METRICS}, "seeds": len(rows)}
    return per_seed, mean


def run_ablation(cfg: ExperimentConfig, out) -> dict:
    out = Path(out)
    _snapshot(cfg, out)
    per_seed, mean = ablation_table(cfg)
    cols = ("rsu", "graph", "compensator", "AP50", "AP70", "mIoU", "seeds")
    names = [f"rsu{int(r)}_graph{int(g)}_comp{int(c)}" for r, g, c in ABLATION_ROWS]
    write_csv(out / "ablation.csv", cols, [mean[n] for n in names])
    write_csv(out / "baselines.csv", ("variant", "AP50", "AP70", "mIoU", "seeds"),
              [mean[n] for n in BASELINES])
    write_csv(out / "ablation_per_seed.csv",
              ("seed", "variant", "rsu", "graph", "compensator", "fusion", "AP50", "AP70", "mIoU"), per_seed)
    return mean


def forgetting_table(cfg: ExperimentConfig, cache: SceneCache | None = None) -> tuple:
    """Sequential curricula with and without replay for every seed."""
    cache = cache or SceneCache()
    scfg = cfg.replace(schedule="sequential")
    results = {True: [], False: []}
    rows = []
    for seed in cfg.seeds:
        for replay in (False, True):
            res = train_one(scfg, seed, cache, replay_on=replay)
            results[replay].append(res)
            rows.append({"seed": seed, "replay_on": replay,
                         **{f"forget_{m}": res.forget(m) for m in METRICS},
                         **{f"final_{m}": res.final_mean(m) for m in METRICS}})
            log.info("seed %d replay %s forget %.4f", seed, replay, rows[-1]["forget_mIoU"])
    return rows, results


def run_forgetting(cfg: ExperimentConfig, out) -> list:
    out = Path(out)
    _snapshot(cfg, out)
    rows, results = forgetting_table(cfg)
    cols = ["seed", "replay_on"] + [f"forget_{m}" for m in METRICS] + [f"final_{m}" for m in METRICS]
    write_csv(out / "forgetting.csv", cols, rows)
    curve = [{"seed": seed, "replay_on": replay, **r}
             for replay, lst in results.items() for seed, res in zip(cfg.seeds, lst) for r in res.rows]
    write_csv(out / "forgetting_curve.csv", ("seed", "replay_on") + tr.CSV_COLUMNS, curve)
    _forgetting_plot(results, out / "forgetting.svg")
    return rows


def sweep_table(cfg: ExperimentConfig, axis: str | None = None, values=None,
                cache: SceneCache | None = None) -> list:
    """Seed-averaged final metrics and feature traffic for each value of one config axis."""
    axis = axis or cfg.sweep.axis
    values = list(cfg.sweep.values if values is None else values)
    cache = cache or SceneCache()
    rows = []
    for v in values:
        vcfg = cfg.replace(**{axis: v})
        per = [train_one(vcfg, seed, cache) for seed in cfg.seeds]
        row = {"axis": axis, "value": v,
               "feature_bytes": int(np.mean([r.ledger.feature_bytes(headers=False) for r in per])),
               "total_bytes": int(np.mean([r.ledger.cumulative() for r in per]))}
        for m in METRICS:
            row[m] = float(np.mean([r.final_mean(m) for r in per]))
        rows.append(row)
        log.info("%s=%s mIoU %.4f feature bytes %d", axis, v, row["mIoU"], row["feature_bytes"])
    return rows


def run_sweep(cfg: ExperimentConfig, out, axis: str | None = None, values=None) -> list:
    out = Path(out)
    _snapshot(cfg, out)
    rows = sweep_table(cfg, axis, values)
    write_csv(out / "sweep.csv", ("axis", "value", "feature_bytes", "total_bytes") + METRICS, rows)
    if rows[0]["axis"] == "compression_n":
        pts = sorted(rows, key=lambda r: r["feature_bytes"])
        write_csv(out / "bandwidth_curve.csv", ("feature_bytes", "value") + METRICS, pts)
        line_plot({m: ([r["feature_bytes"] for r in pts], [r[m] for r in pts]) for m in METRICS},
                  out / "bandwidth.svg", "feature bytes (log scale)", "metric", logx=True)
    else:
        line_plot({m: ([r["value"] for r in rows], [r[m] for r in rows]) for m in METRICS},
                  out / "sweep.svg", rows[0]["axis"], "metric")
    return rows


def run(cfg: ExperimentConfig, out):
    """Dispatch on ``cfg.experiment``."""
    if cfg.experiment == "train":
        return run_train(cfg, out)
    if cfg.experiment == "ablation":
        return run_ablation(cfg, out)
    if cfg.experiment == "forgetting":
        return run_forgetting(cfg, out)
    if cfg.experiment == "bandwidth":
        return run_sweep(cfg, out, "compression_n")
    raise ValueError(f"unknown experiment {cfg.experiment!r}")


def run_eval(cfg: ExperimentConfig, checkpoint, out) -> list:
    """Evaluate a saved checkpoint on every scene's test split."""
    out = Path(out)
    _snapshot(cfg, out)
    params = load_checkpoint(checkpoint)
    if params.dims.compression_n != cfg.compression_n:
        cfg = cfg.replace(compression_n=params.dims.compression_n)
    _, data = SceneCache().get(cfg, cfg.seed)
    rows = []
    for s, d in enumerate(data):
        m = tr.evaluate(params, d.test, cfg.pipeline_flags(), cfg.loss, cfg.eval.objectness_threshold,
                        cfg.eval.nms_iou)
        rows.append({"split_scene": s, "mIoU": m["mIoU"], "AP50": m["AP50"], "AP70": m["AP70"],
                     "loss": m["loss"]})
    write_csv(out / "eval.csv", ("split_scene", "mIoU", "AP50", "AP70", "loss"), rows)
    return rows


# ---------------------------------------------------------------- plots

def line_plot(series: dict, path, xlabel: str, ylabel: str, logx: bool = False):
    """SVG line plot of {label: (xs, ys)}; rendered without timestamps."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "ar2vp"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, (xs, ys) in series.items():
        ax.plot(xs, ys, marker="o", label=str(label))
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)


def _forgetting_plot(results: dict, path):
    """Mean mIoU over scenes seen so far, after each stage."""
    series = {}
    for replay, lst in results.items():
        if not lst:
            continue
        stages = len(lst[0].history["mIoU"])
        ys = [float(np.mean([np.mean(r.history["mIoU"][t][:t + 1]) for r in lst])) for t in range(stages)]
        series["replay" if replay else "no replay"] = (list(range(stages)), ys)
    line_plot(series, path, "scene index", "mean mIoU on seen scenes")
