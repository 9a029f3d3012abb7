"""Losses over pipeline outputs, SGD, and the scene curriculum."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import evaluation as ev
from . import pipeline as pl
from .channel import BandwidthLedger
from .config import ExperimentConfig
from .losses import (LossConfig, det_loss_with_grad, render_det_targets,
                     seg_loss_with_grad)
from .model import ModelDims, ModelParams
from .replay import ReplayBuffer, make_training_stream, refresh
from .scene import NUM_INPUT_CHANNELS, NUM_LABELS, generate_scenario, scenario_frames

log = logging.getLogger(__name__)

class TrainingDivergedError(RuntimeError):
    """SGD produced a non-finite loss; lower the learning rate."""


CSV_COLUMNS = ("scene_idx", "epoch", "split_scene", "mIoU", "AP50", "AP70", "loss", "cumulative_bytes")


def derive_seed(master: int, *tags) -> int:
    """Stable 63-bit child seed for a (master, tag...) path."""
    words = [int(master) & 0xFFFFFFFF]
    for t in tags:
        words.append(t if isinstance(t, int) else sum(ord(c) * 131 ** k for k, c in enumerate(str(t))) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(2, np.uint64)[0] >> np.uint64(1))


def frame_targets(frame):
    """Detection targets and masks for every vehicle, cached on the frame."""
    if "det_targets" not in frame._cache:
        h, w = frame.labels.shape[1:]
        pairs = [render_det_targets(b, h, w) for b in frame.boxes]
        frame._cache["det_targets"] = (np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]))
    return frame._cache["det_targets"]


def batch_loss(out: pl.PipelineOutput, frames, loss_cfg: LossConfig, weights=None, task: str | None = None):
    """Weighted task loss and gradients w.r.t. both head outputs."""
    task = task or loss_cfg.task
    labels = np.stack([f.labels for f in frames])
    if weights is None:
        weights = np.full(len(frames), 1.0 / len(frames))
    total = 0.0
    dseg = np.zeros_like(out.seg)
    ddet = np.zeros_like(out.det)
    if task in ("seg", "both"):
        ls, dseg = seg_loss_with_grad(out.seg, labels, weights)
        total += ls
    if task in ("det", "both"):
        tg = [frame_targets(f) for f in frames]
        target = np.stack([t[0] for t in tg])
        mask = np.stack([t[1] for t in tg])
        ld, ddet = det_loss_with_grad(out.det, target, mask, loss_cfg.sigma, loss_cfg.eta, weights)
        total += ld
    return total, dseg, ddet


def part_weights(is_replay) -> np.ndarray:
    """Per-frame weights so that L = mean loss over replay + mean loss over current."""
    is_replay = np.asarray(is_replay, dtype=bool)
    w = np.zeros(len(is_replay))
    for part in (True, False):
        sel = is_replay == part
        if sel.any():
            w[sel] = 1.0 / sel.sum()
    return w


def total_loss(params, current_batch, replay_batch, flags: pl.PipelineFlags, loss_cfg: LossConfig,
               task: str | None = None) -> float:
    """Loss on replayed frames plus loss on current frames; an empty replay adds 0."""
    out = pl.forward(current_batch, params, flags)
    value = batch_loss(out, current_batch, loss_cfg, task=task)[0]
    if replay_batch:
        out_r = pl.forward(replay_batch, params, flags)
        value += batch_loss(out_r, replay_batch, loss_cfg, task=task)[0]
    return value


def loss_and_grads(params, frames, flags, loss_cfg, weights=None, ledger=None, frozen=None):
    out = pl.forward(frames, params, flags, frozen=frozen, ledger=ledger)
    loss, dseg, ddet = batch_loss(out, frames, loss_cfg, weights)
    return loss, pl.backward(dseg, ddet, out, params), out


def sgd_step(params: ModelParams, frames, flags, loss_cfg: LossConfig, weights=None,
             ledger: BandwidthLedger | None = None, lr: float | None = None) -> float:
    """One plain SGD update in place; ``lr`` overrides the configured rate."""
    loss, grads, _ = loss_and_grads(params, frames, flags, loss_cfg, weights, ledger)
    lr = loss_cfg.learning_rate if lr is None else lr
    for k, g in grads.items():
        params[k] = params[k] - lr * g
    return loss


def predict(params, frames, flags, chunk: int = 8):
    """Yield (frame, seg logits (N,H,W,K), det maps (N,H,W,5)) for each frame."""
    for start in range(0, len(frames), chunk):
        part = frames[start:start + chunk]
        out = pl.forward(part, params, flags)
        for b, f in enumerate(part):
            yield f, out.seg[b], out.det[b]


def evaluate(params, frames, flags, loss_cfg: LossConfig, objectness_threshold: float = 0.5,
             nms_iou: float = 0.5) -> dict:
    """Dataset-level mIoU, AP@0.5, AP@0.7 and mean loss over all vehicles of all frames."""
    preds, gts, det_p, det_g, losses = [], [], [], [], []
    for start in range(0, len(frames), 8):
        part = frames[start:start + 8]
        out = pl.forward(part, params, flags)
        losses.append(batch_loss(out, part, loss_cfg)[0] * len(part))
        preds.append(out.seg.argmax(-1))
        gts.append(np.stack([f.labels for f in part]))
        for b, f in enumerate(part):
            for i in range(f.num_vehicles):
                det_p.append(ev.decode_detections(out.det[b, i], objectness_threshold, nms_iou))
                det_g.append([box for _, box in f.boxes[i]])
    m, per_class = ev.miou(np.concatenate(preds), np.concatenate(gts), NUM_LABELS)
    return {
        "mIoU": m,
        "per_class": per_class,
        "AP50": ev.dataset_average_precision(det_p, det_g, 0.5),
        "AP70": ev.dataset_average_precision(det_p, det_g, 0.7),
        "loss": float(sum(losses) / len(frames)),
    }


# ---------------------------------------------------------------- data

@dataclass
class SceneData:
    scenario: object
    train: list
    test: list


def build_scenes(cfg: ExperimentConfig, seed: int | None = None) -> list:
    """Scenario list for a config; layout seeds come from the config or the master seed."""
    seed = cfg.seed if seed is None else seed
    out = []
    for k in range(cfg.scenes.count):
        layout = cfg.scenes.seeds[k] if cfg.scenes.seeds else derive_seed(seed, "scene", k)
        out.append(generate_scenario(layout, cfg.scenario_config(k), scenario_id=k))
    return out


def split_frames(scenario, cfg: ExperimentConfig) -> SceneData:
    """Temporal split: the last ``test_fraction`` of steps are held out."""
    frames = scenario_frames(scenario, cfg.grid, cfg.sensing.vehicle_range, cfg.sensing.rsu_range,
                             cfg.sensing.occlusion)
    n_test = max(1, int(round(cfg.scenes.test_fraction * len(frames))))
    return SceneData(scenario, frames[:-n_test], frames[-n_test:])


def model_dims(cfg: ExperimentConfig) -> ModelDims:
    return ModelDims(2 * NUM_INPUT_CHANNELS, cfg.model.c_f, cfg.model.c_d, NUM_LABELS, cfg.compression_n)


# ---------------------------------------------------------------- curriculum

@dataclass
class CurriculumResult:
    checkpoints: list
    rows: list  # dicts keyed by CSV_COLUMNS
    history: dict  # metric -> [[value on scene s after stage t]]
    ledger: BandwidthLedger
    final: dict = field(default_factory=dict)

    def forget(self, metric: str = "mIoU") -> float:
        h = self.history[metric]
        return ev.forget([row[:t + 1] for t, row in enumerate(h)])

    def final_mean(self, metric: str = "mIoU") -> float:
        return float(np.mean(self.history[metric][-1]))


def train_curriculum(scenes, cfg: ExperimentConfig, replay_on: bool | None = None,
                     data: list | None = None, seed: int | None = None) -> CurriculumResult:
    """Train over ``scenes`` in order (or pooled, for the joint schedule).

    After each stage the parameters are checkpointed and evaluated on every
    scene's test split; with replay the RSU buffer is refreshed from the stage
    just finished.
    """
    if not scenes:
        raise ValueError("need at least one scene")
    seed = cfg.seed if seed is None else seed
    replay_on = cfg.flags.replay_on if replay_on is None else replay_on
    flags = cfg.pipeline_flags()
    loss_cfg = cfg.loss
    data = data or [split_frames(s, cfg) for s in scenes]
    params = ModelParams.initialize(model_dims(cfg), derive_seed(seed, "init"))
    buffer = ReplayBuffer(cfg.capacity, cfg.mu, derive_seed(seed, "replay"))
    ledger = BandwidthLedger()

    if cfg.schedule == "joint":
        stages = [[f for d in data for f in d.train]]
    else:
        stages = [d.train for d in data]

    checkpoints, rows = [], []
    history = {"mIoU": [], "AP50": [], "AP70": []}
    for k, current in enumerate(stages):
        current_ids = {f.scenario_id for f in current}
        stream = make_training_stream(current, buffer if replay_on else None,
                                      derive_seed(seed, "stream", k), loss_cfg.batch_size,
                                      loss_cfg.epochs_per_scene)
        for epoch, batch in stream:
            w = part_weights([f.scenario_id not in current_ids for f in batch])
            with np.errstate(over="ignore", invalid="ignore"):
                loss = sgd_step(params, batch, flags, loss_cfg, w, ledger)
            if not np.isfinite(loss) or not params.is_finite():
                raise TrainingDivergedError(
                    f"non-finite loss in stage {k}, epoch {epoch} (learning_rate={loss_cfg.learning_rate})")
        checkpoints.append(params.copy())
        for key in history:
            history[key].append([])
        for s, d in enumerate(data):
            m = evaluate(params, d.test, flags, loss_cfg, cfg.eval.objectness_threshold, cfg.eval.nms_iou)
            for key in history:
                history[key][-1].append(m[key])
            rows.append({"scene_idx": k, "epoch": loss_cfg.epochs_per_scene, "split_scene": s,
                         "mIoU": m["mIoU"], "AP50": m["AP50"], "AP70": m["AP70"], "loss": m["loss"],
                         "cumulative_bytes": ledger.cumulative()})
        log.info("stage %d done: mIoU per scene %s", k, np.round(history["mIoU"][-1], 4).tolist())
        if replay_on and cfg.schedule == "sequential":
            buffer = refresh(buffer, current, cfg.mu)
    return CurriculumResult(checkpoints, rows, history, ledger)


def forward_pipeline(frame, params: ModelParams, flags: pl.PipelineFlags):
    """Head outputs for one frame plus the messages it cost.

    Returns ``(seg (N,H,W,K), det (N,H,W,5), ledger)``.
    """
    ledger = BandwidthLedger()
    out = pl.forward([frame], params, flags, ledger=ledger)
    return out.seg[0], out.det[0], ledger
