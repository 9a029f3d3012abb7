import numpy as np
import pytest

from ar2vp import pipeline as pl
from ar2vp import training as tr
from ar2vp.config import preset
from ar2vp.losses import LossConfig
from ar2vp.model import ModelDims, ModelParams
from ar2vp.scene import NUM_LABELS


def tiny_cfg(**changes):
    base = {"scenes.count": 2, "scenes.steps": 4, "scenes.n_vehicles": 2, "grid.height": 6, "grid.width": 6,
            "loss.epochs_per_scene": 1, "model.c_f": 8, "model.c_d": 4}
    base.update(changes)
    return preset("smoke").replace(**base)


def params():
    return ModelParams.initialize(ModelDims(12, 8, 4, NUM_LABELS, 1), 3)


def test_derive_seed_stable_and_distinct():
    assert tr.derive_seed(1, "scene", 0) == tr.derive_seed(1, "scene", 0)
    assert len({tr.derive_seed(1, "scene", k) for k in range(50)}) == 50
    assert tr.derive_seed(1, "init") != tr.derive_seed(2, "init")


def test_part_weights():
    np.testing.assert_allclose(tr.part_weights([True, False, False, True, False]),
                               [0.5, 1 / 3, 1 / 3, 0.5, 1 / 3])
    np.testing.assert_allclose(tr.part_weights([False, False]), [0.5, 0.5])


def test_total_loss_parts(tiny_frames):
    p, flags, lc = params(), pl.PipelineFlags(), LossConfig()
    single = tr.total_loss(p, tiny_frames[:1], [], flags, lc)
    assert single == tr.total_loss(p, tiny_frames[:1], None, flags, lc)
    assert np.isclose(tr.total_loss(p, tiny_frames[:1], tiny_frames[:1], flags, lc), 2 * single)
    other = tr.total_loss(p, tiny_frames[1:], [], flags, lc)
    assert np.isclose(tr.total_loss(p, tiny_frames[:1], tiny_frames[1:], flags, lc), single + other)


def test_weighted_batch_loss_equals_part_sum(tiny_frames):
    p, flags, lc = params(), pl.PipelineFlags(), LossConfig()
    w = tr.part_weights([True, False])
    loss, _, _ = tr.loss_and_grads(p, tiny_frames, flags, lc, weights=w)
    want = tr.total_loss(p, tiny_frames[1:], tiny_frames[:1], flags, lc)
    assert np.isclose(loss, want, rtol=1e-12)


def test_zero_learning_rate_is_bit_identical(tiny_frames):
    p = params()
    q = p.copy()
    tr.sgd_step(q, tiny_frames, pl.PipelineFlags(), LossConfig(), lr=0.0)
    assert all(q[k].tobytes() == p[k].tobytes() for k, _ in p.items())


def test_sgd_reduces_loss_on_fixed_batch(tiny_frames):
    p, flags, lc = params(), pl.PipelineFlags(), LossConfig(learning_rate=0.2)
    initial = tr.total_loss(p, tiny_frames, [], flags, lc)
    for _ in range(50):
        tr.sgd_step(p, tiny_frames, flags, lc)
    assert tr.total_loss(p, tiny_frames, [], flags, lc) < 0.5 * initial


def test_split_is_temporal():
    cfg = tiny_cfg(**{"scenes.steps": 8})
    d = tr.split_frames(tr.build_scenes(cfg)[0], cfg)
    assert [f.t for f in d.train] == list(range(6)) and [f.t for f in d.test] == [6, 7]


def test_zero_epochs_leaves_initialisation():
    cfg = tiny_cfg(**{"loss.epochs_per_scene": 0})
    res = tr.train_curriculum(tr.build_scenes(cfg), cfg)
    init = ModelParams.initialize(tr.model_dims(cfg), tr.derive_seed(cfg.seed, "init"))
    assert all(c.equals(init) for c in res.checkpoints)
    assert res.ledger.cumulative() == 0


def test_single_scene_replay_makes_no_difference():
    cfg = tiny_cfg(**{"scenes.count": 1})
    scenes = tr.build_scenes(cfg)
    on = tr.train_curriculum(scenes, cfg, replay_on=True)
    off = tr.train_curriculum(scenes, cfg, replay_on=False)
    assert on.checkpoints[0].equals(off.checkpoints[0])
    assert on.rows == off.rows


def test_curriculum_is_deterministic():
    cfg = tiny_cfg()
    a = tr.train_curriculum(tr.build_scenes(cfg), cfg, replay_on=True)
    b = tr.train_curriculum(tr.build_scenes(cfg), cfg, replay_on=True)
    assert a.rows == b.rows
    assert all(x.equals(y) for x, y in zip(a.checkpoints, b.checkpoints))


def test_curriculum_rows_and_history():
    cfg = tiny_cfg()
    res = tr.train_curriculum(tr.build_scenes(cfg), cfg)
    assert len(res.checkpoints) == 2 and len(res.rows) == 4
    assert [(r["scene_idx"], r["split_scene"]) for r in res.rows] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert set(res.rows[0]) == set(tr.CSV_COLUMNS)
    assert res.rows[0]["cumulative_bytes"] < res.rows[-1]["cumulative_bytes"]
    assert len(res.history["mIoU"]) == 2 and all(len(h) == 2 for h in res.history["mIoU"])
    assert np.isfinite(res.forget())


def test_joint_schedule_is_one_stage():
    cfg = tiny_cfg(schedule="joint")
    res = tr.train_curriculum(tr.build_scenes(cfg), cfg)
    assert len(res.checkpoints) == 1 and len(res.rows) == 2


def test_empty_scene_list_rejected():
    with pytest.raises(ValueError):
        tr.train_curriculum([], tiny_cfg())


def test_evaluate_keys(tiny_frames):
    m = tr.evaluate(params(), tiny_frames, pl.PipelineFlags(), LossConfig())
    assert set(m) == {"mIoU", "per_class", "AP50", "AP70", "loss"}
    assert 0 <= m["mIoU"] <= 1 and m["AP70"] <= m["AP50"] + 1e-12


def test_divergence_is_reported(monkeypatch):
    cfg = tiny_cfg()
    monkeypatch.setattr(tr, "sgd_step", lambda *a, **k: float("nan"))
    with pytest.raises(tr.TrainingDivergedError, match="stage 0, epoch 0"):
        tr.train_curriculum(tr.build_scenes(cfg), cfg)
