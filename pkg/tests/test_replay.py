from dataclasses import dataclass

import numpy as np
import pytest

from ar2vp.replay import ReplayBuffer, ReplayConfigError, make_training_stream, refresh, select


@dataclass(frozen=True)
class Sample:
    scenario_id: int
    index: int


def scene(sid, n):
    return [Sample(sid, k) for k in range(n)]


def test_select_edges():
    s = scene(0, 10)
    assert select(s, 0, 1) == []
    assert select(s, 12, 1) == s
    assert select(s, 2, 7) == select(s, 2, 7)
    with pytest.raises(ReplayConfigError):
        select(s, -1, 0)


def test_select_is_uniform():
    s = list(range(10))
    counts = np.zeros(10)
    trials = 10_000
    for t in range(trials):
        for k in select(s, 2, t):
            counts[k] += 1
    freq = counts / trials
    assert np.all(np.abs(freq - 0.2) <= 0.02), freq


def test_stream_first_scene_is_shuffle_of_current():
    cur = scene(1, 5)
    batches = list(make_training_stream(cur, ReplayBuffer(10, 2), 3, batch_size=2))
    seen = [s for _, b in batches for s in b]
    assert sorted(seen, key=lambda s: s.index) == cur


def test_stream_counts_and_determinism():
    cur = scene(1, 4)
    buf = ReplayBuffer(10, 2, samples=scene(0, 2))
    batches = list(make_training_stream(cur, buf, 9, batch_size=2))
    assert len(batches) == 3
    seen = [s for _, b in batches for s in b]
    assert len(seen) == len(set(seen)) == 6
    assert batches == list(make_training_stream(cur, buf, 9, batch_size=2))
    two = list(make_training_stream(cur, buf, 9, batch_size=2, epochs=2))
    assert [e for e, _ in two] == [0, 0, 0, 1, 1, 1]


def test_refresh_examples():
    buf = ReplayBuffer(100, 5, samples=scene(0, 10))
    out = refresh(buf, scene(1, 8))
    assert len(out) == 15 and out.composition() == {0: 10, 1: 5}

    buf = ReplayBuffer(10, 5, samples=scene(0, 10))
    out = refresh(buf, scene(1, 8))
    assert len(out) == 10 and out.composition() == {0: 5, 1: 5}

    buf = refresh(refresh(ReplayBuffer(6, 3), scene(0, 8)), scene(1, 8))
    assert buf.composition() == {0: 3, 1: 3}


def test_refresh_mu_zero_and_errors():
    buf = ReplayBuffer(10, 0, samples=scene(0, 3))
    assert refresh(buf, scene(1, 5)).composition() == {0: 3}
    with pytest.raises(ReplayConfigError):
        refresh(ReplayBuffer(4, 2), scene(0, 8), mu=5)
    with pytest.raises(ReplayConfigError):
        ReplayBuffer(2, 3)


def test_buffer_lifecycle_is_reproducible():
    def run():
        buf = ReplayBuffer(7, 4, rng_seed=11)
        for sid in range(5):
            buf = refresh(buf, scene(sid, 9))
        return buf.samples
    assert run() == run()


def test_save_load_round_trip(tmp_path, tiny_scenario):
    from ar2vp.scene import GridSpec, make_frame
    frames = [make_frame(tiny_scenario, t, GridSpec(4, 4, 1.0), 8.0, 22.0) for t in range(3)]
    buf = refresh(ReplayBuffer(5, 2, rng_seed=4), frames)
    buf.save(tmp_path / "buf.npz")
    back = ReplayBuffer.load(tmp_path / "buf.npz")
    assert (back.capacity, back.select_count, back.rng_seed, back.refreshes) == (5, 2, 4, 1)
    for a, b in zip(buf.samples, back.samples):
        for k, v in a.to_arrays().items():
            assert np.array_equal(v, b.to_arrays()[k])


def test_replay_fuzz_ten_thousand_operations():
    rng = np.random.default_rng(2024)
    for trial in range(200):
        cap = int(rng.integers(0, 15))
        mu = int(rng.integers(0, cap + 1))
        buf = ReplayBuffer(cap, mu, rng_seed=trial)
        learned = set()
        for op in range(50):
            sid = trial * 100 + op
            size = int(rng.integers(1, 12))
            new = scene(sid, size)
            buf = refresh(buf, new)
            learned.add(sid)
            assert len(buf) <= cap
            got = buf.composition()
            assert got.get(sid, 0) == min(mu, size)
            assert set(got) <= learned
        assert len(buf.samples) == len(set(buf.samples))


def test_composition_with_ample_capacity():
    buf = ReplayBuffer(30, 3)
    for sid in range(10):
        buf = refresh(buf, scene(sid, 5))
        assert buf.composition() == {k: 3 for k in range(sid + 1)}
