"""RSU experience replay buffer for learning scenes one after another.

Frames from finished scenes are kept at the RSU and mixed into training on the
next scene. Stored samples are raw observations (``scene.Frame``), not
features, because features change as the model trains.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene import Frame


class ReplayConfigError(ValueError):
    pass


def _flat(keys):
    for k in keys:
        if isinstance(k, (tuple, list)):
            yield from _flat(k)
        else:
            yield int(k) & 0xFFFFFFFFFFFFFFFF


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(_flat(keys))))


@dataclass
class ReplayBuffer:
    capacity: int = 60
    select_count: int = 20
    rng_seed: int = 0
    samples: list = field(default_factory=list)
    refreshes: int = 0

    def __post_init__(self):
        if self.capacity < 0 or self.select_count < 0:
            raise ReplayConfigError("capacity and select count must be >= 0")
        if self.select_count > self.capacity:
            raise ReplayConfigError(
                f"select count {self.select_count} exceeds capacity {self.capacity}")
        if len(self.samples) > self.capacity:
            raise ReplayConfigError("buffer holds more samples than its capacity")

    def __len__(self):
        return len(self.samples)

    def scene_ids(self) -> list:
        return [s.scenario_id for s in self.samples]

    def composition(self) -> dict:
        out = {}
        for sid in self.scene_ids():
            out[sid] = out.get(sid, 0) + 1
        return out

    def save(self, path):
        arrays = {"config": np.array([self.capacity, self.select_count, self.rng_seed,
                                      self.refreshes, len(self.samples)], dtype=np.int64)}
        for k, s in enumerate(self.samples):
            for name, arr in s.to_arrays().items():
                arrays[f"{k}/{name}"] = arr
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        with np.load(Path(path)) as z:
            cap, mu, seed, refreshes, n = (int(v) for v in z["config"])
            samples = []
            for k in range(n):
                prefix = f"{k}/"
                samples.append(Frame.from_arrays(
                    {key[len(prefix):]: z[key] for key in z.files if key.startswith(prefix)}))
        return cls(cap, mu, seed, samples, refreshes)


def select(scene_samples, mu: int, seed) -> list:
    """Uniform sample of ``min(mu, len)`` items without replacement."""
    if mu < 0:
        raise ReplayConfigError("mu must be >= 0")
    k = min(mu, len(scene_samples))
    if k == 0:
        return []
    idx = _rng(seed, 0x5E1).choice(len(scene_samples), size=k, replace=False)
    return [scene_samples[i] for i in sorted(idx)]


def make_training_stream(current, buffer: ReplayBuffer | None, seed, batch_size: int = 4,
                         epochs: int = 1, replay_per_epoch: int | None = None):
    """Yield ``(epoch, batch)`` pairs over S_c plus a fresh replay draw each epoch.

    ``replay_per_epoch`` defaults to ``min(|S_p|, |S_c|)`` so old and new
    scenes are seen in roughly equal measure.
    """
    if not current:
        raise ValueError("current scene has no samples")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    old = list(buffer.samples) if buffer is not None else []
    n_replay = min(len(old), len(current)) if replay_per_epoch is None else min(replay_per_epoch, len(old))
    for epoch in range(epochs):
        rng = _rng(seed, epoch, 0x57E)
        pool = list(current)
        if n_replay:
            pick = rng.choice(len(old), size=n_replay, replace=False)
            pool += [old[i] for i in sorted(pick)]
        order = rng.permutation(len(pool))
        for start in range(0, len(pool), batch_size):
            yield epoch, [pool[i] for i in order[start:start + batch_size]]


def refresh(buffer: ReplayBuffer, finished_scene, mu: int | None = None, seed=None) -> ReplayBuffer:
    """S_p <- Select(mu, S_c) U S_p, evicting random old entries beyond capacity."""
    mu = buffer.select_count if mu is None else mu
    if mu > buffer.capacity:
        raise ReplayConfigError(f"mu={mu} exceeds capacity {buffer.capacity}")
    seed = buffer.rng_seed if seed is None else seed
    new = select(finished_scene, mu, (seed, buffer.refreshes))
    old = list(buffer.samples)
    overflow = len(old) + len(new) - buffer.capacity
    if overflow > 0:
        drop = set(_rng(seed, buffer.refreshes, 0xE71C).choice(len(old), size=overflow, replace=False).tolist())
        old = [s for i, s in enumerate(old) if i not in drop]
    return ReplayBuffer(buffer.capacity, buffer.select_count, buffer.rng_seed, old + new,
                        buffer.refreshes + 1)
