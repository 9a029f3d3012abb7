"""Experiment configuration: one JSON schema, presets and overrides.

Schema (all keys optional; unknown keys are rejected)::

    {
      "experiment": "train" | "ablation" | "forgetting" | "bandwidth",
      "seed": 1,
      "seeds": [1],                       # repetitions for ablation/forgetting/bandwidth
      "schedule": "sequential" | "joint",
      "grid": {"height": 32, "width": 32, "cell_size": 1.0},
      "model": {"c_f": 32, "c_d": 16},
      "sensing": {"vehicle_range": 8.0, "rsu_range": 22.0, "occlusion": true},
      "scenes": {"count": 3, "seeds": null, "steps": 24, "themes": [...],
                 "test_fraction": 0.25, "n_vehicles": 4, "n_traffic": 6,
                 "n_pedestrians": 6, "extent": 48.0, "spawn_radius": 12.0},
      "flags": {"rsu_on": true, "graph_on": true, "compensator_on": true,
                "replay_on": true, "dpr_self": "include", "dpr_distance": "raw",
                "fusion": "graph", "model_at_rsu": false},
      "compression_n": 1, "threshold": 0.5, "mu": 20, "capacity": 60,
      "wire_dtype": "float32",
      "loss": {"eta": 0.5, "sigma": 1.0, "learning_rate": 0.05, "batch_size": 4,
               "epochs_per_scene": 30, "task": "both"},
      "sweep": {"axis": "compression_n", "values": [1, 2, 4, 8, 16, 32]},
      "eval": {"objectness_threshold": 0.5, "nms_iou": 0.5}
    }
"""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossConfig
from .pipeline import PipelineFlags
from .scene import THEMES, GridSpec, ScenarioConfig

EXPERIMENTS = ("train", "ablation", "forgetting", "bandwidth")
SWEEP_AXES = ("compression_n", "threshold", "mu")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class SceneList:
    count: int = 3
    seeds: list | None = None
    steps: int = 24
    themes: list = field(default_factory=lambda: ["downtown", "park", "plaza"])
    test_fraction: float = 0.25
    n_vehicles: int = 4
    n_traffic: int = 6
    n_pedestrians: int = 6
    extent: float = 48.0
    spawn_radius: float = 12.0


@dataclass
class Flags:
    rsu_on: bool = True
    graph_on: bool = True
    compensator_on: bool = True
    replay_on: bool = True
    dpr_self: str = "include"
    dpr_distance: str = "raw"
    fusion: str = "graph"
    model_at_rsu: bool = False


@dataclass
class Sensing:
    vehicle_range: float = 8.0
    rsu_range: float = 22.0
    occlusion: bool = True


@dataclass
class ModelSize:
    c_f: int = 32
    c_d: int = 16


@dataclass
class Sweep:
    axis: str = "compression_n"
    values: list = field(default_factory=lambda: [1, 2, 4, 8, 16, 32])


@dataclass
class EvalConfig:
    objectness_threshold: float = 0.5
    nms_iou: float = 0.5


@dataclass
class ExperimentConfig:
    experiment: str = "train"
    seed: int = 1
    seeds: list = field(default_factory=lambda: [1])
    schedule: str = "sequential"
    grid: GridSpec = field(default_factory=GridSpec)
    model: ModelSize = field(default_factory=ModelSize)
    sensing: Sensing = field(default_factory=Sensing)
    scenes: SceneList = field(default_factory=SceneList)
    flags: Flags = field(default_factory=Flags)
    compression_n: int = 1
    threshold: float = 0.5
    mu: int = 20
    capacity: int = 60
    wire_dtype: str = "float32"
    loss: LossConfig = field(default_factory=LossConfig)
    sweep: Sweep = field(default_factory=Sweep)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ExperimentConfig":
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"{name}: {msg}")

        need(self.experiment in EXPERIMENTS, "experiment", f"must be one of {EXPERIMENTS}")
        need(self.schedule in ("sequential", "joint"), "schedule", "must be 'sequential' or 'joint'")
        need(len(self.seeds) >= 1, "seeds", "needs at least one seed")
        need(self.grid.height >= 1 and self.grid.width >= 1, "grid", "height and width must be >= 1")
        need(self.grid.cell_size > 0, "grid.cell_size", "must be positive")
        need(self.model.c_f >= 1 and self.model.c_d >= 1, "model", "c_f and c_d must be >= 1")
        need(self.compression_n >= 1 and self.model.c_f % self.compression_n == 0, "compression_n",
             f"must divide model.c_f={self.model.c_f}")
        need(-1.0 <= self.threshold <= 1.0, "threshold", "must lie in [-1, 1]")
        need(0 <= self.mu <= self.capacity, "mu", f"must be in [0, capacity={self.capacity}]")
        need(self.scenes.count >= 1, "scenes.count", "must be >= 1")
        need(self.scenes.steps >= 2, "scenes.steps", "must be >= 2 (train and test frames)")
        need(0.0 < self.scenes.test_fraction < 1.0, "scenes.test_fraction", "must lie in (0, 1)")
        need(self.scenes.n_vehicles >= 1, "scenes.n_vehicles", "must be >= 1")
        need(all(t in THEMES for t in self.scenes.themes), "scenes.themes",
             f"entries must be among {sorted(THEMES)}")
        need(self.scenes.seeds is None or len(self.scenes.seeds) == self.scenes.count, "scenes.seeds",
             "must list one layout seed per scene")
        need(self.wire_dtype in ("float32", "float64"), "wire_dtype", "must be float32 or float64")
        need(self.sweep.axis in SWEEP_AXES, "sweep.axis", f"must be one of {SWEEP_AXES}")
        need(len(self.sweep.values) >= 1, "sweep.values", "needs at least one value")
        try:
            self.pipeline_flags()
            LossConfig(**dataclasses.asdict(self.loss))
        except ValueError as exc:
            raise ConfigError(f"flags: {exc}") from None
        return self

    def pipeline_flags(self) -> PipelineFlags:
        f = self.flags
        return PipelineFlags(f.rsu_on, f.graph_on, f.compensator_on, self.compression_n, f.dpr_self,
                             f.dpr_distance, f.fusion, self.threshold, self.wire_dtype, f.model_at_rsu)

    def scenario_config(self, k: int) -> ScenarioConfig:
        s = self.scenes
        theme = s.themes[k % len(s.themes)] if s.themes else "mixed"
        return ScenarioConfig(extent=s.extent, n_agents=s.n_vehicles, n_traffic=s.n_traffic,
                              n_pedestrians=s.n_pedestrians, num_steps=s.steps, theme=theme,
                              spawn_radius=s.spawn_radius)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def replace(self, **changes) -> "ExperimentConfig":
        return apply_overrides(self, changes)


_NESTED = {"grid": GridSpec, "model": ModelSize, "sensing": Sensing, "scenes": SceneList,
           "flags": Flags, "loss": LossConfig, "sweep": Sweep, "eval": EvalConfig}


def _build(cls, data: dict, prefix: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"{prefix}{key}: unknown field")
        if cls is ExperimentConfig and key in _NESTED:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected an object")
            value = _build(_NESTED[key], value, f"{key}.")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from None


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be an object")
    return _build(ExperimentConfig, data, "").validate()


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc})") from None
    return from_dict(data)


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Return a copy with dotted-key overrides, e.g. ``{"flags.replay_on": False}``."""
    data = copy.deepcopy(cfg.to_dict())
    for key, value in overrides.items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"{key}: unknown field")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"{key}: unknown field")
        node[parts[-1]] = value
    return from_dict(data)


def preset(name: str) -> ExperimentConfig:
    """Named starting points for the CLI."""
    if name == "smoke":
        return from_dict({
            "experiment": "train", "grid": {"height": 8, "width": 8},
            "scenes": {"count": 1, "n_vehicles": 2, "steps": 8, "themes": ["mixed"]},
            "loss": {"epochs_per_scene": 2},
        })
    # experiment presets: five seeds, rate and epochs sized to converge in desk-scale runs
    bench = {"seeds": [1, 2, 3, 4, 5], "loss": {"learning_rate": 0.2, "epochs_per_scene": 20}}
    if name == "ablation":
        return from_dict({**bench, "experiment": "ablation", "schedule": "joint",
                          "flags": {"replay_on": False}})
    if name == "forgetting":
        return from_dict({**bench, "experiment": "forgetting", "schedule": "sequential"})
    if name == "bandwidth":
        # the one-channel code at n=32 needs a longer, gentler schedule to converge without diverging
        bench["loss"] = {**bench["loss"], "learning_rate": 0.1, "epochs_per_scene": 120}
        return from_dict({**bench, "experiment": "bandwidth", "schedule": "joint",
                          "flags": {"replay_on": False},
                          "sweep": {"axis": "compression_n", "values": [1, 2, 4, 8, 16, 32]}})
    raise ConfigError(f"preset: unknown preset {name!r}")


PRESETS = ("smoke", "ablation", "bandwidth", "forgetting")
