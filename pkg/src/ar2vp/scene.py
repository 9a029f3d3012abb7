"""Synthetic traffic scenes and per-agent BEV rasterization.

Layouts are built from axis-aligned rectangles on an integer metre lattice:
a road cross through the centre (where the RSU sits), a few extra roads, and
lots between roads filled with buildings, vegetation or open ground. Traffic
vehicles and pedestrians move linearly and reflect off the extent boundary.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import Pose

CLASSES = ("road", "building", "vehicle", "pedestrian", "vegetation", "ground")
NUM_INPUT_CHANNELS = len(CLASSES)
# label 0 is "unlabeled"; class k in CLASSES has label k + 1
NUM_LABELS = len(CLASSES) + 1
LABEL = {name: i + 1 for i, name in enumerate(CLASSES)}
STATIC_CLASSES = frozenset({"road", "building", "vegetation", "ground"})
# later entries are drawn on top
DRAW_ORDER = ("ground", "road", "vegetation", "building", "vehicle", "pedestrian")

SCHEMA_VERSION = 1

# lot fill probabilities (building, vegetation, ground) per theme
THEMES = {
    "mixed": (0.4, 0.3, 0.3),
    "downtown": (0.85, 0.0, 0.15),
    "park": (0.0, 0.8, 0.2),
    "plaza": (0.0, 0.0, 1.0),
}


class ScenarioError(RuntimeError):
    pass


@dataclass(frozen=True)
class Entity:
    id: int
    cls: str
    footprint: tuple  # (x0, y0, x1, y1) metres, global frame
    velocity: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.cls not in CLASSES:
            raise ValueError(f"unknown class {self.cls!r}")
        x0, y0, x1, y1 = self.footprint
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"entity {self.id}: footprint must have positive size")
        if self.cls in STATIC_CLASSES and tuple(self.velocity) != (0.0, 0.0):
            raise ValueError(f"entity {self.id}: static class {self.cls} cannot move")

    @property
    def center(self) -> np.ndarray:
        x0, y0, x1, y1 = self.footprint
        return np.array([(x0 + x1) / 2, (y0 + y1) / 2])


@dataclass
class ScenarioConfig:
    extent: float = 48.0
    n_agents: int = 4
    n_traffic: int = 6
    n_pedestrians: int = 6
    num_steps: int = 24
    theme: str = "mixed"
    road_width: int = 6
    extra_roads: tuple = (0, 2)  # inclusive range of additional roads
    max_retries: int = 200
    spawn_radius: float = 12.0  # connected vehicles start within this distance of the RSU

    def validate(self):
        if self.extent <= 0:
            raise ValueError("extent must be positive")
        if min(self.n_agents, self.n_traffic, self.n_pedestrians) < 0:
            raise ValueError("entity counts must be >= 0")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.theme not in THEMES:
            raise ValueError(f"unknown theme {self.theme!r}; expected one of {sorted(THEMES)}")
        if self.spawn_radius <= 0:
            raise ValueError("spawn_radius must be positive")


@dataclass
class Scenario:
    id: int
    extent: tuple
    entities: list
    rsu_pose: Pose
    vehicle_spawns: list
    num_steps: int
    seed: int
    theme: str = "mixed"
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if not _inside(self.extent, self.rsu_pose.position):
            raise ValueError("RSU must lie inside the scenario extent")
        for k, pose in enumerate(self.vehicle_spawns):
            if not _inside(self.extent, pose.position):
                raise ValueError(f"vehicle spawn {k} lies outside the extent")

    @property
    def num_vehicles(self) -> int:
        return len(self.vehicle_spawns)

    def agent_poses(self) -> list:
        """RSU first, then the connected vehicles."""
        return [self.rsu_pose, *self.vehicle_spawns]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "id": self.id,
            "seed": self.seed,
            "theme": self.theme,
            "extent": list(self.extent),
            "num_steps": self.num_steps,
            "rsu_pose": self.rsu_pose.to_dict(),
            "vehicle_spawns": [p.to_dict() for p in self.vehicle_spawns],
            "entities": [
                {"id": e.id, "class": e.cls, "footprint": list(e.footprint),
                 "velocity": list(e.velocity)}
                for e in self.entities
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported scenario schema_version {d.get('schema_version')!r}")
        return cls(
            id=int(d["id"]),
            extent=tuple(float(v) for v in d["extent"]),
            entities=[Entity(int(e["id"]), e["class"], tuple(float(v) for v in e["footprint"]),
                             tuple(float(v) for v in e["velocity"])) for e in d["entities"]],
            rsu_pose=Pose.from_dict(d["rsu_pose"]),
            vehicle_spawns=[Pose.from_dict(p) for p in d["vehicle_spawns"]],
            num_steps=int(d["num_steps"]),
            seed=int(d["seed"]),
            theme=d.get("theme", "mixed"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _inside(extent, point) -> bool:
    x0, y0, x1, y1 = extent
    return x0 <= point[0] <= x1 and y0 <= point[1] <= y1


# ---------------------------------------------------------------- generation

def generate_scenario(layout_seed: int, config: ScenarioConfig | None = None,
                      scenario_id: int | None = None) -> Scenario:
    """Deterministic scenario for ``(layout_seed, config)``."""
    config = config or ScenarioConfig()
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(layout_seed) & 0xFFFFFFFFFFFFFFFF, 0xA52]))
    size = int(round(config.extent))
    extent = (0.0, 0.0, float(size), float(size))
    w = config.road_width
    half = w // 2
    if size < 2 * w + 8:
        raise ScenarioError(f"extent {size} m is too small for roads of width {w} m (need >= {2 * w + 8})")

    # road centrelines: main cross near the centre plus a few extras
    cx = size // 2 + int(rng.integers(-3, 4))
    cy = size // 2 + int(rng.integers(-3, 4))
    vertical, horizontal = [cx], [cy]
    n_extra = int(rng.integers(config.extra_roads[0], config.extra_roads[1] + 1))
    for _ in range(n_extra):
        axis = vertical if rng.random() < 0.5 else horizontal
        for _attempt in range(config.max_retries):
            c = int(rng.integers(w, size - w + 1))
            if all(abs(c - o) >= 2 * w + 4 for o in axis):
                axis.append(c)
                break
    vertical.sort()
    horizontal.sort()

    entities = []

    def add(cls_name, fp, vel=(0.0, 0.0)):
        entities.append(Entity(len(entities), cls_name, tuple(float(v) for v in fp),
                               tuple(float(v) for v in vel)))

    add("ground", extent)
    for c in vertical:
        add("road", (c - half, 0, c - half + w, size))
    for c in horizontal:
        add("road", (0, c - half, size, c - half + w))

    # lots between roads
    xs = _intervals(vertical, half, w, size)
    ys = _intervals(horizontal, half, w, size)
    p_lot = np.array(THEMES[config.theme], dtype=float)
    for (ax0, ax1) in xs:
        for (ay0, ay1) in ys:
            for lot in _split_lot(rng, ax0, ay0, ax1, ay1):
                kind = ("building", "vegetation", "ground")[int(rng.choice(3, p=p_lot))]
                if kind == "ground":
                    continue
                inset = 1 if kind == "building" else int(rng.integers(0, 2))
                x0, y0, x1, y1 = lot
                x0, y0, x1, y1 = x0 + inset, y0 + inset, x1 - inset, y1 - inset
                if x1 - x0 >= 2 and y1 - y0 >= 2:
                    add(kind, (x0, y0, x1, y1))

    road_cells = _road_slots(vertical, horizontal, half, w, size)
    blocked = [e.footprint for e in entities if e.cls == "building"]

    # traffic moves along its road
    for k in range(config.n_traffic):
        for _attempt in range(config.max_retries):
            axis, c, pos = road_cells[int(rng.integers(len(road_cells)))]
            speed = float(rng.choice([-1.0, 1.0]))
            lane = c - half + (1 if speed > 0 else w - 3)
            if axis == "v":
                fp = (lane, pos, lane + 2, pos + 4)
                vel = (0.0, speed)
            else:
                fp = (pos, lane, pos + 4, lane + 2)
                vel = (speed, 0.0)
            if _within(fp, extent):
                add("vehicle", fp, vel)
                break
        else:
            raise ScenarioError(f"could not place traffic vehicle {k} on a road")

    for k in range(config.n_pedestrians):
        for _attempt in range(config.max_retries):
            x = int(rng.integers(0, size))
            y = int(rng.integers(0, size))
            fp = (x, y, x + 1, y + 1)
            if not any(_overlap(fp, b) for b in blocked):
                vel = [(0.5, 0.0), (-0.5, 0.0), (0.0, 0.5), (0.0, -0.5)][int(rng.integers(4))]
                add("pedestrian", fp, vel)
                break
        else:
            raise ScenarioError(f"could not place pedestrian {k} outside buildings")

    rsu_pose = Pose.from_angle(float(cx), float(cy), 0.0)

    spawns = []
    taken = {(cx, cy)}
    near = [rc for rc in road_cells
            if np.hypot(*(np.subtract((rc[1], rc[2]) if rc[0] == "v" else (rc[2], rc[1]), (cx, cy))))
            <= config.spawn_radius]
    for k in range(config.n_agents):
        for _attempt in range(config.max_retries):
            if not near:
                break
            axis, c, pos = near[int(rng.integers(len(near)))]
            heading = float(rng.choice([0.0, np.pi])) + (np.pi / 2 if axis == "v" else 0.0)
            pt = (c, pos) if axis == "v" else (pos, c)
            if pt in taken or not (2 <= pt[0] <= size - 2 and 2 <= pt[1] <= size - 2):
                continue
            taken.add(pt)
            spawns.append(Pose.from_angle(float(pt[0]), float(pt[1]), heading))
            break
        else:
            raise ScenarioError(f"could not place connected vehicle {k} on a free road slot")

    sid = int(layout_seed) if scenario_id is None else int(scenario_id)
    return Scenario(sid, extent, entities, rsu_pose, spawns, config.num_steps,
                    int(layout_seed), config.theme)


def _intervals(centres, half, w, size):
    """Free stretches along one axis between roads."""
    out, start = [], 0
    for c in centres:
        lo = c - half
        if lo - start >= 3:
            out.append((start, lo))
        start = lo + w
    if size - start >= 3:
        out.append((start, size))
    return out


def _split_lot(rng, x0, y0, x1, y1):
    lots = [(x0, y0, x1, y1)]
    out = []
    while lots:
        a = lots.pop()
        ax0, ay0, ax1, ay1 = a
        wide, tall = ax1 - ax0, ay1 - ay0
        if max(wide, tall) >= 12 and rng.random() < 0.7:
            if wide >= tall:
                m = int(rng.integers(ax0 + 5, ax1 - 4))
                lots += [(ax0, ay0, m, ay1), (m, ay0, ax1, ay1)]
            else:
                m = int(rng.integers(ay0 + 5, ay1 - 4))
                lots += [(ax0, ay0, ax1, m), (ax0, m, ax1, ay1)]
        else:
            out.append(a)
    return sorted(out)


def _road_slots(vertical, horizontal, half, w, size):
    slots = []
    for c in vertical:
        slots += [("v", c, p) for p in range(0, size - 3)]
    for c in horizontal:
        slots += [("h", c, p) for p in range(0, size - 3)]
    return slots


def _within(fp, extent):
    return fp[0] >= extent[0] and fp[1] >= extent[1] and fp[2] <= extent[2] and fp[3] <= extent[3]


def _overlap(a, b):
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


# ---------------------------------------------------------------- dynamics

def _reflect(x, lo, hi):
    """Position and direction sign of a point bouncing inside [lo, hi]."""
    span = hi - lo
    if span <= 0:
        return lo, 1.0
    u = np.mod(x - lo, 2 * span)
    if u <= span:
        return lo + u, 1.0
    return lo + 2 * span - u, -1.0


def step_scenario(s: Scenario, t: int) -> list:
    """Entities at step ``t``; a pure function of ``(s, t)``."""
    if not 0 <= t < s.num_steps:
        raise IndexError(f"step {t} outside [0, {s.num_steps})")
    ex0, ey0, ex1, ey1 = s.extent
    out = []
    for e in s.entities:
        vx, vy = e.velocity
        if vx == 0.0 and vy == 0.0:
            out.append(e)
            continue
        x0, y0, x1, y1 = e.footprint
        w, h = x1 - x0, y1 - y0
        nx, sx = _reflect(x0 + t * vx, ex0, ex1 - w)
        ny, sy = _reflect(y0 + t * vy, ey0, ey1 - h)
        out.append(replace(e, footprint=(float(nx), float(ny), float(nx + w), float(ny + h)),
                           velocity=(vx * sx, vy * sy)))
    return out


# ---------------------------------------------------------------- rasterization

@dataclass
class GridSpec:
    height: int = 32
    width: int = 32
    cell_size: float = 1.0


@dataclass
class BevGrid:
    data: np.ndarray  # (H, W, C_in) in [0, 1]
    cell_size: float
    origin_pose: Pose

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


@dataclass
class GroundTruth:
    seg_labels: np.ndarray  # (H, W) int labels in [0, NUM_LABELS)
    boxes: list  # [(label, (x0, y0, x1, y1))] in grid coordinates (x = column, y = row)


def cell_centers(spec: GridSpec) -> np.ndarray:
    """Local (x, y) of every cell centre, shape (H, W, 2)."""
    cols = (np.arange(spec.width) - spec.width / 2 + 0.5) * spec.cell_size
    rows = (np.arange(spec.height) - spec.height / 2 + 0.5) * spec.cell_size
    xx, yy = np.meshgrid(cols, rows)
    return np.stack([xx, yy], axis=-1)


def _label_map(entities, pts):
    labels = np.zeros(pts.shape[:-1], dtype=np.int64)
    order = {c: k for k, c in enumerate(DRAW_ORDER)}
    for e in sorted(entities, key=lambda e: (order[e.cls], e.id)):
        x0, y0, x1, y1 = e.footprint
        inside = (pts[..., 0] >= x0) & (pts[..., 0] < x1) & (pts[..., 1] >= y0) & (pts[..., 1] < y1)
        labels[inside] = LABEL[e.cls]
    return labels


def _visibility(s: Scenario, observer: Pose, spec: GridSpec, pts_global) -> np.ndarray:
    """Cells not shadowed by a nearer building cell; cached per observer."""
    key = ("vis", observer.position.tobytes(), observer.rotation.tobytes(),
           spec.height, spec.width, spec.cell_size)
    if key in s._cache:
        return s._cache[key]
    H, W, cs = spec.height, spec.width, spec.cell_size
    building = _label_map([e for e in s.entities if e.cls == "building"], pts_global) > 0
    local = cell_centers(spec).reshape(-1, 2)
    # samples strictly before the target cell along the ray from the observer
    fr = np.linspace(0.0, 1.0, 4 * max(H, W) + 1)[None, :, None]
    samples = local[:, None, :] * fr
    ci = np.floor(samples[..., 0] / cs + W / 2).astype(np.int64)
    ri = np.floor(samples[..., 1] / cs + H / 2).astype(np.int64)
    tgt_c = np.arange(H * W) % W
    tgt_r = np.arange(H * W) // W
    own = (ci == tgt_c[:, None]) & (ri == tgt_r[:, None])
    valid = (ci >= 0) & (ci < W) & (ri >= 0) & (ri < H) & ~own
    hit = np.zeros_like(valid)
    hit[valid] = building[ri[valid], ci[valid]]
    vis = ~hit.any(axis=1)
    vis = vis.reshape(H, W)
    s._cache[key] = vis
    return vis


def rasterize(s: Scenario, t: int, observer: Pose, sensing_range: float,
              occlusion: bool = True, spec: GridSpec | None = None):
    """Observer-centred BEV grid (partial) and ground truth (complete)."""
    spec = spec or GridSpec()
    if not _inside(s.extent, observer.position):
        raise ValueError("observer must lie inside the scenario extent")
    entities = step_scenario(s, t)
    local = cell_centers(spec)
    pts = observer.to_global(local)
    labels = _label_map(entities, pts)

    visible = np.linalg.norm(local, axis=-1) <= sensing_range
    if occlusion:
        visible &= _visibility(s, observer, spec, pts)
    onehot = np.zeros(labels.shape + (NUM_INPUT_CHANNELS,))
    r, c = np.nonzero((labels > 0) & visible)
    onehot[r, c, labels[r, c] - 1] = 1.0
    grid = BevGrid(onehot, spec.cell_size, observer)

    boxes = []
    for e in entities:
        if e.cls != "vehicle":
            continue
        x0, y0, x1, y1 = e.footprint
        corners = observer.to_local(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]))
        u = corners[:, 0] / spec.cell_size + spec.width / 2
        v = corners[:, 1] / spec.cell_size + spec.height / 2
        bx0, bx1 = max(u.min(), 0.0), min(u.max(), float(spec.width))
        by0, by1 = max(v.min(), 0.0), min(v.max(), float(spec.height))
        if bx1 > bx0 and by1 > by0:
            boxes.append((LABEL["vehicle"], (float(bx0), float(by0), float(bx1), float(by1))))
    return grid, GroundTruth(labels, boxes)


# ---------------------------------------------------------------- frames

@dataclass
class Frame:
    """All agents' observations at one step. Agent 0 is the RSU; labels/boxes are per vehicle."""

    scenario_id: int
    t: int
    grids: np.ndarray  # (A, H, W, C_in)
    poses: list  # A poses
    labels: np.ndarray  # (N, H, W)
    boxes: list  # N lists of (label, box)
    cell_size: float = 1.0
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def num_vehicles(self) -> int:
        return len(self.poses) - 1

    def to_arrays(self) -> dict:
        """Flat array form used for on-disk persistence."""
        nb = [len(b) for b in self.boxes]
        flat = [list(box) + [lab] for bl in self.boxes for lab, box in bl]
        return {
            "meta": np.array([self.scenario_id, self.t], dtype=np.int64),
            "cell_size": np.array([self.cell_size]),
            "grids": self.grids,
            "positions": np.array([p.position for p in self.poses]),
            "rotations": np.array([p.rotation for p in self.poses]),
            "labels": self.labels,
            "box_counts": np.array(nb, dtype=np.int64),
            "boxes": np.array(flat, dtype=float).reshape(-1, 5),
        }

    @classmethod
    def from_arrays(cls, a: dict) -> "Frame":
        poses = [Pose(p, r) for p, r in zip(a["positions"], a["rotations"])]
        boxes, k = [], 0
        for n in a["box_counts"]:
            rows = a["boxes"][k:k + n]
            boxes.append([(int(r[4]), tuple(float(v) for v in r[:4])) for r in rows])
            k += n
        sid, t = (int(v) for v in a["meta"])
        return cls(sid, t, np.asarray(a["grids"], dtype=float), poses,
                   np.asarray(a["labels"], dtype=np.int64), boxes, float(a["cell_size"][0]))


def make_frame(s: Scenario, t: int, spec: GridSpec | None = None, vehicle_range: float = 8.0,
               rsu_range: float = 22.0, occlusion: bool = True) -> Frame:
    spec = spec or GridSpec()
    grids, labels, boxes = [], [], []
    for k, pose in enumerate(s.agent_poses()):
        grid, gt = rasterize(s, t, pose, rsu_range if k == 0 else vehicle_range, occlusion, spec)
        grids.append(grid.data)
        if k > 0:
            labels.append(gt.seg_labels)
            boxes.append(gt.boxes)
    return Frame(s.id, t, np.stack(grids), s.agent_poses(), np.stack(labels), boxes, spec.cell_size)


def scenario_frames(s: Scenario, spec: GridSpec | None = None, vehicle_range: float = 8.0,
                    rsu_range: float = 22.0, occlusion: bool = True) -> list:
    return [make_frame(s, t, spec, vehicle_range, rsu_range, occlusion) for t in range(s.num_steps)]
