"""Agent poses and rigid 2-D transforms.

Convention: ``Pose.rotation`` maps global-frame vectors into the agent frame,
so a global point ``g`` has local coordinates ``R @ (g - p)`` and a local point
``q`` lies at ``p + R.T @ q`` in the global frame. Agent index 0 is the RSU.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_TOL = 1e-9


class PoseError(ValueError):
    """Raised for non-finite positions or non-orthonormal rotations."""


def rotation_matrix(angle: float) -> np.ndarray:
    """Counter-clockwise rotation by ``angle`` radians.

    Multiples of pi/2 are snapped to exact integers so that grid warps are exact.
    """
    quarter = angle / (math.pi / 2)
    if abs(quarter - round(quarter)) < 1e-12:
        k = int(round(quarter)) % 4
        c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][k]
    else:
        c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]], dtype=float)


@dataclass(frozen=True, eq=False)
class Pose:
    position: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(2)
        r = np.asarray(self.rotation, dtype=float).reshape(2, 2)
        if not np.all(np.isfinite(p)):
            raise PoseError(f"position must be finite, got {p}")
        if not np.all(np.isfinite(r)):
            raise PoseError("rotation must be finite")
        if np.max(np.abs(r.T @ r - np.eye(2))) > _TOL:
            raise PoseError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _TOL:
            raise PoseError("rotation must have determinant +1")
        p.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "rotation", r)

    @classmethod
    def from_angle(cls, x: float, y: float, angle: float = 0.0) -> "Pose":
        return cls(np.array([x, y], dtype=float), rotation_matrix(angle))

    @property
    def angle(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def to_local(self, points: np.ndarray) -> np.ndarray:
        """Global points (..., 2) expressed in this agent's frame."""
        return (np.asarray(points, dtype=float) - self.position) @ self.rotation.T

    def to_global(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation + self.position

    def rotated(self, angle: float) -> "Pose":
        """Same position, frame rotated by an extra ``angle``."""
        return Pose(self.position, rotation_matrix(angle) @ self.rotation)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.position, other.position)
                    and np.array_equal(self.rotation, other.rotation))

    def __hash__(self):
        return hash((self.position.tobytes(), self.rotation.tobytes()))

    def to_dict(self) -> dict:
        return {"position": self.position.tolist(), "rotation": self.rotation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.array(d["position"], dtype=float), np.array(d["rotation"], dtype=float))


def transform_to_agent_frame(rsu: Pose, vehicle: Pose) -> np.ndarray:
    """RSU position relative to ``vehicle``: ``R_i R_0^T (p_0 - p_i)``."""
    return vehicle.rotation @ rsu.rotation.T @ (rsu.position - vehicle.position)


def inverse_transform(rsu: Pose, vehicle: Pose, relative: np.ndarray) -> np.ndarray:
    """Undo :func:`transform_to_agent_frame`, recovering the RSU's global position."""
    return rsu.rotation @ vehicle.rotation.T @ np.asarray(relative, dtype=float) + vehicle.position


def rsu_vehicle_distance(rsu: Pose, vehicle: Pose) -> float:
    """Global Euclidean RSU-vehicle distance; independent of both rotations."""
    return float(np.linalg.norm(rsu.position - vehicle.position))
