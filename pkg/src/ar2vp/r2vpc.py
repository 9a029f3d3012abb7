"""Road-to-vehicle perception compensation.

A vehicle's decoded map is topped up with the RSU's decoded map when their
Pearson correlation falls below a threshold::

    M_c = M_d                         if r >= threshold
    M_c = (threshold - r) * M_0 + M_d otherwise

The correlation and the gate are decisions, not differentiable quantities.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CompensationConfig:
    threshold: float = 0.5

    def __post_init__(self):
        if not np.isfinite(self.threshold) or not -1.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be finite and in [-1, 1], got {self.threshold}")


def flatten(m) -> np.ndarray:
    """Row-major flattening of an (H, W, C) map."""
    return np.asarray(m, dtype=float).reshape(-1)


def similarity_ratio(rsu_flat, veh_flat) -> float:
    """Pearson correlation; 0 if either vector is constant."""
    a = np.asarray(rsu_flat, dtype=float).ravel()
    b = np.asarray(veh_flat, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least two elements")
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.linalg.norm(da), np.linalg.norm(db)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(da @ db / (na * nb), -1.0, 1.0))


def coefficient(r: float, cfg: CompensationConfig) -> float:
    """Weight given to the RSU map; zero when the gate keeps the vehicle map."""
    return 0.0 if r >= cfg.threshold else cfg.threshold - r


def compensate(veh_dec, rsu_dec, r: float, cfg: CompensationConfig) -> np.ndarray:
    veh = np.asarray(veh_dec, dtype=float)
    rsu = np.asarray(rsu_dec, dtype=float)
    if veh.shape != rsu.shape:
        raise ValueError(f"shape mismatch: {veh.shape} vs {rsu.shape}")
    if r >= cfg.threshold:
        return veh
    return (cfg.threshold - r) * rsu + veh


def compensate_backward(dout, r: float, cfg: CompensationConfig):
    """Gradients w.r.t. (vehicle map, RSU map)."""
    return dout, coefficient(r, cfg) * dout
