"""Dynamic perception representing: collaborative graph and feature aggregation.

Edge weight from vehicle j to destination i::

    xi[j][i] = max(0, g(d_j) * cos(M_i, M_j)) / sum_k max(0, g(d_k) * cos(M_i, M_k))

with g(d) = d ("raw", as printed) or 1/max(d, 1 m) ("inverse"). The RSU enters
every destination with the fixed weight 1/N. Weights are constants for
backpropagation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SELF_MODES = ("include", "exclude")
DISTANCE_MODES = ("raw", "inverse")
_MIN_INVERSE_DISTANCE = 1.0


@dataclass
class CollabGraph:
    num_vehicles: int
    distances: np.ndarray  # (N,)
    edge_weights: np.ndarray  # (N, N); [j, i] is the weight of j -> i
    rsu_weight: float

    def column(self, i: int) -> np.ndarray:
        return self.edge_weights[:, i]


def cosine_similarity(a, b) -> float:
    """Cosine of the flattened maps; 0 when either map has zero norm."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def distance_factor(distances, mode: str = "raw") -> np.ndarray:
    d = np.asarray(distances, dtype=float)
    if mode == "raw":
        return d
    if mode == "inverse":
        return 1.0 / np.maximum(d, _MIN_INVERSE_DISTANCE)
    raise ValueError(f"distance mode must be one of {DISTANCE_MODES}, got {mode!r}")


def weights_from_cosines(cos_row, g, dest: int, self_mode: str = "include") -> np.ndarray:
    """Normalise clamped ``g_j * cos_j`` terms for one destination.

    ``cos_row[j]`` is the similarity of vehicle j to the destination; the
    destination's own entry is ignored (self counts with cos = 1 or not at all).
    If no positive term exists the weights fall back to uniform.
    """
    if self_mode not in SELF_MODES:
        raise ValueError(f"self mode must be one of {SELF_MODES}, got {self_mode!r}")
    g = np.asarray(g, dtype=float)
    n = len(g)
    terms = np.maximum(g * np.asarray(cos_row, dtype=float), 0.0)
    terms[dest] = max(0.0, g[dest]) if self_mode == "include" else 0.0
    total = terms.sum()
    if total > 0.0:
        return terms / total
    eligible = np.ones(n) if self_mode == "include" else (np.arange(n) != dest).astype(float)
    if eligible.sum() == 0.0:  # lone vehicle with self excluded
        eligible[dest] = 1.0
    return eligible / eligible.sum()


def destination_weights(features, distances, dest: int, self_mode: str = "include",
                        distance_mode: str = "raw") -> np.ndarray:
    """Incoming weights xi[:, dest] given vehicle maps expressed in the destination's frame."""
    n = len(features)
    if n == 0:
        raise ValueError("need at least one vehicle feature map")
    g = distance_factor(distances, distance_mode)
    if g.shape != (n,):
        raise ValueError(f"expected {n} distances, got {g.shape}")
    cos_row = np.array([1.0 if j == dest else cosine_similarity(features[dest], features[j])
                        for j in range(n)])
    return weights_from_cosines(cos_row, g, dest, self_mode)


def build_graph(features, distances, self_mode: str = "include",
                distance_mode: str = "raw") -> CollabGraph:
    """Graph over vehicle maps that already share a common frame."""
    features = [np.asarray(f, dtype=float) for f in features]
    n = len(features)
    if n == 0:
        raise ValueError("need at least one vehicle feature map")
    d = np.asarray(distances, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    xi = np.zeros((n, n))
    for i in range(n):
        xi[:, i] = destination_weights(features, d, i, self_mode, distance_mode)
    return CollabGraph(n, d, xi, 1.0 / n)


def aggregate(graph: CollabGraph, features, rsu_feature, i: int, use_rsu: bool = True) -> np.ndarray:
    """Fused map for destination ``i``: sum_j xi[j][i] M_j + lambda_g M_0."""
    if not 0 <= i < graph.num_vehicles:
        raise IndexError(f"destination {i} out of range for {graph.num_vehicles} vehicles")
    if len(features) != graph.num_vehicles:
        raise ValueError("feature list does not match the graph")
    out = np.zeros_like(np.asarray(features[0], dtype=float))
    for j, f in enumerate(features):
        f = np.asarray(f, dtype=float)
        if f.shape != out.shape:
            raise ValueError(f"feature {j} has shape {f.shape}, expected {out.shape}")
        out = out + graph.edge_weights[j, i] * f
    if use_rsu and rsu_feature is not None:
        m0 = np.asarray(rsu_feature, dtype=float)
        if m0.shape != out.shape:
            raise ValueError(f"RSU feature has shape {m0.shape}, expected {out.shape}")
        out = out + graph.rsu_weight * m0
    return out


def aggregate_backward(dout, graph: CollabGraph, i: int, use_rsu: bool = True):
    """Input gradients of :func:`aggregate` (weights held constant)."""
    dfeat = [graph.edge_weights[j, i] * dout for j in range(graph.num_vehicles)]
    drsu = graph.rsu_weight * dout if use_rsu else np.zeros_like(dout)
    return dfeat, drsu
