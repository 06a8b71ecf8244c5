"""Sample-quality and trajectory-deviation metrics shared by the harness and error lab."""
from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist


def _mean_pairwise(X, Y, chunk: int) -> float:
    total = 0.0
    for i in range(0, len(X), chunk):
        total += float(np.sum(cdist(X[i: i + chunk], Y)))
    return total / (len(X) * len(Y))


def energy_distance(X, Y, chunk: int = 1024) -> float:
    """V-statistic 2 E|x - y| - E|x - x'| - E|y - y'| over all pairs."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if len(X) == 0 or len(Y) == 0:
        raise ValueError("sample sets must be non-empty")
    return 2 * _mean_pairwise(X, Y, chunk) - _mean_pairwise(X, X, chunk) - _mean_pairwise(Y, Y, chunk)


def state_mse(a, b) -> float:
    """Mean over chains of ||a - b||^2 / dim."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.sum((a - b) ** 2, axis=-1)) / a.shape[-1])


def trajectory_mse(fp, q):
    """Per-step state MSE between two trajectories on the same grid.

    Returns (per_step array, endpoint value). Normalization is per
    coordinate, so a constant offset c in every coordinate gives c^2.
    """
    if len(fp.times) != len(q.times) or not np.array_equal(fp.times, q.times):
        raise ValueError("trajectories were sampled on different grids")
    per_step = np.array([state_mse(a, b) for a, b in zip(fp.states, q.states)])
    return per_step, float(per_step[-1])
