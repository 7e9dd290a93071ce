"""Sample-based distribution distances."""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError


def random_directions(dim: int, n_projections: int, rng: np.random.Generator) -> np.ndarray:
    dirs = rng.standard_normal((n_projections, dim))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def sliced_wasserstein(a: np.ndarray, b: np.ndarray, n_projections: int = 64,
                       rng: np.random.Generator | None = None, directions: np.ndarray | None = None) -> float:
    """Sliced 2-Wasserstein distance between two equal-size sample sets.

    Each 1-D slice is solved exactly by sorting; returns the square root of the
    mean squared slice distance.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ArgumentError(f"sample sets must have equal shape, got {a.shape} and {b.shape}")
    if directions is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        directions = random_directions(a.shape[1], n_projections, rng)
    pa = np.sort(a @ directions.T, axis=0)
    pb = np.sort(b @ directions.T, axis=0)
    return float(np.sqrt(np.mean((pa - pb) ** 2)))
