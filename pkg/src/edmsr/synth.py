"""Synthetic head-like volumes for desk-scale experiments.

Each volume is a soft-edged ellipsoid of "tissue" holding a sum of
random Gaussian blobs, wrapped in a brighter ellipsoidal shell standing
in for the skull, on a dark background.  Intensities are in an
arbitrary raw scale (roughly 0-1000).
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


def _ellipsoid_distance(grid, center, radii):
    r = np.sqrt(sum(((g - c) / rad) ** 2 for g, c, rad in zip(grid, center, radii)))
    # approximate signed distance in voxels
    return (r - 1.0) * min(radii)


def synth_volume(dims=(16, 32, 32), rng: np.random.Generator | None = None, n_blobs: int = 24) -> np.ndarray:
    rng = rng or np.random.default_rng()
    D, H, W = dims
    grid = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij")
    center = np.array([D, H, W]) / 2 - 0.5 + rng.uniform(-0.5, 0.5, 3)
    radii = np.array([D, H, W]) * rng.uniform(0.36, 0.44, 3)
    dist = _ellipsoid_distance(grid, center, radii)
    inside = expit(-dist / 0.35)
    shell_t = rng.uniform(1.0, 1.8)
    shell = expit(-(np.abs(dist + shell_t / 2) - shell_t / 2) / 0.35)
    tissue = np.full(dims, 0.45)
    for _ in range(n_blobs):
        c = center + rng.uniform(-1, 1, 3) * radii * 0.8
        s = rng.uniform(0.8, 3.0, 3)
        amp = rng.uniform(-0.35, 0.45)
        tissue += amp * np.exp(-0.5 * sum(((g - ci) / si) ** 2 for g, ci, si in zip(grid, c, s)))
    vol = inside * np.clip(tissue, 0.05, None) * (1 - shell) + shell * 1.0
    return 1000.0 * np.clip(vol, 0.0, None)
