"""Synthetic skull-stripped volumes with a few labeled geometric structures.

Used by the desk-scale learning test and the demo commands. Each class keeps
a fixed home position (jittered per volume), and one class is a thin rim along
the mask boundary, so that location and boundary context mean the same thing
across volumes, as they do for real anatomy.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .patches import SubjectData, normalize_intensity
from .spectral import solve_spectral

TISSUE = 100.0
RIM_WIDTH = 3
# class index -> (mean intensity, shape kind, home octant)
STRUCTURES = {1: (170.0, "sphere", (-1, -1, -1)), 2: (215.0, "box", (1, 1, -1)),
              3: (45.0, "ellipsoid", (-1, 1, 1)), 4: (145.0, "rim", None)}


def make_volume(seed: int, shape=(64, 64, 64), noise: float = 6.0):
    """Return (uint8 intensity, uint8 labels, bool mask)."""
    rng = np.random.default_rng(seed)
    grid = np.indices(shape).astype(np.float64)
    size = np.array(shape, float)
    centre = size[:, None, None, None] / 2.0
    radii = size[:, None, None, None] * rng.uniform(0.42, 0.47, (3, 1, 1, 1))
    mask = (((grid - centre) / radii) ** 2).sum(axis=0) < 1.0
    inner = ndimage.binary_erosion(mask, iterations=RIM_WIDTH)

    labels = np.zeros(shape, np.uint8)
    for cls, (_, kind, home) in STRUCTURES.items():
        if kind == "rim":
            region = mask & ~inner
        else:
            c = size / 2 + np.array(home) * size * rng.uniform(0.12, 0.15, 3)
            r = size * rng.uniform(0.08, 0.11, 3)
            d = (grid - c[:, None, None, None]) / r[:, None, None, None]
            if kind == "sphere":
                region = ((grid - c[:, None, None, None]) ** 2).sum(axis=0) < r.mean() ** 2
            elif kind == "box":
                region = np.all(np.abs(d) < 0.85, axis=0)
            else:
                region = (d ** 2).sum(axis=0) < 1.0
            region &= inner
        labels[region] = cls

    intensity = np.where(mask, TISSUE, 0.0)
    for cls, (mean, _, _) in STRUCTURES.items():
        intensity[labels == cls] = mean
    # smooth multiplicative bias field plus voxel noise
    bias = 1.0 + 0.05 * np.sin(grid[0] / shape[0] * np.pi * rng.uniform(0.5, 1.5))
    intensity = intensity * bias + rng.normal(0.0, noise, shape) * mask
    intensity = np.clip(np.where(mask, intensity, 0.0), 0, 255).round().astype(np.uint8)
    return intensity, labels, mask


def make_subject(seed: int, shape=(64, 64, 64), name: str | None = None) -> SubjectData:
    intensity, labels, mask = make_volume(seed, shape)
    coords = solve_spectral(mask).volumes()
    return SubjectData(name or f"synthetic{seed}", normalize_intensity(intensity), labels,
                       coords, mask)
