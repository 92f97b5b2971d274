"""Procedural test media: a centered cube, a horizontal slab and a fractal-noise cloud.

All media fill a grid of unit extent centered at the origin.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import zoom

from .volume_grid import DensityGrid, is_power_of_two

KINDS = ("cube", "slab", "procedural-cloud")


def _grid(values) -> DensityGrid:
    n = values.shape[0]
    return DensityGrid(values.astype(np.float32), 1.0 / n, np.full(3, -0.5))


def _coords(n):
    c = (np.arange(n) + 0.5) / n - 0.5
    return np.meshgrid(c, c, c, indexing="ij")


def cube(n: int, half_extent: float = 0.25, density: float = 1.0) -> DensityGrid:
    """Constant density inside a centered box, zero outside."""
    x, y, z = _coords(n)
    inside = (np.abs(x) < half_extent) & (np.abs(y) < half_extent) & (np.abs(z) < half_extent)
    return _grid(np.where(inside, density, 0.0))


def slab(n: int, half_thickness: float = 0.125, density: float = 1.0) -> DensityGrid:
    """Constant density in a horizontal layer ``|y| < half_thickness`` spanning the grid."""
    _, y, _ = _coords(n)
    return _grid(np.where(np.abs(y) < half_thickness, density, 0.0))


def fractal_noise(n: int, rng, octaves: int = 4, base: int = 4, persistence: float = 0.5) -> np.ndarray:
    """Sum of cubic-interpolated random lattices, doubling frequency per octave; roughly in [-1, 1]."""
    out = np.zeros((n, n, n))
    amp, total = 1.0, 0.0
    res = base
    for _ in range(octaves):
        res = min(res, n)
        lattice = rng.uniform(-1.0, 1.0, size=(res + 1,) * 3)
        up = zoom(lattice, n / (res + 1), order=3, mode="nearest", grid_mode=True)
        out += amp * up[:n, :n, :n]
        total += amp
        amp *= persistence
        res *= 2
    return out / total


def procedural_cloud(n: int, seed: int = 0, radius: float = 0.38, contrast: float = 2.5) -> DensityGrid:
    """Noise-perturbed sphere: densities in [0, 1], zero near the grid boundary."""
    rng = np.random.default_rng([int(seed), 3])
    x, y, z = _coords(n)
    r = np.sqrt(x * x + y * y + z * z) / radius
    noise = fractal_noise(n, rng)
    dens = (1.0 - r) * 1.6 + 0.8 * noise
    dens = np.clip(contrast * dens / 1.6, 0.0, 1.0)
    dens[r >= 1.25] = 0.0
    return _grid(dens)


def generate(kind: str, n: int, seed: int = 0) -> DensityGrid:
    if not is_power_of_two(n):
        raise ValueError(f"dims must be a power of two, got {n}")
    if kind == "cube":
        return cube(n)
    if kind == "slab":
        return slab(n)
    if kind == "procedural-cloud":
        return procedural_cloud(n, seed)
    raise ValueError(f"unknown medium kind {kind!r}; choose from {KINDS}")
