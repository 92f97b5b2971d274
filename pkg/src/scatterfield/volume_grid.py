"""Voxel density grids, the mean-pooled density pyramid and ray marching.

Grids are indexed ``values[x, y, z]``.  Voxel ``(i, j, k)`` covers the box
``origin + [i, i+1) * voxel_size`` (likewise for y, z) and its sample sits at
the box center.  Positions outside the grid bounding box have density 0.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VGRID_MAGIC = b"VGRD"
VGRID_VERSION = 1
# magic, version, dims[3], voxel_size, origin[3]
_HEADER = struct.Struct("<4sI3If3f")
VGRID_HEADER_SIZE = _HEADER.size


class GridFormatError(ValueError):
    """Raised for unreadable or invalid ``.vgrid`` data.

    ``code`` distinguishes the failure so callers (and the CLI) can map it
    to a message without parsing text.
    """

    code = "grid-error"

    def __init__(self, message: str):
        super().__init__(f"[{self.code}] {message}")


class MalformedHeaderError(GridFormatError):
    code = "malformed-header"


class NonPowerOfTwoError(GridFormatError):
    code = "non-power-of-two"


class NegativeDensityError(GridFormatError):
    code = "negative-density"


class NonFiniteDensityError(GridFormatError):
    code = "non-finite-density"


class TruncatedPayloadError(GridFormatError):
    code = "truncated-payload"


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _check_values(values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteDensityError("density contains NaN or infinite values")
    if np.any(values < 0):
        raise NegativeDensityError(f"density minimum {values.min()} is negative")


@dataclass(frozen=True)
class DensityGrid:
    values: np.ndarray
    voxel_size: float = 1.0
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float32, order="C")
        if values.ndim != 3:
            raise MalformedHeaderError(f"expected 3D values, got shape {values.shape}")
        if not all(is_power_of_two(d) for d in values.shape):
            raise NonPowerOfTwoError(f"dims {values.shape} are not powers of two")
        _check_values(values)
        if not (self.voxel_size > 0 and math.isfinite(self.voxel_size)):
            raise MalformedHeaderError(f"voxel_size must be positive, got {self.voxel_size}")
        values.setflags(write=False)
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        origin.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def bbox_min(self) -> np.ndarray:
        return self.origin.copy()

    @property
    def bbox_max(self) -> np.ndarray:
        return self.origin + np.asarray(self.dims) * self.voxel_size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.bbox_min + self.bbox_max)

    def voxel_centers(self, index: np.ndarray) -> np.ndarray:
        """World positions of voxel centers for integer indices ``(N, 3)``."""
        return self.origin + (np.asarray(index, dtype=np.float64) + 0.5) * self.voxel_size


def save_density(grid: DensityGrid, path: str | Path) -> None:
    nx, ny, nz = grid.dims
    header = _HEADER.pack(VGRID_MAGIC, VGRID_VERSION, nx, ny, nz,
                          grid.voxel_size, *grid.origin.astype(np.float32))
    # file order is x-fastest, i.e. C order of values[z, y, x]
    payload = np.ascontiguousarray(grid.values.transpose(2, 1, 0), dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_density(path: str | Path) -> DensityGrid:
    data = Path(path).read_bytes()
    if len(data) < VGRID_HEADER_SIZE:
        raise MalformedHeaderError(f"file is {len(data)} bytes, shorter than the header")
    magic, version, nx, ny, nz, voxel_size, ox, oy, oz = _HEADER.unpack_from(data)
    if magic != VGRID_MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}")
    if version != VGRID_VERSION:
        raise MalformedHeaderError(f"unsupported version {version}")
    if min(nx, ny, nz) < 1:
        raise MalformedHeaderError(f"zero dimension in {(nx, ny, nz)}")
    if not all(is_power_of_two(d) for d in (nx, ny, nz)):
        raise NonPowerOfTwoError(f"dims {(nx, ny, nz)} are not powers of two")
    if not (voxel_size > 0 and math.isfinite(voxel_size)):
        raise MalformedHeaderError(f"voxel_size must be positive, got {voxel_size}")
    expected = nx * ny * nz * 4
    payload = data[VGRID_HEADER_SIZE:]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise MalformedHeaderError(f"{len(payload) - expected} trailing bytes after payload")
    values = np.frombuffer(payload, dtype="<f4").reshape(nz, ny, nx).transpose(2, 1, 0)
    _check_values(values)
    return DensityGrid(values, voxel_size, np.array([ox, oy, oz], dtype=np.float32).astype(np.float64))


@dataclass(frozen=True)
class DensityPyramid:
    levels: tuple[DensityGrid, ...]

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i: int) -> DensityGrid:
        return self.levels[i]


def _pool(values: np.ndarray) -> np.ndarray:
    out = values.astype(np.float64)
    for axis in range(3):
        if out.shape[axis] > 1:
            shape = list(out.shape)
            shape[axis : axis + 1] = [shape[axis] // 2, 2]
            out = out.reshape(shape).mean(axis=axis + 1)
    return out


def build_pyramid(grid: DensityGrid) -> DensityPyramid:
    """Halve every axis by 8-child averaging until the grid is 1x1x1."""
    if not all(is_power_of_two(d) for d in grid.dims):
        raise NonPowerOfTwoError(f"dims {grid.dims} are not powers of two")
    levels = [grid]
    # pooling accumulates in float64 from the finest level to limit drift
    acc = grid.values.astype(np.float64)
    size = grid.voxel_size
    while max(acc.shape) > 1:
        acc = _pool(acc)
        size *= 2.0
        levels.append(DensityGrid(acc.astype(np.float32), size, grid.origin))
    return DensityPyramid(tuple(levels))


def pyramid_level_count(dims) -> int:
    return int(round(math.log2(max(dims)))) + 1


def sample_trilinear(grid: DensityGrid, points) -> np.ndarray:
    """Trilinear density at world positions ``(..., 3)``.

    Between the outermost voxel centers and the bounding box the edge value
    is held; outside the bounding box the result is 0.
    """
    return trilinear_field(grid.values, grid.origin, grid.voxel_size, points, outside=0.0)


def trilinear_field(values, origin, voxel_size, points, outside=0.0) -> np.ndarray:
    """Trilinear lookup in any voxel array laid out like a :class:`DensityGrid`."""
    pts = np.asarray(points, dtype=np.float64)
    shape = pts.shape[:-1]
    pts = pts.reshape(-1, 3)
    dims = np.asarray(values.shape)
    u = (pts - origin) / voxel_size
    inside = np.all((u >= 0) & (u <= dims), axis=1)
    c = u - 0.5
    i0 = np.floor(c).astype(np.int64)
    t = c - i0
    i1 = np.clip(np.minimum(i0 + 1, dims - 1), 0, None)
    i0 = np.clip(i0, 0, dims - 1)
    v = values
    x0, y0, z0 = i0.T
    x1, y1, z1 = i1.T
    tx, ty, tz = t.T
    c00 = v[x0, y0, z0] * (1 - tx) + v[x1, y0, z0] * tx
    c10 = v[x0, y1, z0] * (1 - tx) + v[x1, y1, z0] * tx
    c01 = v[x0, y0, z1] * (1 - tx) + v[x1, y0, z1] * tx
    c11 = v[x0, y1, z1] * (1 - tx) + v[x1, y1, z1] * tx
    c0 = c00 * (1 - ty) + c10 * ty
    c1 = c01 * (1 - ty) + c11 * ty
    out = c0 * (1 - tz) + c1 * tz
    out = np.where(inside, out, outside)
    return out.reshape(shape)


def default_step(grid: DensityGrid) -> float:
    return 0.5 * grid.voxel_size


def optical_depth(grid: DensityGrid, p, q, step: float | None = None) -> float:
    """Midpoint-rule integral of density along the segment ``p -> q``.

    The segment is split into ``ceil(length / step)`` equal pieces.
    """
    if step is None:
        step = default_step(grid)
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    length = float(np.linalg.norm(q - p))
    if length == 0.0:
        return 0.0
    n = max(1, math.ceil(length / step - 1e-9))
    h = length / n
    s = (np.arange(n) + 0.5) / n
    pts = p + s[:, None] * (q - p)
    return float(sample_trilinear(grid, pts).sum() * h)


def ray_box(origin, direction, bmin, bmax):
    """Slab test; returns ``(t_near, t_far)`` with ``t_far < t_near`` on a miss."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (bmin - o) * inv
        t1 = (bmax - o) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    return float(np.max(lo)), float(np.min(hi))


class MaterialClass(str, enum.Enum):
    AIR = "Air"
    GAS = "Gas"
    SOLID_LIQUID = "SolidLiquid"
    SKIN = "Skin"


# inclusive albedo range per material class
ALBEDO_RANGES = {
    MaterialClass.AIR: (0.0, 1.0),
    MaterialClass.GAS: (0.0, 0.5),
    MaterialClass.SOLID_LIQUID: (0.5, 1.0),
    MaterialClass.SKIN: (0.5, 1.0),
}


@dataclass(frozen=True)
class MediumProperties:
    """Homogeneous optical properties; ``mu_t = sigma_t_scale * density``."""

    sigma_t_scale: tuple[float, float, float]
    albedo: tuple[float, float, float]
    material_class: MaterialClass = MaterialClass.GAS

    def __post_init__(self):
        sigma = tuple(float(s) for s in np.broadcast_to(self.sigma_t_scale, 3))
        albedo = tuple(float(a) for a in np.broadcast_to(self.albedo, 3))
        mclass = MaterialClass(self.material_class)
        if any(not (s > 0 and math.isfinite(s)) for s in sigma):
            raise ValueError(f"sigma_t_scale must be positive, got {sigma}")
        if any(not (0 <= a < 1) for a in albedo):
            raise ValueError(f"albedo components must be in [0, 1), got {albedo}")
        lo, hi = ALBEDO_RANGES[mclass]
        if any(not (lo <= a <= hi) for a in albedo):
            raise ValueError(f"albedo {albedo} outside [{lo}, {hi}] for {mclass.value}")
        object.__setattr__(self, "sigma_t_scale", sigma)
        object.__setattr__(self, "albedo", albedo)
        object.__setattr__(self, "material_class", mclass)

    @property
    def sigma_s_scale(self) -> np.ndarray:
        return np.asarray(self.albedo) * np.asarray(self.sigma_t_scale)

    @property
    def sigma_a_scale(self) -> np.ndarray:
        return (1.0 - np.asarray(self.albedo)) * np.asarray(self.sigma_t_scale)

    @property
    def mean_free_path(self) -> np.ndarray:
        """Mean free path at unit density, ``1 / mu_t`` per channel."""
        return 1.0 / np.asarray(self.sigma_t_scale)
