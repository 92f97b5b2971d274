"""Graded transmittance fields, the transmittance combiner and per-template feature tables.

Feature blocks hold three columns per template point, in this order:
density, transmittance feature, phase feature.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from . import nn
from .phase import VolumePhaseTable, subtended_half_angle
from .scene import DistantLight, Medium, normalize
from .templates import SamplingTemplate, TemplateKind, light_frame
from .volume_grid import DensityGrid, DensityPyramid, build_pyramid, sample_trilinear, trilinear_field

DEFAULT_LAMBDA = 0.6
FEATURE_COLUMNS = ("density", "transmittance", "phase")


@dataclass(frozen=True)
class GradedTransmittanceField:
    level: int
    values: np.ndarray
    light_dir: np.ndarray
    grid: DensityGrid  # the level's density grid (geometry of ``values``)


def graded_transmittance(pyramid: DensityPyramid, level: int, light, lam: float = DEFAULT_LAMBDA,
                         step: float | None = None) -> GradedTransmittanceField:
    """Per-voxel ``exp(-lam^(level+1) * integral of rho_level)`` toward the light.

    The integral runs from each voxel center to where the ray toward the
    light source leaves the grid.
    """
    if not 0 <= level < len(pyramid):
        raise ValueError(f"level {level} outside 0..{len(pyramid) - 1}")
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must be in (0, 1), got {lam}")
    grid = pyramid[level]
    l = normalize(np.asarray(getattr(light, "direction", light), dtype=np.float64))
    if step is None:
        step = 0.5 * grid.voxel_size
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in grid.dims], indexing="ij"), axis=-1).reshape(-1, 3)
    centers = grid.voxel_centers(idx)
    depth = np.empty(len(centers))
    K.boundary_depth_batch(grid.values, grid.origin, grid.voxel_size, grid.bbox_min, grid.bbox_max,
                           centers, -l, float(step), depth)
    values = np.exp(-(lam ** (level + 1)) * depth).reshape(grid.dims)
    values = np.clip(values, np.finfo(np.float64).tiny, 1.0)
    return GradedTransmittanceField(level, values, l, grid)


def graded_fields(pyramid: DensityPyramid, light, lam: float = DEFAULT_LAMBDA, levels=None):
    levels = range(len(pyramid)) if levels is None else levels
    return [graded_transmittance(pyramid, i, light, lam) for i in levels]


@dataclass
class CombinerWeights:
    """One 3x3x3 kernel and one mixing scalar per pyramid level."""

    kernels: np.ndarray  # (L, 3, 3, 3)
    scalars: np.ndarray  # (L,)

    @classmethod
    def identity(cls, n_levels: int) -> "CombinerWeights":
        k = np.zeros((n_levels, 3, 3, 3))
        k[:, 1, 1, 1] = 1.0
        return cls(k, np.full(n_levels, 1.0 / n_levels))

    @property
    def n_levels(self) -> int:
        return int(self.scalars.shape[0])


@dataclass(frozen=True)
class TransmittanceFeatureVolume:
    values: np.ndarray
    grid: DensityGrid  # level-0 geometry
    weights: CombinerWeights
    light_dir: np.ndarray

    def sample(self, points) -> np.ndarray:
        """Trilinear lookup; outside the grid the medium is vacuum, so 1."""
        return trilinear_field(self.values, self.grid.origin, self.grid.voxel_size, points, outside=1.0)


def upsample_weights(src: DensityGrid, dst: DensityGrid):
    """Index/weight pairs that trilinearly sample ``src`` at ``dst`` voxel centers."""
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in dst.dims], indexing="ij"), axis=-1).reshape(-1, 3)
    pts = dst.voxel_centers(idx)
    dims = np.asarray(src.dims)
    c = (pts - src.origin) / src.voxel_size - 0.5
    i0 = np.floor(c).astype(np.int64)
    t = c - i0
    i1 = np.clip(np.minimum(i0 + 1, dims - 1), 0, None)
    i0 = np.clip(i0, 0, dims - 1)
    corners, weights = [], []
    for bx in (0, 1):
        for by in (0, 1):
            for bz in (0, 1):
                ix = np.where(bx, i1[:, 0], i0[:, 0])
                iy = np.where(by, i1[:, 1], i0[:, 1])
                iz = np.where(bz, i1[:, 2], i0[:, 2])
                w = (np.where(bx, t[:, 0], 1 - t[:, 0]) * np.where(by, t[:, 1], 1 - t[:, 1])
                     * np.where(bz, t[:, 2], 1 - t[:, 2]))
                corners.append(np.ravel_multi_index((ix, iy, iz), src.dims))
                weights.append(w)
    return np.stack(corners, 1), np.stack(weights, 1)


def upsample(values, src: DensityGrid, dst: DensityGrid, cache=None):
    flat_idx, w = upsample_weights(src, dst) if cache is None else cache
    return (values.reshape(-1)[flat_idx] * w).sum(axis=1).reshape(dst.dims)


def upsample_transpose(grad, src: DensityGrid, dst: DensityGrid, cache=None):
    flat_idx, w = upsample_weights(src, dst) if cache is None else cache
    out = np.zeros(int(np.prod(src.dims)))
    np.add.at(out, flat_idx.reshape(-1), (grad.reshape(-1, 1) * w).reshape(-1))
    return out.reshape(src.dims)


def combine_transmittance(fields, weights: CombinerWeights | None = None) -> TransmittanceFeatureVolume:
    """Convolve each level, upsample it to level 0 and sum with the level scalars."""
    fields = list(fields)
    if not fields:
        raise ValueError("no fields to combine")
    l0 = fields[0].light_dir
    for f in fields[1:]:
        if not np.allclose(f.light_dir, l0, atol=1e-12):
            raise ValueError("fields were computed for different light directions")
    if weights is None:
        weights = CombinerWeights.identity(len(fields))
    if weights.n_levels != len(fields):
        raise ValueError(f"combiner has {weights.n_levels} levels, got {len(fields)} fields")
    base = min(fields, key=lambda f: f.level).grid
    out = np.zeros(base.dims)
    for f, k, s in zip(fields, weights.kernels, weights.scalars):
        conv = nn.conv3d_forward(f.values[None, None], k[None, None].astype(np.float64))[0, 0]
        out += s * upsample(conv, f.grid, base)
    return TransmittanceFeatureVolume(out, base, weights, l0)


def fit_combiner(fields, target, weights: CombinerWeights | None = None, steps: int = 200,
                 lr: float = 1e-2):
    """Fit combiner kernels and scalars to a level-0 target volume by Adam on MSE.

    Returns the fitted weights and the loss history.
    """
    fields = list(fields)
    weights = weights or CombinerWeights.identity(len(fields))
    base = min(fields, key=lambda f: f.level).grid
    caches = [upsample_weights(f.grid, base) for f in fields]
    state = nn.TrainState({"k": weights.kernels.astype(np.float64).copy(),
                           "s": weights.scalars.astype(np.float64).copy()}, lr=lr)
    target = np.asarray(target, dtype=np.float64)
    history = []
    for _ in range(steps):
        k, s = state.params["k"], state.params["s"]
        convs = [nn.conv3d_forward(f.values[None, None], k[i][None, None])[0, 0] for i, f in enumerate(fields)]
        ups = [upsample(c, f.grid, base, cache) for c, f, cache in zip(convs, fields, caches)]
        pred = sum(si * u for si, u in zip(s, ups))
        diff = pred - target
        history.append(float(np.mean(diff**2)))
        g = 2.0 * diff / diff.size
        gs = np.array([np.sum(g * u) for u in ups])
        gk = np.zeros_like(k)
        for i, f in enumerate(fields):
            gconv = upsample_transpose(s[i] * g, f.grid, base, caches[i])
            _, dk = nn.conv3d_backward(f.values[None, None], k[i][None, None], gconv[None, None])
            gk[i] = dk[0, 0]
        nn.adam_step(state, {"k": gk, "s": gs})
    return CombinerWeights(state.params["k"], state.params["s"]), history


# --- sampled features ------------------------------------------------------

@dataclass(frozen=True)
class SampleFeatureBlock:
    p: np.ndarray
    omega: np.ndarray
    light: np.ndarray
    diffuse: np.ndarray  # (P_diffuse, 3)
    highlight: np.ndarray  # (P_highlight, 3)


@dataclass
class FeatureContext:
    """Everything needed to sample features at arbitrary shading points."""

    medium: Medium
    light: DistantLight
    diffuse: SamplingTemplate
    highlight: SamplingTemplate
    volume: TransmittanceFeatureVolume
    table: VolumePhaseTable
    template_scale: float = 1.0
    lam: float = DEFAULT_LAMBDA
    route: str = "compiled"  # or "numpy": the vectorized reference route

    @classmethod
    def build(cls, medium, light, diffuse, highlight, template_scale=1.0, lam=DEFAULT_LAMBDA,
              weights: CombinerWeights | None = None, table: VolumePhaseTable | None = None,
              volume: TransmittanceFeatureVolume | None = None):
        """``volume`` skips the graded fields when a precomputed one is at hand."""
        if diffuse.kind is not TemplateKind.DIFFUSE or highlight.kind is not TemplateKind.HIGHLIGHT:
            raise ValueError("expected one diffuse and one highlight template")
        if volume is None:
            pyramid = build_pyramid(medium.grid)
            fields = graded_fields(pyramid, light.direction, lam)
            volume = combine_transmittance(fields, weights)
        elif volume.values.shape != medium.grid.dims or not np.allclose(volume.light_dir, light.direction,
                                                                         atol=1e-12):
            raise ValueError("transmittance volume was computed for another grid or light")
        table = table if table is not None else VolumePhaseTable.build()
        return cls(medium, light, diffuse, highlight, volume, table, float(template_scale), float(lam))

    def entries(self, points) -> np.ndarray:
        """Where light enters the occupied medium on its way to each point."""
        g = self.medium.grid
        l = self.light.direction
        pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        dist = np.empty(len(pts))
        K.occupied_entry_batch(g.values, g.origin, g.voxel_size, g.bbox_min, g.bbox_max, pts, -l,
                               self.medium.march_step, g.voxel_size, dist)
        return pts - dist[:, None] * l

    def sample(self, points, omegas) -> tuple[np.ndarray, np.ndarray]:
        """Diffuse and highlight feature blocks, shapes (N, P_d, 3) and (N, P_h, 3)."""
        p = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        om = normalize(np.asarray(omegas, dtype=np.float64).reshape(-1, 3))
        l = self.light.direction
        n = len(p)
        # diffuse: translate and scale
        dpts = p[:, None, :] + self.template_scale * self.diffuse.all_points()[None]
        dap = self.template_scale * self.diffuse.point_apertures()[None, :].repeat(n, 0)
        # highlight: stretch along entry -> p, lateral frame from omega
        entry = self.entries(p)
        span = p - entry
        dist = np.linalg.norm(span, axis=1)
        axis = span / dist[:, None]
        e1, e2 = _frames(axis, om)
        kfac = dist / self.highlight.length
        loc = self.highlight.all_points()[None] * kfac[:, None, None]
        hpts = (entry[:, None, :] + loc[..., :1] * e1[:, None] + loc[..., 1:2] * e2[:, None]
                + loc[..., 2:3] * axis[:, None])
        hap = self.highlight.point_apertures()[None, :] * kfac[:, None]
        if self.route not in ("compiled", "numpy"):
            raise ValueError(f"unknown feature route {self.route!r}")
        return (self._features(p, om, l, dpts, dap), self._features(p, om, l, hpts, hap))

    def _features(self, p, om, l, pts, apertures):
        if self.route == "numpy":
            dens = sample_trilinear(self.medium.grid, pts)
            trans = self.volume.sample(pts)
            phase = phase_features(self.medium.phase, self.table, p, om, l, pts, apertures)
            return np.stack([dens, trans, phase], axis=-1).astype(np.float32)
        g = self.medium.grid
        t = self.table
        w, gs = self.medium.lobe_arrays()
        out = np.empty(pts.shape)
        K.feature_points_batch(g.values, g.origin, g.voxel_size, self.volume.values,
                               t.values, t.g_range[0], t.g_range[1], t.half_angle_max, w, gs,
                               np.ascontiguousarray(p), np.ascontiguousarray(om), np.asarray(l, dtype=np.float64),
                               np.ascontiguousarray(pts), np.ascontiguousarray(apertures, dtype=np.float64), out)
        return out.astype(np.float32)

    def block(self, p, omega) -> SampleFeatureBlock:
        d, h = self.sample(np.asarray(p)[None], np.asarray(omega)[None])
        return SampleFeatureBlock(np.asarray(p, dtype=np.float64), normalize(omega), self.light.direction, d[0], h[0])


def _frames(axis, omega):
    perp = omega - np.sum(omega * axis, axis=1, keepdims=True) * axis
    n = np.linalg.norm(perp, axis=1)
    bad = n < 1e-9
    if np.any(bad):
        for i in np.nonzero(bad)[0]:
            e1, _, _ = light_frame(axis[i], omega[i])
            perp[i] = e1
        n = np.linalg.norm(perp, axis=1)
    e1 = perp / n[:, None]
    e2 = np.cross(axis, e1)
    return e1, e2


def phase_features(model, table: VolumePhaseTable, p, omega, light, pts, apertures):
    """Batched phase features through the volume-phase table.

    ``pts``: (N, P, 3) template points for shading points ``p`` (N, 3).  A
    point closer to p than its aperture surrounds p, so its cap is the whole
    sphere.
    """
    d = pts - p[:, None, :]
    dist = np.linalg.norm(d, axis=-1)
    safe = np.where(dist > 0, dist, 1.0)
    axis = d / safe[..., None]
    axis = np.where((dist > 0)[..., None], axis, omega[:, None, :])
    half = subtended_half_angle(dist, apertures)
    cos_cam = np.clip(np.sum(axis * omega[:, None, :], axis=-1), -1, 1)
    cos_light = np.clip(-np.sum(axis * np.asarray(light)[None, None, :], axis=-1), -1, 1)
    return table.lookup(model, np.arccos(cos_cam), half) * table.lookup(model, np.arccos(cos_light), half)


@dataclass
class FeatureTable:
    centers: np.ndarray  # (N, 3)
    omegas: np.ndarray  # (N, 3)
    light_dir: np.ndarray  # (3,)
    diffuse: np.ndarray  # (N, P_d, 3) float32
    highlight: np.ndarray  # (N, P_h, 3) float32
    diffuse_counts: tuple
    highlight_counts: tuple
    table: VolumePhaseTable
    weights: CombinerWeights
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.centers.shape[0])

    def block(self, i: int) -> SampleFeatureBlock:
        return SampleFeatureBlock(self.centers[i], self.omegas[i], self.light_dir, self.diffuse[i], self.highlight[i])

    def entry(self, i: int, kind: TemplateKind) -> SampleFeatureBlock:
        b = self.block(i)
        if kind is TemplateKind.DIFFUSE:
            return b
        return SampleFeatureBlock(b.p, b.omega, b.light, b.diffuse[:0], b.highlight)


class EmptyMediumError(ValueError):
    pass


def sample_centers(grid: DensityGrid, n: int, rng):
    """Uniform voxel choice among occupied voxels, uniform jitter inside it."""
    occupied = np.argwhere(grid.values > 0)
    if len(occupied) == 0:
        raise EmptyMediumError("medium has no voxel with density > 0")
    pick = occupied[rng.integers(0, len(occupied), size=n)]
    jitter = rng.random((n, 3))
    return grid.origin + (pick + jitter) * grid.voxel_size


def uniform_directions(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def precompute_tables(ctx: FeatureContext, n_centers: int = 512, seed: int = 0, meta=None) -> FeatureTable:
    if n_centers < 1:
        raise ValueError("need at least one center")
    rng = np.random.default_rng([int(seed), 7])
    centers = sample_centers(ctx.medium.grid, n_centers, rng)
    omegas = uniform_directions(rng, n_centers)
    d, h = ctx.sample(centers, omegas)
    return FeatureTable(centers.astype(np.float32).astype(np.float64),
                        omegas.astype(np.float32).astype(np.float64),
                        ctx.light.direction.copy(), d, h, ctx.diffuse.counts, ctx.highlight.counts,
                        ctx.table, ctx.volume.weights, dict(meta or {}))


# --- .vfeat container --------------------------------------------------------

VFEAT_MAGIC = b"VFEA"
VFEAT_VERSION = 1


def save_feature_table(table: FeatureTable, path) -> None:
    t = table.table
    w = table.weights
    head = struct.pack("<4sIIII", VFEAT_MAGIC, VFEAT_VERSION, len(table),
                       len(table.diffuse_counts), len(table.highlight_counts))
    head += struct.pack(f"<{len(table.diffuse_counts)}I", *table.diffuse_counts)
    head += struct.pack(f"<{len(table.highlight_counts)}I", *table.highlight_counts)
    head += struct.pack("<3I", *t.shape) + struct.pack("<I", w.n_levels)
    meta = json.dumps(table.meta, sort_keys=True).encode()
    parts = [
        head,
        np.asarray(table.centers, "<f4").tobytes(),
        np.asarray(table.omegas, "<f4").tobytes(),
        np.asarray(table.light_dir, "<f4").tobytes(),
        np.asarray(table.diffuse, "<f4").tobytes(),
        np.asarray(table.highlight, "<f4").tobytes(),
        np.asarray([t.g_range[0], t.g_range[1], t.half_angle_max], "<f4").tobytes(),
        np.asarray(t.values, "<f4").tobytes(),
        # combiner weights in float64 so a reload rebuilds the transmittance volume exactly
        np.asarray(w.kernels, "<f8").tobytes(),
        np.asarray(w.scalars, "<f8").tobytes(),
        struct.pack("<I", len(meta)),
        meta,
    ]
    Path(path).write_bytes(b"".join(parts))


class FeatureFormatError(ValueError):
    pass


def load_feature_table(path) -> FeatureTable:
    data = Path(path).read_bytes()
    off = 0

    def take(fmt):
        nonlocal off
        s = struct.Struct(fmt)
        if off + s.size > len(data):
            raise FeatureFormatError("truncated .vfeat header")
        vals = s.unpack_from(data, off)
        off += s.size
        return vals

    def arr(count, shape, dtype="<f4"):
        nonlocal off
        nbytes = np.dtype(dtype).itemsize * count
        if off + nbytes > len(data):
            raise FeatureFormatError("truncated .vfeat payload")
        a = np.frombuffer(data, dtype, count, off).reshape(shape)
        off += nbytes
        return a

    magic, version, n, nd, nh = take("<4sIIII")
    if magic != VFEAT_MAGIC or version != VFEAT_VERSION:
        raise FeatureFormatError(f"not a v{VFEAT_VERSION} .vfeat file")
    dcounts = take(f"<{nd}I")
    hcounts = take(f"<{nh}I")
    tshape = take("<3I")
    (n_levels,) = take("<I")
    pd, ph = sum(dcounts), sum(hcounts)
    centers = arr(n * 3, (n, 3)).astype(np.float64)
    omegas = arr(n * 3, (n, 3)).astype(np.float64)
    light = arr(3, (3,)).astype(np.float64)
    diffuse = arr(n * pd * 3, (n, pd, 3)).copy()
    highlight = arr(n * ph * 3, (n, ph, 3)).copy()
    g0, g1, hmax = arr(3, (3,))
    values = arr(int(np.prod(tshape)), tuple(tshape)).copy()
    kernels = arr(n_levels * 27, (n_levels, 3, 3, 3), "<f8").copy()
    scalars = arr(n_levels, (n_levels,), "<f8").copy()
    (mlen,) = take("<I")
    meta = json.loads(data[off:off + mlen].decode()) if mlen else {}
    off += mlen
    if off != len(data):
        raise FeatureFormatError(f"{len(data) - off} trailing bytes in .vfeat")
    table = VolumePhaseTable((float(g0), float(g1)), float(hmax), values)
    return FeatureTable(centers, omegas, light, diffuse, highlight, tuple(dcounts), tuple(hcounts),
                        table, CombinerWeights(kernels, scalars), meta)


# --- .vtrans: the combined transmittance feature volume ----------------------

VTRANS_MAGIC = b"VTRV"
VTRANS_VERSION = 1
_VTRANS_HEADER = struct.Struct("<4sI3I3d")


def save_transmittance_volume(volume: TransmittanceFeatureVolume, path) -> None:
    """Values are kept in float64 so a reload equals the computed volume exactly."""
    head = _VTRANS_HEADER.pack(VTRANS_MAGIC, VTRANS_VERSION, *volume.values.shape, *volume.light_dir)
    Path(path).write_bytes(head + np.ascontiguousarray(volume.values, "<f8").tobytes())


def load_transmittance_volume(path, grid: DensityGrid, weights: CombinerWeights) -> TransmittanceFeatureVolume:
    data = Path(path).read_bytes()
    if len(data) < _VTRANS_HEADER.size:
        raise FeatureFormatError("truncated .vtrans header")
    magic, version, nx, ny, nz, lx, ly, lz = _VTRANS_HEADER.unpack_from(data)
    if magic != VTRANS_MAGIC or version != VTRANS_VERSION:
        raise FeatureFormatError(f"not a v{VTRANS_VERSION} .vtrans file")
    if (nx, ny, nz) != tuple(grid.dims):
        raise FeatureFormatError(f".vtrans dims {(nx, ny, nz)} differ from the medium's {tuple(grid.dims)}")
    if len(data) != _VTRANS_HEADER.size + 8 * nx * ny * nz:
        raise FeatureFormatError(".vtrans payload has the wrong length")
    values = np.frombuffer(data, "<f8", offset=_VTRANS_HEADER.size).reshape(nx, ny, nz).copy()
    return TransmittanceFeatureVolume(values, grid, weights, np.array([lx, ly, lz]))
