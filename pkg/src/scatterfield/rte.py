"""Reference radiative transfer: transmittance, single scatter, the transport
operator and its Neumann series, a volumetric path tracer, dataset labels and
reference images.

Conventions: ``omega`` is the view direction at a shading point (light leaves
the point travelling ``-omega``); a distant light's ``direction`` is the way
its light travels.  ``F(p, omega)`` is the in-scattered radiance at ``p``
toward the viewer, per color channel.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .phase import eval_phase
from .scene import Camera, DistantLight, Medium, normalize
from .volume_grid import optical_depth, ray_box, sample_trilinear

DEFAULT_MAX_DEPTH = 64
DEFAULT_RR_DEPTH = 16


def _step(medium: Medium, step):
    step = medium.march_step if step is None else float(step)
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    return step


def _kargs(medium: Medium, light: DistantLight, with_albedo=True):
    w, g = medium.lobe_arrays()
    head = medium.kernel_args() + (medium.sigma_t,)
    if with_albedo:
        head = head + (medium.albedo,)
    return head + (w, g, light.direction, light.intensity)


def _as_rows(a):
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 3))


# --- transmittance and single scatter ----------------------------------------

def transmittance(medium: Medium, p, q, step: float | None = None) -> np.ndarray:
    """Per-channel ``exp(-sigma_t * optical depth)`` along ``p -> q``."""
    step = _step(medium, step)
    return np.exp(-medium.sigma_t * optical_depth(medium.grid, p, q, step))


def light_entry(medium: Medium, light: DistantLight, p) -> np.ndarray:
    """Where the ray from ``p`` toward the light source leaves the grid (``p`` if already outside)."""
    p = np.asarray(p, dtype=np.float64)
    toward = -light.direction
    t0, t1 = ray_box(p, toward, medium.grid.bbox_min, medium.grid.bbox_max)
    if t1 <= max(t0, 0.0):
        return p.copy()
    return p + t1 * toward


def single_scatter(medium: Medium, light: DistantLight, p, omega, step: float | None = None) -> np.ndarray:
    """``F_0 = f(cos(-l, omega)) * T(p -> light entry) * I``."""
    omega = normalize(omega)
    cos = float(np.clip(np.dot(-light.direction, omega), -1.0, 1.0))
    f = float(eval_phase(medium.phase, cos))
    return f * transmittance(medium, p, light_entry(medium, light, p), step) * light.intensity


def single_scatter_batch(medium: Medium, light: DistantLight, points, omegas, step=None) -> np.ndarray:
    pts = _as_rows(points)
    views = _as_rows(normalize(np.asarray(omegas, dtype=np.float64).reshape(-1, 3)))
    out = np.empty((len(pts), 3))
    K.single_scatter_batch(*_kargs(medium, light, with_albedo=False), pts, views, _step(medium, step), out)
    return out


# --- transport operator and Neumann series -----------------------------------

@dataclass(frozen=True)
class Estimate:
    value: np.ndarray  # per channel
    stderr: np.ndarray


def neumann_apply(medium: Medium, light: DistantLight, F_prev, p, omega, samples: int,
                  seed: int = 0, step: float | None = None) -> Estimate:
    """Monte Carlo estimate of the next scattering order at ``(p, omega)``.

    ``F_prev(points, views)`` returns the previous order, shape (n, 3), at
    arbitrary points for the given view directions.  Directions are drawn
    uniformly on the sphere and distances with probability proportional to
    transmittance; the estimate integrates ``f * T * sigma_t * F_prev``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    p = np.asarray(p, dtype=np.float64).reshape(3)
    view = normalize(omega).reshape(3)
    pts = np.empty((samples, 3))
    views = np.empty((samples, 3))
    w = np.empty((samples, 3))
    wl, gl = medium.lobe_arrays()
    K.scatter_sources(*medium.kernel_args(), medium.sigma_t, wl, gl, p, view, _step(medium, step),
                      samples, int(seed), pts, views, w)
    vals = np.zeros((samples, 3))
    live = np.any(w > 0, axis=1)
    if np.any(live):
        vals[live] = w[live] * np.asarray(F_prev(pts[live], views[live]), dtype=np.float64).reshape(-1, 3)
    se = vals.std(axis=0, ddof=1) / math.sqrt(samples) if samples > 1 else np.full(3, np.inf)
    return Estimate(vals.mean(axis=0), se)


@dataclass(frozen=True)
class NeumannTerms:
    terms: np.ndarray  # (k+1, 3): F_0 .. F_k
    term_stderr: np.ndarray
    partial_sums: np.ndarray  # (k+1, 3): sum_{j<=i} albedo^j F_j
    partial_stderr: np.ndarray
    albedo: np.ndarray

    @property
    def order(self) -> int:
        return self.terms.shape[0] - 1

    @property
    def total(self) -> np.ndarray:
        return self.partial_sums[-1]


def neumann_series_batch(medium: Medium, light: DistantLight, points, omegas, order: int, samples: int,
                         seed: int = 0, codirectional: bool = False, step=None):
    if order < 0:
        raise ValueError("order must be >= 0")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    pts = _as_rows(points)
    views = _as_rows(normalize(np.asarray(omegas, dtype=np.float64).reshape(-1, 3)))
    n = len(pts)
    shape = (n, order + 1, 3)
    tm, tv, sm, sv = (np.empty(shape) for _ in range(4))
    K.neumann_batch(*_kargs(medium, light), pts, views, _step(medium, step), int(order), int(samples),
                    int(seed), bool(codirectional), tm, tv, sm, sv)
    return [NeumannTerms(tm[i], np.sqrt(tv[i] / samples), sm[i], np.sqrt(sv[i] / samples), medium.albedo)
            for i in range(n)]


def neumann_series(medium: Medium, light: DistantLight, p, omega, order: int, samples: int,
                   seed: int = 0, codirectional: bool = False, step=None) -> NeumannTerms:
    """Orders ``F_0 .. F_order`` from shared random walks, plus albedo-weighted partial sums.

    With ``codirectional`` the phase function inside the walk is replaced by
    the constant ``1/(4 pi)``, factored out of every order.
    """
    return neumann_series_batch(medium, light, [p], [omega], order, samples, seed, codirectional, step)[0]


# --- path tracer -------------------------------------------------------------

@dataclass(frozen=True)
class ScatterLabel:
    F: np.ndarray
    p: np.ndarray
    omega: np.ndarray
    spp: int
    stderr: np.ndarray


def path_trace_batch(medium: Medium, light: DistantLight, points, omegas, spp: int,
                     max_depth: int = DEFAULT_MAX_DEPTH, seed: int = 0, rr_depth: int = DEFAULT_RR_DEPTH,
                     step=None, item_offset: int = 0):
    """Per-point in-scatter estimates; returns ``(mean, stderr)``, each (n, 3)."""
    if spp < 1:
        raise ValueError("spp must be >= 1")
    pts = _as_rows(points)
    views = _as_rows(normalize(np.asarray(omegas, dtype=np.float64).reshape(-1, 3)))
    mean = np.empty((len(pts), 3))
    var = np.empty((len(pts), 3))
    K.path_trace_batch(*_kargs(medium, light), pts, views, _step(medium, step), int(spp), int(max_depth),
                       int(rr_depth), int(seed), int(item_offset), mean, var)
    return mean, np.sqrt(var / spp)


def path_trace_inscatter(medium: Medium, light: DistantLight, p, omega, spp: int,
                         max_depth: int = DEFAULT_MAX_DEPTH, seed: int = 0,
                         rr_depth: int = DEFAULT_RR_DEPTH, step=None) -> ScatterLabel:
    """Path-traced ``F(p, omega)``: phase-sampled walks with next-event estimation at every vertex."""
    mean, se = path_trace_batch(medium, light, [p], [omega], spp, max_depth, seed, rr_depth, step)
    return ScatterLabel(mean[0], np.asarray(p, dtype=np.float64), normalize(omega), int(spp), se[0])


# --- dataset -----------------------------------------------------------------

FLAG_OK = 0
FLAG_NOISY = 1


@dataclass
class DatasetZ:
    centers: np.ndarray  # (N, 3)
    omegas: np.ndarray  # (N, 3)
    labels: np.ndarray  # (N, 3)
    stderr: np.ndarray  # (N, 3)
    flags: np.ndarray  # (N,) uint8
    diffuse: np.ndarray  # (N, P_d, 3)
    highlight: np.ndarray  # (N, P_h, 3)
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.centers.shape[0])

    def usable(self) -> np.ndarray:
        return self.flags == FLAG_OK

    def subset(self, index) -> "DatasetZ":
        return DatasetZ(self.centers[index], self.omegas[index], self.labels[index], self.stderr[index],
                        self.flags[index], self.diffuse[index], self.highlight[index], dict(self.manifest))

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.centers, self.omegas, self.labels, self.stderr, self.flags, self.diffuse, self.highlight):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def generate_dataset(table, medium: Medium, light: DistantLight, spp: int = 256, seed: int = 0,
                     max_depth: int = DEFAULT_MAX_DEPTH, stderr_ceiling: float | None = None,
                     manifest: dict | None = None) -> DatasetZ:
    """Path-traced labels at every center of a feature table.

    Entries whose relative standard error exceeds ``stderr_ceiling`` (on
    the channel mean) are kept but flagged, so training can skip them.
    """
    if not np.allclose(table.light_dir, light.direction, atol=1e-6):
        raise ValueError("feature table was computed for a different light direction")
    mean, se = path_trace_batch(medium, light, table.centers, table.omegas, spp, max_depth, seed)
    flags = np.zeros(len(mean), dtype=np.uint8)
    if stderr_ceiling is not None:
        rel = se.mean(axis=1) / np.maximum(mean.mean(axis=1), 1e-12)
        flags[rel > stderr_ceiling] = FLAG_NOISY
    meta = {"spp": int(spp), "seed": int(seed), "max_depth": int(max_depth),
            "albedo": medium.albedo.tolist(), "phase": medium.phase.to_dict(),
            "light": light.direction.tolist(), "intensity": light.intensity.tolist(),
            "diffuse_counts": list(table.diffuse_counts), "highlight_counts": list(table.highlight_counts)}
    meta.update(manifest or {})
    return DatasetZ(table.centers.copy(), table.omegas.copy(), mean.astype(np.float32), se.astype(np.float32),
                    flags, table.diffuse.copy(), table.highlight.copy(), meta)


VDATA_MAGIC = b"VDAT"
VDATA_VERSION = 1


class DatasetFormatError(ValueError):
    pass


def save_dataset(data: DatasetZ, path) -> None:
    n, pd, _ = data.diffuse.shape
    ph = data.highlight.shape[1]
    manifest = dict(data.manifest)
    manifest.update({"n": n, "diffuse_points": pd, "highlight_points": ph})
    mj = json.dumps(manifest, sort_keys=True).encode()
    parts = [struct.pack("<4sII", VDATA_MAGIC, VDATA_VERSION, len(mj)), mj]
    for a in (data.labels, data.stderr, data.centers, data.omegas):
        parts.append(np.asarray(a, "<f4").tobytes())
    parts.append(np.asarray(data.flags, np.uint8).tobytes())
    parts.append(np.asarray(data.diffuse, "<f4").tobytes())
    parts.append(np.asarray(data.highlight, "<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path) -> DatasetZ:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise DatasetFormatError("truncated .vdata header")
    magic, version, mlen = struct.unpack_from("<4sII", raw, 0)
    if magic != VDATA_MAGIC or version != VDATA_VERSION:
        raise DatasetFormatError(f"not a v{VDATA_VERSION} .vdata file")
    off = 12
    manifest = json.loads(raw[off:off + mlen].decode())
    off += mlen
    n, pd, ph = manifest["n"], manifest["diffuse_points"], manifest["highlight_points"]
    need = 4 * (4 * n * 3 + n * pd * 3 + n * ph * 3) + n
    if len(raw) - off != need:
        raise DatasetFormatError(f".vdata payload is {len(raw) - off} bytes, expected {need}")

    def f32(count, shape):
        nonlocal off
        a = np.frombuffer(raw, "<f4", count, off).reshape(shape)
        off += 4 * count
        return a

    labels = f32(n * 3, (n, 3)).copy()
    stderr = f32(n * 3, (n, 3)).copy()
    centers = f32(n * 3, (n, 3)).astype(np.float64)
    omegas = f32(n * 3, (n, 3)).astype(np.float64)
    flags = np.frombuffer(raw, np.uint8, n, off).copy()
    off += n
    diffuse = f32(n * pd * 3, (n, pd, 3)).copy()
    highlight = f32(n * ph * 3, (n, ph, 3)).copy()
    for k in ("n", "diffuse_points", "highlight_points"):
        manifest.pop(k)
    return DatasetZ(centers, omegas, labels, stderr, flags, diffuse, highlight, manifest)


# --- ray marching and images -------------------------------------------------

@dataclass(frozen=True)
class MarchPlan:
    """Quadrature samples along every camera ray.

    Pixel ``i`` owns samples ``offsets[i]:offsets[i+1]``.  ``weights`` are
    ``T(eye -> x_k) * sigma_s(x_k) * h`` per channel, so the in-scatter part
    of the pixel is ``sum_k weights[k] * F(x_k, view_i)``.
    """

    width: int
    height: int
    offsets: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    views: np.ndarray  # per pixel
    background_transmittance: np.ndarray  # (n_pixels, 3)

    @property
    def sample_views(self) -> np.ndarray:
        return np.repeat(self.views, np.diff(self.offsets), axis=0)

    def accumulate(self, F, background=(0.0, 0.0, 0.0)) -> np.ndarray:
        """Pixel radiance ``T * L_bg + sum_k w_k F_k``, shape (height, width, 3)."""
        contrib = self.weights * np.asarray(F, dtype=np.float64).reshape(-1, 3)
        n = len(self.views)
        pix = np.zeros((n, 3))
        if len(contrib):
            owner = np.repeat(np.arange(n), np.diff(self.offsets))
            np.add.at(pix, owner, contrib)
        pix += self.background_transmittance * np.asarray(background, dtype=np.float64)
        return pix.reshape(self.height, self.width, 3)


def march_samples(medium: Medium, camera: Camera, step: float | None = None) -> MarchPlan:
    """Midpoint-rule marching of every pixel ray; samples with zero density are dropped."""
    step = _step(medium, step)
    views = camera.rays()
    eye = camera.position
    g = medium.grid
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / views
        t0 = (g.bbox_min - eye) * inv
        t1 = (g.bbox_max - eye) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1)).max(axis=1)
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1)).min(axis=1)
    lo = np.maximum(lo, 0.0)
    length = np.where(hi > lo, hi - lo, 0.0)
    counts = np.where(length > 0, np.maximum(1, np.ceil(length / step - 1e-9)), 0).astype(np.int64)
    h = np.where(counts > 0, length / np.maximum(counts, 1), 0.0)
    owner = np.repeat(np.arange(len(views)), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    k = np.arange(len(owner)) - start
    t = lo[owner] + (k + 0.5) * h[owner]
    pts = eye + t[:, None] * views[owner]
    rho = sample_trilinear(g, pts)
    seg = rho * h[owner]
    excl = np.cumsum(seg) - seg  # running depth over all rays back to back
    if len(excl):
        first = np.minimum(np.cumsum(counts) - counts, len(excl) - 1)
        before = excl - np.repeat(excl[first], counts)
    else:
        before = excl
    sigma = medium.sigma_t
    depth_mid = before + 0.5 * seg
    weights = np.exp(-depth_mid[:, None] * sigma) * (sigma * medium.albedo) * seg[:, None]
    total = np.zeros(len(views))
    np.add.at(total, owner, seg)
    keep = rho > 0
    kept_owner = owner[keep]
    offsets = np.concatenate([[0], np.cumsum(np.bincount(kept_owner, minlength=len(views)))])
    return MarchPlan(camera.width, camera.height, offsets.astype(np.int64), np.ascontiguousarray(pts[keep]),
                     np.ascontiguousarray(weights[keep]), views, np.exp(-total[:, None] * sigma))


@dataclass
class RenderResult:
    image: np.ndarray  # (H, W, 3) linear radiance
    stderr: np.ndarray | None = None
    seconds: float = 0.0
    meta: dict = field(default_factory=dict)


def render_with_field(medium: Medium, camera: Camera, F, background=(0.0, 0.0, 0.0), step=None,
                      plan: MarchPlan | None = None) -> np.ndarray:
    """Render with an in-scatter field ``F(points, views) -> (n, 3)``."""
    plan = plan or march_samples(medium, camera, step)
    vals = F(plan.points, plan.sample_views) if len(plan.points) else np.zeros((0, 3))
    return plan.accumulate(vals, background)


def render_single_scatter(medium: Medium, light: DistantLight, camera: Camera, background=(0.0, 0.0, 0.0),
                          step=None) -> np.ndarray:
    return render_with_field(medium, camera, lambda p, v: single_scatter_batch(medium, light, p, v, step),
                             background, step)


def render_reference(medium: Medium, light: DistantLight, camera: Camera, spp: int = 1024, seed: int = 0,
                     background=(0.0, 0.0, 0.0), max_depth: int = DEFAULT_MAX_DEPTH,
                     rr_depth: int = DEFAULT_RR_DEPTH, step=None):
    """Path-traced image; returns ``(image, stderr)``.

    Each of the ``spp`` samples of a pixel picks one march sample with
    probability proportional to its quadrature weight and traces one
    in-scatter path from there.
    """
    if spp < 1:
        raise ValueError("spp must be >= 1")
    step = _step(medium, step)
    plan = march_samples(medium, camera, step)
    n = len(plan.views)
    mean = np.empty((n, 3))
    var = np.empty((n, 3))
    K.march_reference(*_kargs(medium, light), plan.offsets, plan.points, plan.weights, plan.views, step,
                      int(spp), int(max_depth), int(rr_depth), int(seed), mean, var)
    mean += plan.background_transmittance * np.asarray(background, dtype=np.float64)
    shape = (camera.height, camera.width, 3)
    return mean.reshape(shape), np.sqrt(var).reshape(shape)
