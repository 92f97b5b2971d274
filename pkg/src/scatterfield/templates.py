"""Diffuse (spherical shell) and highlight (light-ray frustum) sampling templates."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

DIFFUSE_COUNTS = (6, 8, 12, 16, 24, 32, 48, 48)
HIGHLIGHT_COUNTS = (32, 16, 16, 8)
N_CANDIDATES = 64
MIPMAP_RESOLUTION = 2**8
DEFAULT_CONE_HALF_ANGLE = math.radians(5.0)


class TemplateKind(str, enum.Enum):
    DIFFUSE = "Diffuse"
    HIGHLIGHT = "Highlight"


@dataclass(frozen=True)
class TemplateLayer:
    index: int
    radius: float
    points: np.ndarray  # (n, 3) template-local offsets
    aperture: float  # radius of the sphere each point stands for (local units)

    @property
    def count(self) -> int:
        return int(self.points.shape[0])


@dataclass(frozen=True)
class SamplingTemplate:
    kind: TemplateKind
    seed: int
    layers: tuple[TemplateLayer, ...]
    length: float = 1.0  # highlight: entry-to-p distance the template was built for
    cone_half_angle: float = 0.0

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(layer.count for layer in self.layers)

    @property
    def total_points(self) -> int:
        return sum(self.counts)

    @property
    def radii(self) -> np.ndarray:
        return np.array([layer.radius for layer in self.layers])

    def all_points(self) -> np.ndarray:
        return np.concatenate([layer.points for layer in self.layers], axis=0)

    def point_layers(self) -> np.ndarray:
        """Layer index of every point in ``all_points`` order."""
        return np.concatenate([np.full(l.count, l.index) for l in self.layers])

    def point_apertures(self) -> np.ndarray:
        return np.concatenate([np.full(l.count, l.aperture) for l in self.layers])

    def to_dict(self) -> dict:
        return {
            "format": "vtmpl",
            "version": 1,
            "kind": self.kind.value,
            "seed": self.seed,
            "counts": list(self.counts),
            "radii": [float(l.radius) for l in self.layers],
            "apertures": [float(l.aperture) for l in self.layers],
            "length": float(self.length),
            "cone_half_angle": float(self.cone_half_angle),
            "points": [[[float(c) for c in pt] for pt in l.points] for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SamplingTemplate":
        if d.get("format") != "vtmpl":
            raise ValueError("not a vtmpl document")
        layers = []
        for i, (count, radius, aperture, pts) in enumerate(
                zip(d["counts"], d["radii"], d["apertures"], d["points"])):
            arr = np.array(pts, dtype=np.float64).reshape(-1, 3)
            if arr.shape[0] != count:
                raise ValueError(f"layer {i}: {arr.shape[0]} points, header says {count}")
            layers.append(TemplateLayer(i, float(radius), arr, float(aperture)))
        return cls(TemplateKind(d["kind"]), int(d["seed"]), tuple(layers),
                   float(d["length"]), float(d["cone_half_angle"]))


def save_template(template: SamplingTemplate, path: str | Path) -> None:
    Path(path).write_text(json.dumps(template.to_dict(), indent=1))


def load_template(path: str | Path) -> SamplingTemplate:
    return SamplingTemplate.from_dict(json.loads(Path(path).read_text()))


def uniformity_metric(points) -> float:
    """Mean nearest-neighbour distance within a point set."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("uniformity_metric needs at least 2 points")
    dist, _ = cKDTree(pts).query(pts, k=2)
    return float(dist[:, 1].mean())


def uniformity_metric_bruteforce(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] < 2:
        raise ValueError("uniformity_metric needs at least 2 points")
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    return float(d.min(axis=1).mean())


def overlap_factor(i: int) -> float:
    return 1.0 - 0.08 * min(i, 5)


def layer_radius(i: int, d_unit: float) -> float:
    """Shell radius of diffuse layer ``i >= 1`` given its unit-radius uniformity."""
    if i < 1:
        raise ValueError("layer_radius is defined for i >= 1")
    if not d_unit > 0:
        raise ValueError(f"uniformity must be positive, got {d_unit}")
    return 2.0 ** (i - 1) / (MIPMAP_RESOLUTION * d_unit) * overlap_factor(i)


def _unit_directions(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def shell_sampler(inner: float, outer: float = 1.0):
    """Uniform-volume sampler for ``inner < |x| <= outer``."""
    a3, b3 = inner**3, outer**3

    def sample(rng, n):
        u = 1.0 - rng.random(n)  # (0, 1]
        r = np.cbrt(a3 + u * (b3 - a3))
        return _unit_directions(rng, n) * r[:, None]

    return sample


def best_candidate(count: int, sampler, rng, fixed=None, candidates: int = N_CANDIDATES,
                   first_only: bool = False) -> np.ndarray:
    """Mitchell's best-candidate point set.

    Each round draws ``candidates`` points from ``sampler`` and keeps the one
    farthest from the points chosen so far.  ``first_only`` keeps the first
    draw instead, which yields the plain random set for the same stream.
    """
    pts = [] if fixed is None else [np.asarray(p, dtype=np.float64) for p in fixed]
    while len(pts) < count:
        cand = sampler(rng, candidates)
        if not pts or first_only:
            pts.append(cand[0])
            continue
        chosen = np.asarray(pts)
        d2 = ((cand[:, None, :] - chosen[None, :, :]) ** 2).sum(-1).min(axis=1)
        pts.append(cand[int(np.argmax(d2))])
    return np.array(pts).reshape(-1, 3)


def _layer_rng(seed: int, kind: TemplateKind, layer: int):
    return np.random.default_rng([int(seed), 0 if kind is TemplateKind.DIFFUSE else 1, layer])


def _remap_shell(points, q, r_in, r_out):
    """Radially map ``q < |x| <= 1`` onto ``r_in < |x| <= r_out``."""
    norm = np.linalg.norm(points, axis=1)
    new = r_in + (norm - q) / (1.0 - q) * (r_out - r_in)
    new = np.clip(new, np.nextafter(r_in, np.inf), r_out)
    return points / norm[:, None] * new[:, None]


def generate_diffuse_template(counts=DIFFUSE_COUNTS, seed: int = 0, iterations: int = 8) -> SamplingTemplate:
    """Eight nested layers; layer 0 is a ball holding the origin plus interior points.

    Layer ``i >= 1`` fills the shell between ``r_{i-1}`` and ``r_i``.  Its
    points are generated at unit outer radius, the uniformity ``D`` of that
    unit set fixes ``r_i`` through :func:`layer_radius`, and the inner radius
    ratio ``r_{i-1}/r_i`` is iterated to a fixed point.
    """
    counts = tuple(int(c) for c in counts)
    if len(counts) != 8:
        raise ValueError(f"diffuse template needs 8 layer counts, got {len(counts)}")
    if any(c <= 0 for c in counts):
        raise ValueError(f"zero count in {counts}")
    kind = TemplateKind.DIFFUSE
    radii = [0.0] * 8
    unit_sets = [None] * 8
    q_used = [0.0] * 8

    def gen_shell(i, q):
        rng = _layer_rng(seed, kind, i)
        return best_candidate(counts[i], shell_sampler(q), rng)

    def d_of(pts):
        return uniformity_metric(pts) if len(pts) > 1 else 1.0

    # layer 1: inner radius r_0 = r_1 / 2
    unit_sets[1] = gen_shell(1, 0.5)
    q_used[1] = 0.5
    radii[1] = layer_radius(1, d_of(unit_sets[1]))
    radii[0] = 0.5 * radii[1]
    for i in range(2, 8):
        q = 0.5
        pts = gen_shell(i, q)
        for _ in range(iterations):
            r = layer_radius(i, d_of(pts))
            q_new = float(np.clip(radii[i - 1] / r, 0.05, 0.95))
            if abs(q_new - q) < 1e-4:
                break
            q = q_new
            pts = gen_shell(i, q)
        unit_sets[i], q_used[i] = pts, q
        radii[i] = layer_radius(i, d_of(pts))
        if radii[i] <= radii[i - 1]:
            raise ValueError(f"layer radii not increasing at layer {i}: {radii[i]} <= {radii[i - 1]}")

    layers = []
    rng0 = _layer_rng(seed, kind, 0)
    ball = best_candidate(counts[0], shell_sampler(0.0), rng0, fixed=[np.zeros(3)])
    pts0 = ball * radii[0]
    ap0 = 0.5 * (uniformity_metric(pts0) if counts[0] > 1 else radii[0])
    layers.append(TemplateLayer(0, radii[0], pts0, ap0))
    for i in range(1, 8):
        pts = _remap_shell(unit_sets[i], q_used[i], radii[i - 1], radii[i])
        ap = 0.5 * (uniformity_metric(pts) if counts[i] > 1 else radii[i] - radii[i - 1])
        layers.append(TemplateLayer(i, radii[i], pts, ap))
    return SamplingTemplate(kind, int(seed), tuple(layers))


def frustum_sampler(z0: float, z1: float, length: float, tan_half: float):
    """Uniform-volume sampler for the cone around +z with apex at ``z = length``."""
    a, b = length - z1, length - z0  # distance from apex, a < b

    def sample(rng, n):
        u = 1.0 - rng.random(n)
        dist = np.cbrt(a**3 + u * (b**3 - a**3))
        z = length - dist
        rad = dist * tan_half * np.sqrt(rng.random(n))
        phi = 2.0 * math.pi * rng.random(n)
        return np.stack([rad * np.cos(phi), rad * np.sin(phi), z], axis=1)

    return sample


def generate_highlight_template(counts=HIGHLIGHT_COUNTS, entry_to_p_distance: float = 1.0,
                                cone_half_angle: float = DEFAULT_CONE_HALF_ANGLE,
                                seed: int = 0) -> SamplingTemplate:
    """Four equal-length layers from the light's entry point (z=0) to p (z=length).

    Points sit inside the cone of ``cone_half_angle`` whose apex is p; layer 0
    is nearest the entry point.
    """
    counts = tuple(int(c) for c in counts)
    if len(counts) != 4:
        raise ValueError(f"highlight template needs 4 layer counts, got {len(counts)}")
    if any(c <= 0 for c in counts):
        raise ValueError(f"zero count in {counts}")
    if not entry_to_p_distance > 0:
        raise ValueError("entry_to_p_distance must be positive")
    if cone_half_angle < 0 or cone_half_angle >= math.pi / 2:
        raise ValueError("cone_half_angle must be in [0, pi/2)")
    kind = TemplateKind.HIGHLIGHT
    L = float(entry_to_p_distance)
    tan_half = math.tan(cone_half_angle)
    layers = []
    for j, n in enumerate(counts):
        z0, z1 = j * L / 4.0, (j + 1) * L / 4.0
        rng = _layer_rng(seed, kind, j)
        pts = best_candidate(n, frustum_sampler(z0, z1, L, tan_half), rng)
        ap = 0.5 * (uniformity_metric(pts) if n > 1 else L / 4.0)
        layers.append(TemplateLayer(j, z1, pts, ap))
    return SamplingTemplate(kind, int(seed), tuple(layers), L, float(cone_half_angle))


def light_frame(axis, omega):
    """Orthonormal frame with ``e3 = axis`` and ``e1`` toward ``omega``'s perpendicular part."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    omega = np.asarray(omega, dtype=np.float64)
    perp = omega - np.dot(omega, axis) * axis
    n = np.linalg.norm(perp)
    if n < 1e-9:
        ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        perp = ref - np.dot(ref, axis) * axis
        n = np.linalg.norm(perp)
    e1 = perp / n
    e2 = np.cross(axis, e1)
    return e1, e2, axis


def place_template(template: SamplingTemplate, p, omega=None, light=None, entry=None,
                   scale: float = 1.0) -> np.ndarray:
    """World positions of the template's points for shading point ``p``.

    Diffuse templates are translated to ``p`` and scaled by ``scale``.
    Highlight templates are stretched along ``entry -> p``; the lateral
    frame follows ``omega`` so the placement rotates with its inputs.
    """
    p = np.asarray(p, dtype=np.float64)
    pts = template.all_points()
    if template.kind is TemplateKind.DIFFUSE:
        return p + scale * pts
    if entry is None:
        raise ValueError("highlight placement needs the entry point")
    entry = np.asarray(entry, dtype=np.float64)
    span = p - entry
    dist = float(np.linalg.norm(span))
    if dist == 0.0:
        if light is None:
            raise ValueError("entry coincides with p and no light direction given")
        axis = np.asarray(light, dtype=np.float64)
    else:
        axis = span / dist
    e1, e2, e3 = light_frame(axis, omega if omega is not None else e1_default(axis))
    k = dist / template.length
    local = pts * k
    return entry + local[:, :1] * e1 + local[:, 1:2] * e2 + local[:, 2:3] * e3


def e1_default(axis):
    a = np.asarray(axis, dtype=np.float64)
    return np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
