"""Phase functions, their solid-angle-cap integrals and template phase features.

Cosines are taken between the incoming travel direction and the outgoing
travel direction, so ``cos_theta = 1`` is forward continuation and ``g > 0``
favours forward scattering.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ellipe

from .volume_grid import MaterialClass

INV_4PI = 1.0 / (4.0 * math.pi)


class PhaseKind(str, enum.Enum):
    ISOTROPIC = "Isotropic"
    HG = "HG"
    MULTI_HG = "MultiHG"


@dataclass(frozen=True)
class PhaseModel:
    kind: PhaseKind
    lobes: tuple[tuple[float, float], ...]  # (weight, g)

    def __post_init__(self):
        kind = PhaseKind(self.kind)
        lobes = tuple((float(w), float(g)) for w, g in self.lobes)
        if kind is PhaseKind.ISOTROPIC:
            lobes = ((1.0, 0.0),)
        if not lobes:
            raise ValueError("phase model needs at least one lobe")
        if kind is PhaseKind.HG and len(lobes) != 1:
            raise ValueError("HG takes exactly one lobe")
        for w, g in lobes:
            if not -1.0 < g < 1.0:
                raise ValueError(f"asymmetry g={g} outside (-1, 1)")
            if w < 0:
                raise ValueError(f"negative lobe weight {w}")
        total = sum(w for w, _ in lobes)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"lobe weights sum to {total}, not 1")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "lobes", lobes)

    @classmethod
    def isotropic(cls) -> "PhaseModel":
        return cls(PhaseKind.ISOTROPIC, ((1.0, 0.0),))

    @classmethod
    def hg(cls, g: float) -> "PhaseModel":
        return cls(PhaseKind.HG, ((1.0, g),))

    @classmethod
    def multi_hg(cls, lobes) -> "PhaseModel":
        return cls(PhaseKind.MULTI_HG, tuple(lobes))

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for w, _ in self.lobes])

    @property
    def gs(self) -> np.ndarray:
        return np.array([g for _, g in self.lobes])

    @property
    def effective_g(self) -> float:
        """Mean cosine of the mixture, sum of weight * g."""
        return float(np.dot(self.weights, self.gs))

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "lobes": [list(l) for l in self.lobes]}

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseModel":
        return cls(PhaseKind(d["kind"]), tuple(tuple(l) for l in d["lobes"]))


# lobe count expected for each material class
MATERIAL_LOBES = {
    MaterialClass.AIR: 0,
    MaterialClass.GAS: 1,
    MaterialClass.SOLID_LIQUID: 2,
    MaterialClass.SKIN: 3,
}


def phase_for_material(material_class, gs=(), weights=None) -> PhaseModel:
    """Phase model for a material class: Air isotropic, Gas HG, others MHG."""
    mclass = MaterialClass(material_class)
    n = MATERIAL_LOBES[mclass]
    if mclass is MaterialClass.AIR:
        return PhaseModel.isotropic()
    gs = tuple(gs)
    if len(gs) != n:
        raise ValueError(f"{mclass.value} needs {n} asymmetry values, got {len(gs)}")
    if n == 1:
        return PhaseModel.hg(gs[0])
    if weights is None:
        weights = (1.0 / n,) * n
    return PhaseModel.multi_hg(zip(weights, gs))


def hg(cos_theta, g):
    cos_theta = np.asarray(cos_theta, dtype=np.float64)
    denom = 1.0 + g * g - 2.0 * g * cos_theta
    return INV_4PI * (1.0 - g * g) / (denom * np.sqrt(denom))


def eval_phase(model: PhaseModel, cos_theta):
    """Phase function value per steradian."""
    c = np.asarray(cos_theta, dtype=np.float64)
    if np.any(np.abs(c) > 1.0 + 1e-12):
        raise ValueError("cos_theta outside [-1, 1]")
    c = np.clip(c, -1.0, 1.0)
    if model.kind is PhaseKind.ISOTROPIC:
        return np.full_like(c, INV_4PI)[()]
    out = np.zeros_like(c)
    for w, g in model.lobes:
        out = out + w * hg(c, g)
    return out[()]


def _gauss_legendre(n: int, a: float, b: float):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (b - a) * x + 0.5 * (b + a), 0.5 * (b - a) * w


def sphere_integral(model: PhaseModel, nodes: int = 64, weight=None) -> float:
    """Integral of ``f(mu) * weight(mu)`` over the sphere (Gauss-Legendre in mu)."""
    mu, w = _gauss_legendre(nodes, -1.0, 1.0)
    vals = eval_phase(model, mu)
    if weight is not None:
        vals = vals * weight(mu)
    return float(2.0 * math.pi * np.sum(w * vals))


def mean_cosine(model: PhaseModel, nodes: int = 64) -> float:
    if nodes < 16:
        raise ValueError("mean_cosine needs at least 16 nodes")
    return sphere_integral(model, nodes, weight=lambda mu: mu)


@dataclass(frozen=True)
class SolidAngleCap:
    axis: np.ndarray
    half_angle: float

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(axis)
        if norm == 0:
            raise ValueError("cap axis is zero")
        if abs(norm - 1.0) > 1e-9:
            axis = axis / norm
        if not self.half_angle > 0:
            raise ValueError(f"degenerate cap half_angle={self.half_angle}")
        if self.half_angle > math.pi + 1e-12:
            raise ValueError(f"half_angle {self.half_angle} exceeds pi")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "half_angle", float(min(self.half_angle, math.pi)))

    @property
    def solid_angle(self) -> float:
        return cap_solid_angle(self.half_angle)


def cap_solid_angle(half_angle):
    return 2.0 * math.pi * (1.0 - np.cos(half_angle))


def _polar_nodes(cos_h: float, cos_alpha: float, nodes: int):
    """GL nodes on [cos_h, 1], split at the peak cosine when it lies inside."""
    if cos_h < cos_alpha < 1.0:
        n1 = max(4, nodes // 2)
        a, wa = _gauss_legendre(n1, cos_h, cos_alpha)
        b, wb = _gauss_legendre(nodes - n1 if nodes - n1 >= 4 else 4, cos_alpha, 1.0)
        return np.concatenate([a, b]), np.concatenate([wa, wb])
    return _gauss_legendre(nodes, cos_h, 1.0)


def volume_phase(model: PhaseModel, fixed_dir, cap: SolidAngleCap, nodes: int = 128) -> float:
    """Integral over the cap of ``f(cos(fixed_dir, phi))`` by 2D quadrature.

    Polar: Gauss-Legendre in the cosine from the cap axis; azimuth: uniform
    (trapezoid) rule.
    """
    if nodes < 8:
        raise ValueError("volume_phase needs at least 8 nodes per dimension")
    f = np.asarray(fixed_dir, dtype=np.float64)
    f = f / np.linalg.norm(f)
    axis = cap.axis
    cos_alpha = float(np.clip(np.dot(axis, f), -1.0, 1.0))
    perp = f - cos_alpha * axis
    pn = np.linalg.norm(perp)
    if pn < 1e-12:
        e1 = _any_perpendicular(axis)
    else:
        e1 = perp / pn
    sin_alpha = math.sqrt(max(0.0, 1.0 - cos_alpha * cos_alpha))
    mu, wmu = _polar_nodes(math.cos(cap.half_angle), cos_alpha, nodes)
    psi = (np.arange(nodes) + 0.5) * (2.0 * math.pi / nodes)
    s = np.sqrt(np.clip(1.0 - mu * mu, 0.0, None))
    # cosine between fixed_dir and mu*axis + s*(cos psi e1 + sin psi e2)
    c = mu[:, None] * cos_alpha + s[:, None] * np.cos(psi)[None, :] * sin_alpha
    vals = eval_phase(model, np.clip(c, -1.0, 1.0))
    return float(np.sum(wmu[:, None] * vals) * (2.0 * math.pi / nodes))


def _any_perpendicular(v):
    a = np.array([1.0, 0.0, 0.0]) if abs(v[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e = np.cross(v, a)
    return e / np.linalg.norm(e)


def hg_cap_integral(g, cos_alpha, half_angle, nodes: int = 64):
    """Cap integral of a single HG lobe with the azimuth done in closed form.

    Vectorized over broadcastable ``g``, ``cos_alpha`` and ``half_angle``.
    The azimuthal integral of ``(A - B cos psi)^(-3/2)`` over a full turn is
    ``4 E(m) / ((A - B) sqrt(A + B))`` with ``m = 2B / (A + B)``.
    """
    g, cos_alpha, half_angle = np.broadcast_arrays(
        np.asarray(g, dtype=np.float64),
        np.asarray(cos_alpha, dtype=np.float64),
        np.asarray(half_angle, dtype=np.float64),
    )
    cos_alpha = np.clip(cos_alpha, -1.0, 1.0)
    sin_alpha = np.sqrt(1.0 - cos_alpha**2)
    cos_h = np.cos(half_angle)
    x, w = np.polynomial.legendre.leggauss(max(2, nodes // 2))
    total = np.zeros(g.shape)
    # two GL panels: [cos_h, split] and [split, 1], split at the peak if inside
    split = np.where((cos_alpha > cos_h) & (cos_alpha < 1.0), cos_alpha, 0.5 * (cos_h + 1.0))
    for a, b in ((cos_h, split), (split, np.ones_like(split))):
        half = 0.5 * (b - a)
        mid = 0.5 * (b + a)
        for xi, wi in zip(x, w):
            mu = mid + half * xi
            s = np.sqrt(np.clip(1.0 - mu * mu, 0.0, None))
            A = 1.0 + g * g - 2.0 * g * cos_alpha * mu
            B = np.abs(2.0 * g * sin_alpha * s)
            m = np.where(A + B > 0, 2.0 * B / (A + B), 0.0)
            azim = 4.0 * ellipe(m) / ((A - B) * np.sqrt(A + B))
            total += wi * half * azim
    return INV_4PI * (1.0 - g * g) * total


@dataclass(frozen=True)
class VolumePhaseTable:
    """Cap-averaged HG integrals on a regular (g, angle, half_angle) grid.

    Stores ``cap_integral / cap_solid_angle`` (smooth as the cap shrinks);
    lookups interpolate trilinearly and multiply the solid angle back in.
    """

    g_range: tuple[float, float]
    half_angle_max: float
    values: np.ndarray  # (n_g, n_angle, n_half)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.values.shape)

    @property
    def g_axis(self):
        return np.linspace(self.g_range[0], self.g_range[1], self.shape[0])

    @property
    def angle_axis(self):
        return np.linspace(0.0, math.pi, self.shape[1])

    @property
    def half_angle_axis(self):
        return np.linspace(0.0, self.half_angle_max, self.shape[2])

    @classmethod
    def build(cls, shape=(64, 128, 32), g_range=(-0.95, 0.95), nodes: int = 64):
        n_g, n_a, n_h = shape
        g_axis = np.linspace(g_range[0], g_range[1], n_g)
        alpha = np.linspace(0.0, math.pi, n_a)
        half = np.linspace(0.0, math.pi, n_h)
        values = np.empty(shape, dtype=np.float64)
        for k, g in enumerate(g_axis):
            ca = np.cos(alpha)[:, None]
            h = half[None, 1:]
            integral = hg_cap_integral(g, ca, h, nodes)
            values[k, :, 1:] = integral / cap_solid_angle(h)
            values[k, :, 0] = hg(np.cos(alpha), g)
        return cls((float(g_range[0]), float(g_range[1])), math.pi, values.astype(np.float32))

    def lookup_hg(self, g, angle, half_angle):
        g, angle, half_angle = np.broadcast_arrays(
            np.asarray(g, dtype=np.float64), np.asarray(angle, dtype=np.float64),
            np.asarray(half_angle, dtype=np.float64))
        n_g, n_a, n_h = self.shape
        lo, hi = self.g_range
        ug = np.clip((g - lo) / (hi - lo) * (n_g - 1), 0, n_g - 1)
        ua = np.clip(angle / math.pi * (n_a - 1), 0, n_a - 1)
        uh = np.clip(half_angle / self.half_angle_max * (n_h - 1), 0, n_h - 1)
        avg = _trilinear_table(self.values, ug, ua, uh)
        return avg * cap_solid_angle(np.clip(half_angle, 0.0, math.pi))

    def lookup(self, model: PhaseModel, angle, half_angle):
        out = 0.0
        for w, g in model.lobes:
            if g == 0.0:
                # isotropic lobe: exact, independent of the angle
                h = np.clip(np.asarray(half_angle, dtype=np.float64), 0.0, math.pi)
                lobe = np.broadcast_to(cap_solid_angle(h) * INV_4PI, np.broadcast(angle, h).shape)
            else:
                lobe = self.lookup_hg(g, angle, half_angle)
            out = out + w * lobe
        return out


def _trilinear_table(values, u, v, w):
    shape = values.shape
    i0 = np.minimum(np.floor(u).astype(np.int64), shape[0] - 2 if shape[0] > 1 else 0)
    j0 = np.minimum(np.floor(v).astype(np.int64), shape[1] - 2 if shape[1] > 1 else 0)
    k0 = np.minimum(np.floor(w).astype(np.int64), shape[2] - 2 if shape[2] > 1 else 0)
    i1 = np.minimum(i0 + 1, shape[0] - 1)
    j1 = np.minimum(j0 + 1, shape[1] - 1)
    k1 = np.minimum(k0 + 1, shape[2] - 1)
    tu, tv, tw = u - i0, v - j0, w - k0
    vals = values.astype(np.float64, copy=False)

    def lerp(a, b, t):
        return a * (1 - t) + b * t

    c00 = lerp(vals[i0, j0, k0], vals[i1, j0, k0], tu)
    c10 = lerp(vals[i0, j1, k0], vals[i1, j1, k0], tu)
    c01 = lerp(vals[i0, j0, k1], vals[i1, j0, k1], tu)
    c11 = lerp(vals[i0, j1, k1], vals[i1, j1, k1], tu)
    return lerp(lerp(c00, c10, tv), lerp(c01, c11, tv), tw)


def subtended_half_angle(distance, radius):
    """Half-angle of the cone from a point to a sphere; pi once inside it."""
    distance = np.asarray(distance, dtype=np.float64)
    ratio = np.where(distance > 0, radius / np.maximum(distance, 1e-300), np.inf)
    return np.where(ratio >= 1.0, math.pi, np.arcsin(np.minimum(ratio, 1.0)))


def phase_feature(model: PhaseModel, omega, light, p, s_i, cap_half_angle=None,
                  radius=None, table: VolumePhaseTable | None = None, nodes: int = 128) -> float:
    """Phase feature of one template point: camera-side times light-side cap integral.

    The cap is centered on ``s_i - p``.  The camera factor integrates
    ``f(cos(omega, phi))``; the light factor integrates ``f(cos(-light, phi))``,
    i.e. light travelling along ``light`` reaching the template point and
    turning toward ``p``.  Pass either ``cap_half_angle`` or the template
    point's ``radius`` (the half-angle is then the angle it subtends from p).
    """
    d = np.asarray(s_i, dtype=np.float64) - np.asarray(p, dtype=np.float64)
    dist = float(np.linalg.norm(d))
    if dist == 0.0:
        raise ValueError("template point coincides with the shading point")
    if cap_half_angle is None:
        if radius is None:
            raise ValueError("need cap_half_angle or radius")
        cap_half_angle = float(subtended_half_angle(dist, radius))
    axis = d / dist
    omega = np.asarray(omega, dtype=np.float64)
    back = -np.asarray(light, dtype=np.float64)
    if table is not None:
        a_cam = math.acos(float(np.clip(np.dot(axis, omega), -1, 1)))
        a_light = math.acos(float(np.clip(np.dot(axis, back), -1, 1)))
        return float(table.lookup(model, a_cam, cap_half_angle) * table.lookup(model, a_light, cap_half_angle))
    cap = SolidAngleCap(axis, cap_half_angle)
    return volume_phase(model, omega, cap, nodes) * volume_phase(model, back, cap, nodes)
