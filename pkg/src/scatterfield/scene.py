"""Scene description: medium, distant light, pinhole camera and the JSON config."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .phase import PhaseModel, phase_for_material
from .volume_grid import DensityGrid, MaterialClass, MediumProperties, default_step


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("cannot normalize a zero vector")
    return v / n


@dataclass(frozen=True)
class Medium:
    grid: DensityGrid
    props: MediumProperties
    phase: PhaseModel
    step: float | None = None  # ray-march step; default half a voxel

    @property
    def march_step(self) -> float:
        return self.step if self.step is not None else default_step(self.grid)

    @property
    def sigma_t(self) -> np.ndarray:
        return np.asarray(self.props.sigma_t_scale, dtype=np.float64)

    @property
    def albedo(self) -> np.ndarray:
        return np.asarray(self.props.albedo, dtype=np.float64)

    def kernel_args(self):
        """Positional arguments shared by the compiled kernels."""
        g = self.grid
        return (g.values, g.origin, g.voxel_size, g.bbox_min, g.bbox_max)

    def lobe_arrays(self):
        return (np.asarray(self.phase.weights, dtype=np.float64),
                np.asarray(self.phase.gs, dtype=np.float64))

    def with_grid(self, grid: DensityGrid) -> "Medium":
        return Medium(grid, self.props, self.phase, self.step)


@dataclass(frozen=True)
class DistantLight:
    """Light travelling along ``direction``; the source sits at infinity opposite it."""

    direction: np.ndarray
    intensity: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        d = normalize(np.asarray(self.direction, dtype=np.float64).reshape(3))
        i = np.broadcast_to(np.asarray(self.intensity, dtype=np.float64), (3,)).copy()
        if np.any(i < 0):
            raise ValueError("light intensity must be non-negative")
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "intensity", i)


class DegenerateCameraError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    vfov_deg: float = 40.0
    width: int = 32
    height: int = 32

    def __post_init__(self):
        for name in ("position", "look_at", "up"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        if self.width < 1 or self.height < 1:
            raise DegenerateCameraError(f"resolution {self.width}x{self.height}")
        if not 0 < self.vfov_deg < 180:
            raise DegenerateCameraError(f"vertical fov {self.vfov_deg}")
        fwd = self.look_at - self.position
        if np.linalg.norm(fwd) == 0:
            raise DegenerateCameraError("camera looks at its own position")
        if np.linalg.norm(np.cross(fwd, self.up)) < 1e-12 * np.linalg.norm(fwd) * max(np.linalg.norm(self.up), 1e-300):
            raise DegenerateCameraError("up vector parallel to the view direction")

    def rays(self):
        """Pixel-center ray directions, shape ``(height * width, 3)``, row-major from the top."""
        fwd = normalize(self.look_at - self.position)
        right = normalize(np.cross(fwd, self.up))
        up = np.cross(right, fwd)
        th = math.tan(math.radians(self.vfov_deg) / 2)
        aspect = self.width / self.height
        ys = (1.0 - 2.0 * (np.arange(self.height) + 0.5) / self.height) * th
        xs = (2.0 * (np.arange(self.width) + 0.5) / self.width - 1.0) * th * aspect
        X, Y = np.meshgrid(xs, ys)
        d = fwd + X[..., None] * right + Y[..., None] * up
        return normalize(d.reshape(-1, 3))

    def to_dict(self):
        return {"position": self.position.tolist(), "look_at": self.look_at.tolist(),
                "up": self.up.tolist(), "vfov_deg": self.vfov_deg,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(d["position"], d["look_at"], d.get("up", [0, 1, 0]), d.get("vfov_deg", 40.0),
                   int(d.get("width", 32)), int(d.get("height", 32)))


@dataclass
class SceneConfig:
    """Everything a pipeline run needs besides the artifacts on the command line."""

    sigma_t_scale: tuple = (8.0, 8.0, 8.0)
    albedo: tuple = (0.9, 0.9, 0.9)
    material_class: str = "SolidLiquid"
    phase_g: tuple = (0.857, -0.3)
    phase_weights: tuple | None = (0.8, 0.2)
    light_direction: tuple = (0.0, -1.0, 0.0)
    light_intensity: tuple = (1.0, 1.0, 1.0)
    background: tuple = (0.0, 0.0, 0.0)
    cameras: dict = field(default_factory=lambda: {
        "train": {"position": [0.0, 0.0, 2.6], "look_at": [0.0, 0.0, 0.0], "vfov_deg": 30.0,
                  "width": 32, "height": 32},
        "heldout": {"position": [1.9, 0.6, 1.6], "look_at": [0.0, 0.0, 0.0], "vfov_deg": 30.0,
                    "width": 64, "height": 64},
    })
    template_scale: float = 1.0
    cone_half_angle_deg: float = 5.0
    graded_lambda: float = 0.6
    march_step: float | None = None
    seed: int = 0

    def medium_properties(self) -> MediumProperties:
        return MediumProperties(tuple(self.sigma_t_scale), tuple(self.albedo), MaterialClass(self.material_class))

    def phase_model(self) -> PhaseModel:
        return phase_for_material(self.material_class, self.phase_g, self.phase_weights)

    def medium(self, grid: DensityGrid) -> Medium:
        return Medium(grid, self.medium_properties(), self.phase_model(), self.march_step)

    def light(self) -> DistantLight:
        return DistantLight(self.light_direction, self.light_intensity)

    def camera(self, name: str) -> Camera:
        if name not in self.cameras:
            raise KeyError(f"no camera named {name!r}; have {sorted(self.cameras)}")
        return Camera.from_dict(self.cameras[name])

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        cfg = cls(**kw)
        cfg.medium_properties()
        cfg.phase_model()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "SceneConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
