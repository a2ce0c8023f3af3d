"""Spherical camera poses, viewpoint grids and the empirical pose prior.

Conventions: world is y-up. ``phi`` is the inclination measured from the +y
zenith, so ``phi = pi/2`` puts the camera on the horizon and values above
``pi/2`` look slightly upward from below eye level. ``theta`` is the azimuth
around +y starting from +x.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

PHI_MIN = math.pi / 4
PHI_MAX = 9 * math.pi / 16
TWO_PI = 2 * math.pi

# Jitter half-widths for the synthetic pose prior.
THETA_JITTER = math.pi / 12
PHI_JITTER = math.pi / 24


@dataclass(frozen=True)
class SphericalPose:
    theta: float
    phi: float
    r: float = 2.0
    fov_x: float = 55.0

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("camera distance must be positive")
        if not 0 < self.fov_x < 180:
            raise ValueError("fov_x must lie in (0, 180) degrees")

    def position(self, target=(0.0, 0.0, 0.0)) -> np.ndarray:
        return np.asarray(target, dtype=np.float64) + self.r * np.array([
            math.sin(self.phi) * math.cos(self.theta),
            math.cos(self.phi),
            math.sin(self.phi) * math.sin(self.theta),
        ])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SphericalPose":
        return cls(float(d["theta"]), float(d["phi"]), float(d.get("r", 2.0)), float(d.get("fov_x", 55.0)))


@dataclass(frozen=True)
class GridConfig:
    n_elevations: int
    azimuth_scale: float
    phi_min: float = PHI_MIN
    phi_max: float = PHI_MAX
    r: float = 2.0
    fov_x: float = 55.0

    def azimuth_counts(self) -> list[int]:
        return [int(math.floor(self.azimuth_scale * math.sin(p) + 0.5)) for p in self.elevations()]

    def elevations(self) -> np.ndarray:
        if self.n_elevations == 1:
            return np.array([self.phi_min])
        return np.linspace(self.phi_min, self.phi_max, self.n_elevations)


# 10 rings with round(50 sin phi) azimuths each gives exactly 456 views
# (35, 39, 42, 45, 47, 49, 50, 50, 50, 49). Found by exhaustive search over
# small integer (rings, scale) pairs; other solutions need 31+ rings.
PRESETS: dict[str, GridConfig] = {
    "paper456": GridConfig(n_elevations=10, azimuth_scale=50),
    "coarse": GridConfig(n_elevations=4, azimuth_scale=12),
}


@dataclass(frozen=True)
class ViewpointGrid:
    poses: tuple[SphericalPose, ...]
    config: GridConfig

    def __len__(self) -> int:
        return len(self.poses)

    def to_json(self) -> str:
        return json.dumps({"config": asdict(self.config), "poses": [p.to_dict() for p in self.poses]},
                          sort_keys=True)


def build_viewpoint_grid(config: GridConfig | str) -> ViewpointGrid:
    """Rings of uniformly spaced azimuths at uniformly spaced inclinations.

    Elevations include both interval endpoints; each ring at inclination phi
    gets ``round(azimuth_scale * sin(phi))`` azimuths starting at 0.
    """
    if isinstance(config, str):
        try:
            config = PRESETS[config]
        except KeyError:
            raise ValueError(f"unknown grid preset {config!r}; known: {sorted(PRESETS)}") from None
    if config.n_elevations < 1:
        raise ValueError("n_elevations must be >= 1")
    if not config.azimuth_scale > 0:
        raise ValueError("azimuth_scale must be positive")
    poses = []
    for phi, count in zip(config.elevations(), config.azimuth_counts()):
        if count < 1:
            raise ValueError(f"no azimuths at phi={phi:.4f}; increase azimuth_scale")
        for j in range(count):
            poses.append(SphericalPose(TWO_PI * j / count, float(phi), config.r, config.fov_x))
    return ViewpointGrid(tuple(poses), config)


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Right-handed world-to-camera matrix; the camera looks down its -z axis."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    view = np.eye(4)
    view[0, :3], view[1, :3], view[2, :3] = right, true_up, -forward
    view[:3, 3] = -view[:3, :3] @ eye
    return view


def perspective(fov_x: float, aspect: float = 1.0, near: float = 0.01, far: float = 100.0) -> np.ndarray:
    """OpenGL-style projection; ``aspect`` is width / height."""
    fx = 1.0 / math.tan(math.radians(fov_x) / 2)
    fy = fx * aspect
    proj = np.zeros((4, 4))
    proj[0, 0], proj[1, 1] = fx, fy
    proj[2, 2] = (far + near) / (near - far)
    proj[2, 3] = 2 * far * near / (near - far)
    proj[3, 2] = -1.0
    return proj


def pose_to_view_transform(pose: SphericalPose, target=(0.5, 0.5, 0.5)) -> np.ndarray:
    """World-to-camera transform for a pose orbiting ``target``."""
    return look_at(pose.position(target), target)


@dataclass(frozen=True)
class Camera:
    """A posed pinhole camera bound to an image size."""

    view: np.ndarray
    width: int
    height: int
    fov_x: float

    @classmethod
    def from_pose(cls, pose: SphericalPose, width: int, height: int | None = None, target=(0.5, 0.5, 0.5)):
        return cls(pose_to_view_transform(pose, target), width, height or width, pose.fov_x)

    @property
    def focal(self) -> float:
        return (self.width / 2) / math.tan(math.radians(self.fov_x) / 2)

    @property
    def position(self) -> np.ndarray:
        rot = self.view[:3, :3]
        return -rot.T @ self.view[:3, 3]

    @property
    def forward(self) -> np.ndarray:
        return -self.view[2, :3]

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.view[:3, :3].T + self.view[:3, 3]

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Continuous pixel coordinates (x right, y down) and positive depth."""
        cam = self.to_camera(points)
        depth = -cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            x = self.width / 2 + self.focal * cam[:, 0] / depth
            y = self.height / 2 - self.focal * cam[:, 1] / depth
        return np.stack([x, y], axis=1), depth


@dataclass(frozen=True)
class PoseDraw:
    pose: SphericalPose
    base_index: int
    d_theta: float
    d_phi: float


def sample_pose_jitter(empirical, rng: np.random.Generator,
                       phi_range: tuple[float, float] = (PHI_MIN, PHI_MAX)) -> PoseDraw:
    """Draw one of the empirical poses uniformly and jitter its angles.

    Azimuth is jittered by U[-pi/12, pi/12] and wrapped into [0, 2pi);
    inclination by U[-pi/24, pi/24] and clamped to ``phi_range``. The raw
    jitter values are returned alongside the pose.
    """
    empirical = list(empirical)
    if not empirical:
        raise ValueError("empirical pose list is empty")
    k = int(rng.integers(len(empirical)))
    base = empirical[k]
    d_theta = float(rng.uniform(-THETA_JITTER, THETA_JITTER))
    d_phi = float(rng.uniform(-PHI_JITTER, PHI_JITTER))
    theta = (base.theta + d_theta) % TWO_PI
    if theta >= TWO_PI:  # float modulo of tiny negatives
        theta = 0.0
    phi = min(max(base.phi + d_phi, phi_range[0]), phi_range[1])
    return PoseDraw(SphericalPose(theta, phi, base.r, base.fov_x), k, d_theta, d_phi)


def sample_pose_prior(empirical, rng: np.random.Generator,
                      phi_range: tuple[float, float] = (PHI_MIN, PHI_MAX)) -> SphericalPose:
    """Jittered draw from the empirical pose distribution (see :func:`sample_pose_jitter`)."""
    return sample_pose_jitter(empirical, rng, phi_range).pose
