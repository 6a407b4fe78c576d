"""Pinhole cameras and orbit rigs.

Conventions: world-to-camera rotation with OpenCV axes (x right, y down,
z forward). Pixel ``i`` covers ``[i, i + 1)`` so its center sits at
``i + 0.5``; this keeps intrinsics scaling exact under resampling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NEAR_EPS = 1e-6


class BehindCameraError(ValueError):
    """Raised when a point projects at or behind the near plane."""


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_x: float
    focal_y: float
    principal_x: float
    principal_y: float
    width: int
    height: int

    def __post_init__(self):
        if self.focal_x <= 0 or self.focal_y <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if not (0 <= self.principal_x <= self.width and 0 <= self.principal_y <= self.height):
            raise ValueError("principal point outside image bounds")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float = 49.0) -> "CameraIntrinsics":
        """Square pixels, horizontal field of view ``fov_deg``, centered principal point."""
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, int(width), int(height))

    def resized(self, width: int, height: int) -> "CameraIntrinsics":
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(
            self.focal_x * sx, self.focal_y * sy,
            self.principal_x * sx, self.principal_y * sy,
            int(width), int(height),
        )

    def to_dict(self) -> dict:
        return {
            "focal_x": self.focal_x, "focal_y": self.focal_y,
            "principal_x": self.principal_x, "principal_y": self.principal_y,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["focal_x"]), float(d["focal_y"]), float(d["principal_x"]),
                   float(d["principal_y"]), int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rotation plus camera center in world coordinates."""

    rotation: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation has determinant -1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "center", c)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.center) @ self.rotation.T

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation + self.center

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "center": self.center.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(np.array(d["rotation"], dtype=np.float64), np.array(d["center"], dtype=np.float64))


@dataclass(frozen=True)
class OrbitRig:
    n_azimuths: int = 21
    elevation_deg: float = 0.0
    radius: float = 2.0
    look_at: tuple = field(default=(0.0, 0.0, 0.0))

    def __post_init__(self):
        if self.n_azimuths < 2:
            raise ValueError("an orbit needs at least two azimuths")
        if self.radius <= 0:
            raise ValueError("orbit radius must be positive")
        object.__setattr__(self, "look_at", tuple(float(v) for v in self.look_at))

    def azimuth_deg(self, index: int) -> float:
        return 360.0 * index / self.n_azimuths

    def to_dict(self) -> dict:
        return {"n_azimuths": self.n_azimuths, "elevation_deg": self.elevation_deg,
                "radius": self.radius, "look_at": list(self.look_at)}

    @classmethod
    def from_dict(cls, d: dict) -> "OrbitRig":
        return cls(int(d["n_azimuths"]), float(d["elevation_deg"]), float(d["radius"]),
                   tuple(d["look_at"]))


def look_at_pose(center, target, up=(0.0, 0.0, 1.0)) -> CameraPose:
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(right)
    if n < 1e-12:
        raise ValueError("view direction is parallel to the up vector")
    right /= n
    down = np.cross(forward, right)
    return CameraPose(np.stack([right, down, forward]), center)


def orbit_center(rig: OrbitRig, azimuth_deg: float) -> np.ndarray:
    az = math.radians(azimuth_deg)
    el = math.radians(rig.elevation_deg)
    offset = np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
    return np.asarray(rig.look_at) + rig.radius * offset


def orbit_poses(rig: OrbitRig) -> list[CameraPose]:
    """Evenly spaced poses on the orbit, counterclockwise seen from +z, pose 0 at azimuth 0."""
    return [look_at_pose(orbit_center(rig, rig.azimuth_deg(i)), rig.look_at)
            for i in range(rig.n_azimuths)]


def project(point, pose: CameraPose, intr: CameraIntrinsics, near: float = NEAR_EPS):
    """Project one world point; returns ``(pixel, depth)``."""
    pc = pose.world_to_camera(np.asarray(point, dtype=np.float64))
    depth = float(pc[2])
    if depth <= near:
        raise BehindCameraError(f"point at depth {depth:.3g} is behind the camera")
    px = np.array([intr.focal_x * pc[0] / depth + intr.principal_x,
                   intr.focal_y * pc[1] / depth + intr.principal_y])
    return px, depth


def unproject(pixel, depth: float, pose: CameraPose, intr: CameraIntrinsics) -> np.ndarray:
    x = (pixel[0] - intr.principal_x) / intr.focal_x * depth
    y = (pixel[1] - intr.principal_y) / intr.focal_y * depth
    return pose.camera_to_world(np.array([x, y, depth]))


def normalized_center_distance(p: CameraPose, ref: CameraPose, rig: OrbitRig) -> float:
    """Camera-center distance divided by the orbit diameter, clipped to [0, 1]."""
    d = np.linalg.norm(p.center - ref.center) / (2.0 * rig.radius)
    return float(min(max(d, 0.0), 1.0))
