"""Pinhole camera (OpenCV convention: x right, y down, z forward)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


@dataclass(frozen=True)
class Camera:
    rotation: np.ndarray  # world-to-camera
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-6:
            raise ContractViolation("camera rotation is not orthonormal")
        if not (self.fx > 0 and self.fy > 0):
            raise ContractViolation("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ContractViolation("image size must be at least 1x1")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {
            "rotation": [[float(v) for v in row] for row in self.rotation],
            "translation": [float(v) for v in self.translation],
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            rotation=np.array(d["rotation"], dtype=np.float64),
            translation=np.array(d["translation"], dtype=np.float64),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )

    @classmethod
    def look_at(cls, eye, target, up, fov_deg: float, width: int, height: int) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        focal = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
        return cls(rot, -rot @ eye, focal, focal, width / 2.0, height / 2.0, width, height)

    def pixel_rays(self, supersample: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """World-space ray origin and unit directions, shape (H, W, S*S, 3).

        Pixel (u, v) covers [u, u+1) x [v, v+1); samples sit on a regular sub-grid.
        """
        s = supersample
        offs = (np.arange(s) + 0.5) / s
        u = np.arange(self.width)[None, :, None, None] + offs[None, None, None, :]
        v = np.arange(self.height)[:, None, None, None] + offs[None, None, :, None]
        u, v = np.broadcast_arrays(u, v)
        x = (u - self.cx) / self.fx
        y = (v - self.cy) / self.fy
        d_cam = np.stack([x, y, np.ones_like(x)], axis=-1).reshape(self.height, self.width, s * s, 3)
        d_world = d_cam @ self.rotation
        d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
        return self.center, d_world


def orbit_cameras(
    count: int,
    radius: float,
    height: float,
    size: int,
    fov_deg: float = 45.0,
    target=(0.0, 0.0, 0.0),
    start_deg: float = 0.0,
) -> list[Camera]:
    """Cameras evenly spaced on a horizontal ring (y up), all looking at ``target``."""
    cams = []
    for q in range(count):
        ang = np.radians(start_deg) + 2.0 * np.pi * q / count
        eye = (radius * np.sin(ang), height, radius * np.cos(ang))
        cams.append(Camera.look_at(eye, target, (0.0, 1.0, 0.0), fov_deg, size, size))
    return cams
