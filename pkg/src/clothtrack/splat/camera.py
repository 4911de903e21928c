"""Pinhole cameras and the projection of 3D Gaussians to the image plane.

Camera frame follows the usual computer-vision convention: x right, y down,
z forward.  Pixel ``(row, col)`` has its centre at ``(col + 0.5, row + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NEAR_PLANE = 1e-3
COV2D_DILATION = 0.3


@dataclass(frozen=True)
class CameraView:
    view: np.ndarray  # 4x4 world-to-camera rigid transform
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        view = np.asarray(self.view, dtype=np.float64)
        if view.shape != (4, 4):
            raise ValueError("view must be 4x4")
        rot = view[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise ValueError("view rotation block is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        object.__setattr__(self, "view", view)

    @property
    def rotation(self) -> np.ndarray:
        return self.view[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.view[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {"view": self.view.tolist(), "fx": self.fx, "fy": self.fy, "cx": self.cx,
                "cy": self.cy, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraView":
        return cls(np.asarray(d["view"]), float(d["fx"]), float(d["fy"]), float(d["cx"]),
                   float(d["cy"]), int(d["width"]), int(d["height"]))

    def transformed(self, rigid: np.ndarray) -> "CameraView":
        """Camera seeing the same image after the world is moved by ``rigid`` (4x4)."""
        return CameraView(self.view @ np.linalg.inv(rigid), self.fx, self.fy, self.cx, self.cy,
                          self.width, self.height)


def look_at(eye, target, up=(0.0, 0.0, 1.0), width: int = 128, height: int = 128,
            fov_deg: float = 45.0) -> CameraView:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    view = np.eye(4)
    view[:3, :3] = rot
    view[:3, 3] = -rot @ eye
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return CameraView(view, f, f, width / 2.0, height / 2.0, width, height)


def hemisphere_cameras(target, n_views: int, radius: float = 0.45, elevation_deg: float = 55.0,
                       width: int = 128, height: int = 128, fov_deg: float = 45.0,
                       azimuth0_deg: float = 45.0) -> list[CameraView]:
    """``n_views`` cameras evenly spread in azimuth at a fixed elevation."""
    target = np.asarray(target, dtype=np.float64)
    cams = []
    el = np.radians(elevation_deg)
    for k in range(n_views):
        az = np.radians(azimuth0_deg + 360.0 * k / n_views)
        eye = target + radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(look_at(eye, target, width=width, height=height, fov_deg=fov_deg))
    return cams


@dataclass
class Projection:
    p_cam: np.ndarray  # (G, 3)
    mean2d: np.ndarray  # (G, 2)
    cov2d: np.ndarray  # (G, 2, 2), dilated
    jac: np.ndarray  # (G, 2, 3)
    valid: np.ndarray  # (G,) bool


def project_gaussians(means: np.ndarray, covs: np.ndarray, cam: CameraView) -> Projection:
    rot = cam.rotation
    p = means @ rot.T + cam.translation
    z = p[:, 2]
    valid = z > NEAR_PLANE
    zs = np.where(valid, z, 1.0)
    x, y = p[:, 0], p[:, 1]
    mean2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)
    jac = np.zeros((len(p), 2, 3))
    jac[:, 0, 0] = cam.fx / zs
    jac[:, 0, 2] = -cam.fx * x / zs**2
    jac[:, 1, 1] = cam.fy / zs
    jac[:, 1, 2] = -cam.fy * y / zs**2
    t = jac @ rot
    cov2d = t @ covs @ np.swapaxes(t, 1, 2)
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION
    return Projection(p, mean2d, cov2d, jac, valid)


def project_gaussian(mu, sigma, cam: CameraView):
    """Single-Gaussian projection: (mean2d, cov2d, culled)."""
    proj = project_gaussians(np.asarray(mu, dtype=np.float64)[None], np.asarray(sigma, dtype=np.float64)[None], cam)
    return proj.mean2d[0], proj.cov2d[0], not bool(proj.valid[0])
