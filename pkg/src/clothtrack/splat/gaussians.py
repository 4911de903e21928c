"""Mesh-attached Gaussian appearance model.

Each Gaussian lives on one mesh face: its centre is a barycentric
combination of the face corners and its orientation is the face's
rest-to-current rotation composed with a fixed local rotation.  All cloud
parameters are time-invariant; only the mesh moves.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..mesh import AugmentedMesh, face_rotations

MIN_SCALE = 1e-5
MAX_SCALE = 0.1
LOG_SCALE_RANGE = (np.log(MIN_SCALE), np.log(MAX_SCALE))


@dataclass
class GaussianCloud:
    face_ids: np.ndarray  # (G,) int
    bc: np.ndarray  # (G, 3)
    quats: np.ndarray  # (G, 4) local rotation, (w, x, y, z)
    log_scales: np.ndarray  # (G, 3)
    opacity_logits: np.ndarray  # (G,)
    colors: np.ndarray  # (G, 3) RGB in [0, 1]

    def __len__(self) -> int:
        return len(self.face_ids)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(np.clip(self.log_scales, *LOG_SCALE_RANGE))

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(np.array(getattr(self, f)) for f in _FIELDS))

    def subset(self, keep) -> "GaussianCloud":
        return GaussianCloud(*(np.array(getattr(self, f)[keep]) for f in _FIELDS))

    def to_dict(self) -> dict:
        return {f: getattr(self, f).tolist() for f in _FIELDS}

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianCloud":
        cloud = cls(
            np.asarray(data["face_ids"], dtype=np.int64).reshape(-1),
            np.asarray(data["bc"], dtype=np.float64).reshape(-1, 3),
            np.asarray(data["quats"], dtype=np.float64).reshape(-1, 4),
            np.asarray(data["log_scales"], dtype=np.float64).reshape(-1, 3),
            np.asarray(data["opacity_logits"], dtype=np.float64).reshape(-1),
            np.asarray(data["colors"], dtype=np.float64).reshape(-1, 3),
        )
        return cloud

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "GaussianCloud":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def params_equal(self, other: "GaussianCloud") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in _FIELDS)


_FIELDS = ("face_ids", "bc", "quats", "log_scales", "opacity_logits", "colors")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def sample_barycentric(n: int, rng: np.random.Generator, return_raw: bool = False):
    """Per-component N(1/3, 0.05) samples, normalised to sum to one."""
    raw = rng.normal(1.0 / 3.0, 0.05, size=(n, 3))
    bc = raw / raw.sum(axis=1, keepdims=True)
    return (bc, raw) if return_raw else bc


def attach_gaussians(mesh: AugmentedMesh, per_face: int = 2, rng_seed: int = 0,
                     opacity_logit: float = 2.0, color=(0.5, 0.5, 0.5)) -> GaussianCloud:
    """Place ``per_face`` Gaussians on every face of ``mesh``.

    Local rotations start at identity, so the initial Gaussian axes are the
    world axes of the rest mesh; the third scale is the thin one, which
    matches cloths resting in a horizontal plane.
    """
    if mesh.n_faces < 1:
        raise ValueError("mesh has no faces")
    rng = np.random.default_rng(rng_seed)
    g = mesh.n_faces * per_face
    face_ids = np.repeat(np.arange(mesh.n_faces), per_face)
    bc = sample_barycentric(g, rng)
    tangential = mesh.rest_edge_lengths.mean() / 3.0
    log_scales = np.tile(np.log([tangential, tangential, 1e-3]), (g, 1))
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (g, 1))
    return GaussianCloud(
        face_ids=face_ids,
        bc=bc,
        quats=quats,
        log_scales=log_scales,
        opacity_logits=np.full(g, float(opacity_logit)),
        colors=np.tile(np.asarray(color, dtype=np.float64), (g, 1)),
    )


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    r = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return r.reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat` for a single matrix, w >= 0."""
    r = np.asarray(r, dtype=np.float64)
    t = np.trace(r)
    if t > 0:
        s = 2.0 * np.sqrt(1.0 + t)
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + r[i, i] - r[j, j] - r[k, k])
        q = np.zeros(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    q = np.asarray(q)
    return q if q[0] >= 0 else -q


def quat_backward(q: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw (unnormalised) quaternion given dL/dR."""
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = np.moveaxis(qn, -1, 0)
    zero = np.zeros_like(w)

    def mat(*entries):
        return np.stack(entries, axis=-1).reshape(w.shape + (3, 3))

    d_w = 2 * mat(zero, -z, y, z, zero, -x, -y, x, zero)
    d_x = 2 * mat(zero, y, z, y, -2 * x, -w, z, w, -2 * x)
    d_y = 2 * mat(-2 * y, x, w, x, zero, z, -w, z, -2 * y)
    d_z = 2 * mat(-2 * z, -w, x, w, -2 * z, y, x, y, zero)
    g_hat = np.stack([np.sum(grad_r * d, axis=(-2, -1)) for d in (d_w, d_x, d_y, d_z)], axis=-1)
    return (g_hat - qn * np.sum(g_hat * qn, axis=-1, keepdims=True)) / norm


@dataclass
class WorldGaussians:
    means: np.ndarray  # (G, 3)
    covs: np.ndarray  # (G, 3, 3)
    face_rot: np.ndarray  # (G, 3, 3) per-Gaussian face rotation
    local_rot: np.ndarray  # (G, 3, 3)
    rotations: np.ndarray  # (G, 3, 3) face_rot @ local_rot
    scales: np.ndarray  # (G, 3)
    face_rotations: np.ndarray  # (F, 3, 3)


def world_gaussians(cloud: GaussianCloud, mesh: AugmentedMesh, rest_mesh: AugmentedMesh,
                    face_rots: np.ndarray | None = None) -> WorldGaussians:
    """World-space centres and covariances of a cloud on a deformed mesh.

    ``face_rots`` (F x 3 x 3) overrides the registered face rotations; used
    when the rotations must be held fixed.
    """
    if len(cloud) and (cloud.face_ids.min() < 0 or cloud.face_ids.max() >= mesh.n_faces):
        raise IndexError("cloud references faces outside the mesh")
    if face_rots is None:
        face_rots = face_rotations(rest_mesh.face_vertices(), mesh.face_vertices())
    tri = mesh.vertices[mesh.faces[cloud.face_ids]]
    means = np.einsum("gk,gkj->gj", cloud.bc, tri)
    rf = face_rots[cloud.face_ids]
    rl = quat_to_rotmat(cloud.quats)
    rot = rf @ rl
    scales = cloud.scales
    m = rot * scales[:, None, :]
    covs = m @ np.swapaxes(m, 1, 2)
    return WorldGaussians(means, covs, rf, rl, rot, scales, face_rots)


def write_gaussian_csv(path, cloud: GaussianCloud, depth=None, mean2d=None, alpha_center=None) -> None:
    """Per-Gaussian debug table: face, bc, depth, screen mean, alpha at centre."""
    g = len(cloud)
    depth = np.full(g, np.nan) if depth is None else depth
    mean2d = np.full((g, 2), np.nan) if mean2d is None else mean2d
    alpha_center = cloud.opacities if alpha_center is None else alpha_center
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gaussian", "face_id", "b1", "b2", "b3", "depth", "u", "v", "alpha_center"])
        for i in range(g):
            w.writerow([i, int(cloud.face_ids[i]), *(f"{x:.6g}" for x in cloud.bc[i]),
                        f"{depth[i]:.6g}", f"{mean2d[i, 0]:.6g}", f"{mean2d[i, 1]:.6g}",
                        f"{alpha_center[i]:.6g}"])


def with_colors(cloud: GaussianCloud, colors) -> GaussianCloud:
    return replace(cloud, colors=np.asarray(colors, dtype=np.float64))
