"""Tracking metrics over vertex tracks, and initial-state augmentations.

Track sets are arrays of shape (P, T, 3) in metres; errors are reported in
millimetres.  An error exactly equal to a threshold counts as within it.
"""

from __future__ import annotations

import numpy as np

from .mesh import AugmentedMesh

DELTA_THRESHOLDS_MM = (10.0, 20.0, 40.0, 80.0, 160.0)
SURVIVAL_THRESHOLD_MM = 50.0
AUGMENTATIONS = ("TRANS", "ROT", "SCALING", "NOISE", "TRSN")


def _errors_mm(pred, gt) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[2] != 3:
        raise ValueError(f"track sets must share a (P, T, 3) shape, got {pred.shape} and {gt.shape}")
    return 1000.0 * np.linalg.norm(pred - gt, axis=2)


def tracks_from_meshes(meshes) -> np.ndarray:
    """(P, T, 3) vertex tracks from a list of T meshes."""
    return np.stack([m.vertices for m in meshes], axis=1)


def mte(pred, gt) -> float:
    """Median per-(point, time) Euclidean error in mm."""
    return float(np.median(_errors_mm(pred, gt)))


def delta_accuracy(pred, gt, thresholds=DELTA_THRESHOLDS_MM) -> dict:
    err = _errors_mm(pred, gt)
    fractions = {float(th): float(np.mean(err <= th)) for th in thresholds}
    return {"fractions": fractions, "average": float(np.mean(list(fractions.values())))}


def survival_rate(pred, gt, threshold_mm: float = SURVIVAL_THRESHOLD_MM) -> float:
    """Mean over points of the fraction of frames before the error first exceeds the threshold."""
    err = _errors_mm(pred, gt)
    n_frames = err.shape[1]
    over = err > threshold_mm
    first = np.where(over.any(axis=1), over.argmax(axis=1), n_frames)
    return float(np.mean(first / n_frames))


def evaluate_tracks(pred, gt) -> dict:
    delta = delta_accuracy(pred, gt)
    row = {"mte_mm": mte(pred, gt)}
    row.update({f"delta_{int(th)}": v for th, v in delta["fractions"].items()})
    row["delta_avg"] = delta["average"]
    row["survival"] = survival_rate(pred, gt)
    return row


def _yaw(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def apply_init_augmentation(mesh: AugmentedMesh, kind: str, rng_seed: int) -> AugmentedMesh:
    """Perturbed copy of ``mesh`` for initialisation-robustness runs.

    TRANS: x, y in [-0.05, 0.05] m and z in [-0.003, 0.003] m.  ROT: yaw in
    [-30, 30] degrees about the centroid.  SCALING: factor in [0.8, 1.2]
    about the centroid, rest lengths rescaled.  NOISE: per-vertex Gaussian
    noise with standard deviation 0.005 m.  TRSN applies all four in turn.
    """
    kind = kind.upper()
    if kind not in AUGMENTATIONS:
        raise ValueError(f"unknown augmentation {kind!r}")
    rng = np.random.default_rng(rng_seed)
    verts = np.array(mesh.vertices)
    rest = np.array(mesh.rest_edge_lengths)
    steps = ("TRANS", "ROT", "SCALING", "NOISE") if kind == "TRSN" else (kind,)
    for step in steps:
        centre = verts.mean(axis=0)
        if step == "TRANS":
            verts = verts + np.array([rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
                                      rng.uniform(-0.003, 0.003)])
        elif step == "ROT":
            verts = (verts - centre) @ _yaw(np.radians(rng.uniform(-30.0, 30.0))).T + centre
        elif step == "SCALING":
            s = rng.uniform(0.8, 1.2)
            verts = (verts - centre) * s + centre
            rest = rest * s
        else:
            verts = verts + rng.normal(0.0, 0.005, verts.shape)
    return AugmentedMesh(verts, np.array(mesh.velocities), mesh.faces, mesh.edges, rest)
