"""Appearance fitting: optimise a cloud against the t = 0 observations on a fixed mesh."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..mesh import AugmentedMesh, reassign_face
from ..optim import Adam, cosine_freeze
from .camera import CameraView
from .gaussians import LOG_SCALE_RANGE, GaussianCloud
from .raster import render_backward, render_view

PARAM_NAMES = ("colors", "opacity_logits", "log_scales", "quats", "bc")


class AllGaussiansPruned(RuntimeError):
    pass


@dataclass
class FitConfig:
    iterations: int = 500
    lr: dict = field(default_factory=lambda: {
        "colors": 0.03, "opacity_logits": 0.05, "log_scales": 0.01, "quats": 0.01, "bc": 0.01,
    })
    anneal_iters: int | None = None  # defaults to ``iterations``
    final_lr_fraction: float = 0.05
    prune_interval: int = 100
    prune_threshold: float = 0.3


@dataclass
class FitResult:
    cloud: GaussianCloud
    losses: list
    initial_loss: float
    best_loss: float


def observation_loss(cloud: GaussianCloud, mesh: AugmentedMesh, rest_mesh: AugmentedMesh,
                     cameras, observations, with_grad: bool = False):
    """Mean squared RGB error over views; optionally the cloud gradients (vertices ignored)."""
    n = observations.size
    loss, grads = 0.0, None
    for k, cam in enumerate(cameras):
        out = render_view(cloud, mesh, rest_mesh, cam)
        resid = out.rgb - observations[k]
        loss += float(np.sum(resid**2)) / n
        if with_grad:
            g = render_backward(out, cloud, mesh, rest_mesh, cam, 2.0 * resid / n)
            if grads is None:
                grads = g
            else:
                grads += g
    return loss, grads


def _reassign_negative(cloud: GaussianCloud, mesh: AugmentedMesh) -> None:
    for i in np.nonzero(cloud.bc.min(axis=1) < 0)[0]:
        cloud.face_ids[i], cloud.bc[i] = reassign_face(mesh, int(cloud.face_ids[i]), cloud.bc[i])


def fit_appearance(cloud: GaussianCloud, mesh: AugmentedMesh, observations, cameras: list[CameraView],
                   config: FitConfig | None = None, rest_mesh: AugmentedMesh | None = None,
                   return_result: bool = False):
    """Fit colours, opacities, scales, local rotations and bc to the t = 0 views.

    ``mesh`` is the t = 0 state (also the rest state unless ``rest_mesh`` is
    given).  The best iterate is returned, so the final loss never exceeds
    the initial one.
    """
    cfg = config or FitConfig()
    observations = np.asarray(observations, dtype=np.float64)
    if len(cameras) < 1 or observations.shape[0] != len(cameras):
        raise ValueError("need one observation per camera and at least one view")
    rest_mesh = rest_mesh or mesh
    anneal = cfg.anneal_iters or cfg.iterations
    start = cloud.copy()
    cloud = cloud.copy()
    params = {k: getattr(cloud, k) for k in PARAM_NAMES}
    opt = Adam(params, {k: cfg.lr[k] for k in PARAM_NAMES})
    losses = []
    best_cloud, best_loss, initial = cloud.copy(), np.inf, None
    for it in range(cfg.iterations + 1):
        loss, grads = observation_loss(cloud, mesh, rest_mesh, cameras, observations,
                                       with_grad=it < cfg.iterations)
        losses.append(loss)
        if initial is None:
            initial = loss
        if loss < best_loss:
            best_loss, best_cloud = loss, cloud.copy()
        if it == cfg.iterations:
            break
        scale = cosine_freeze(it, anneal, cfg.final_lr_fraction)
        if scale == 0.0:
            break
        g = {k: getattr(grads, k) for k in PARAM_NAMES}
        g["bc"] = g["bc"] - g["bc"].mean(axis=1, keepdims=True)
        new = opt.step({k: getattr(cloud, k) for k in PARAM_NAMES}, g, scale)
        cloud.colors = np.clip(new["colors"], 0.0, 1.0)
        cloud.opacity_logits = new["opacity_logits"]
        cloud.log_scales = np.clip(new["log_scales"], *LOG_SCALE_RANGE)
        cloud.quats = new["quats"] / np.linalg.norm(new["quats"], axis=1, keepdims=True)
        cloud.bc = new["bc"] / new["bc"].sum(axis=1, keepdims=True)
        _reassign_negative(cloud, mesh)
        if cfg.prune_interval and (it + 1) % cfg.prune_interval == 0:
            keep = cloud.opacities >= cfg.prune_threshold
            if not keep.any():
                raise AllGaussiansPruned(f"every Gaussian fell below opacity {cfg.prune_threshold}")
            if not keep.all():
                cloud = cloud.subset(keep)
                opt.keep(keep)
                # the best iterate must remain comparable with the pruned cloud
                best_loss = np.inf
    if best_loss > initial:
        # pruning can leave only iterates worse than the start; fall back to the input
        best_cloud, best_loss = start, initial
    result = FitResult(best_cloud, losses, float(initial), float(best_loss))
    return result if return_result else best_cloud
