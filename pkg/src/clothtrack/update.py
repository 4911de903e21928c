"""State update: residual offset field, composite loss, refinement and tracking.

A refinement window is a short sequence of predicted meshes.  Offsets from a
time-conditioned field are added to every predicted frame and fitted by Adam
against the multi-view observations, with isometry and motion-magnitude
penalties between consecutive frames.  Image terms are differentiated by the
splatting backward pass; everything else by torch autograd.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .gns import rollout
from .mesh import AugmentedMesh
from .seeding import derive_seed
from .splat.gaussians import GaussianCloud
from .splat.raster import render_backward, render_view

DTYPE = torch.float64
MODES = ("ROLLOUT", "ITERATIVE")


class RefinementDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"refinement loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class UpdateConfig:
    # L_obs is a per-pixel mean while L_iso and L_magn are sums over vertices, hence the small weights
    w_obs: float = 1.0
    w_ssim: float = 0.0
    w_iso: float = 1e-3
    w_magn: float = 0.0
    epochs: int = 200
    lr: float = 1e-3
    mode: str = "ROLLOUT"
    horizon: int = 1
    ssim_window: int = 7
    width: int = 64
    init_std: float = 1e-4
    residual: bool = True  # False: free per-frame vertex offsets instead of the field
    frames_per_epoch: int | None = None  # frame minibatch per epoch; None renders every frame
    eval_interval: int = 10  # full-loss checkpoint cadence when minibatching
    through_face_rotation: bool = True  # exact gradient through the per-face rotations
    seed: int = 0

    def __post_init__(self):
        if min(self.w_obs, self.w_ssim, self.w_iso, self.w_magn) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.epochs < 1 or self.horizon < 1:
            raise ValueError("epochs and horizon must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.frames_per_epoch is not None and self.frames_per_epoch < 1:
            raise ValueError("frames_per_epoch must be >= 1")

    def without_regularisers(self) -> "UpdateConfig":
        return replace(self, w_ssim=0.0, w_iso=0.0, w_magn=0.0)


# --- residual field ---------------------------------------------------------------

N_FREQ = 6


def encode_time(t_hat) -> torch.Tensor:
    """(F, 12) features: sin(2^j pi t) for j < 6, then the matching cosines."""
    t = torch.as_tensor(np.atleast_1d(np.asarray(t_hat, dtype=np.float64)), dtype=DTYPE)[:, None]
    ang = t * (2.0 ** torch.arange(N_FREQ, dtype=DTYPE)) * np.pi
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class ResidualField(nn.Module):
    """Three-layer ReLU MLP from encoded time to N x 3 vertex offsets (metres)."""

    def __init__(self, n_vertices: int, width: int = 64, init_std: float = 1e-4, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(derive_seed(seed, "residual_field") % (2**63))
        self.n_vertices = n_vertices
        self.layers = nn.ModuleList([nn.Linear(2 * N_FREQ, width), nn.Linear(width, width),
                                     nn.Linear(width, 3 * n_vertices)]).to(DTYPE)
        with torch.no_grad():
            for lin in self.layers[:-1]:
                bound = 1.0 / np.sqrt(lin.in_features)
                lin.weight.uniform_(-bound, bound, generator=gen)
                lin.bias.uniform_(-bound, bound, generator=gen)
            self.layers[-1].weight.normal_(0.0, init_std, generator=gen)
            self.layers[-1].bias.normal_(0.0, init_std, generator=gen)

    def forward(self, t_hat) -> torch.Tensor:
        h = encode_time(t_hat)
        for lin in self.layers[:-1]:
            h = torch.relu(lin(h))
        return self.layers[-1](h).reshape(-1, self.n_vertices, 3)


class FrameOffsets(nn.Module):
    """Unconstrained per-frame offsets; the no-residual-field ablation."""

    def __init__(self, n_frames: int, n_vertices: int):
        super().__init__()
        self.offsets = nn.Parameter(torch.zeros(n_frames, n_vertices, 3, dtype=DTYPE))

    def forward(self, t_hat) -> torch.Tensor:
        return self.offsets


def residual_offsets(field_: nn.Module, t_hat: float) -> np.ndarray:
    if not 0.0 <= t_hat <= 1.0:
        raise ValueError("normalised time must lie in [0, 1]")
    with torch.no_grad():
        return field_([t_hat])[0].numpy().copy()


def window_times(n_frames: int) -> np.ndarray:
    """Normalised times i / F of the frames following the anchor.

    The anchor itself would sit at 0; keeping the first frame away from 0
    stops its encoding from nearly coinciding with that of the last frame.
    """
    return np.arange(1, n_frames + 1) / n_frames


# --- losses ------------------------------------------------------------------------

def ssim(x: torch.Tensor, y: torch.Tensor, window: int = 7) -> torch.Tensor:
    """Mean SSIM per image for (B, C, H, W) tensors in [0, 1], uniform window, valid region."""
    c1, c2 = 0.01**2, 0.03**2
    mu_x = F.avg_pool2d(x, window, stride=1)
    mu_y = F.avg_pool2d(y, window, stride=1)
    sxx = F.avg_pool2d(x * x, window, stride=1) - mu_x**2
    syy = F.avg_pool2d(y * y, window, stride=1) - mu_y**2
    sxy = F.avg_pool2d(x * y, window, stride=1) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return (num / den).flatten(1).mean(dim=1)


def iso_loss(vertices: torch.Tensor, edges) -> torch.Tensor:
    """Sum over consecutive frames and ordered neighbour pairs of |d_t - d_{t+1}|."""
    if vertices.shape[0] < 2:
        return vertices.sum() * 0.0
    e = torch.as_tensor(np.array(edges, dtype=np.int64))
    d = torch.linalg.norm(vertices[:, e[:, 0]] - vertices[:, e[:, 1]], dim=2)
    return 2.0 * torch.abs(d[1:] - d[:-1]).sum()


def magn_loss(vertices: torch.Tensor) -> torch.Tensor:
    if vertices.shape[0] < 2:
        return vertices.sum() * 0.0
    return ((vertices[1:] - vertices[:-1]) ** 2).sum()


def blur_images(x: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur of (B, C, H, W) images with zero padding."""
    if sigma <= 0:
        return x
    radius = int(np.ceil(3 * sigma))
    k = torch.exp(-0.5 * (torch.arange(-radius, radius + 1, dtype=DTYPE) / sigma) ** 2)
    k = k / k.sum()
    c = x.shape[1]
    x = F.conv2d(x, k.view(1, 1, 1, -1).repeat(c, 1, 1, 1), padding=(0, radius), groups=c)
    return F.conv2d(x, k.view(1, 1, -1, 1).repeat(c, 1, 1, 1), padding=(radius, 0), groups=c)


def _image_terms(vertices: np.ndarray, frames, observations, cloud, rest_mesh, cameras, cfg: UpdateConfig,
                 with_grad: bool, blur: float = 0.0, report_ssim: bool = False):
    """L_obs, L_SSIM over the chosen frames and their vertex gradient (weighted).

    L_SSIM is only evaluated when weighted or ``report_ssim`` is set, and is
    NaN otherwise.  ``blur`` (pixels) compares Gaussian-blurred images
    instead; used only by the coarse initial alignment.
    """
    renders, images = [], []
    for f in frames:
        mesh = rest_mesh.with_state(vertices[f])
        for k, cam in enumerate(cameras):
            out = render_view(cloud, mesh, rest_mesh, cam)
            renders.append((f, k, mesh, out))
            images.append(out.rgb)
    pred = torch.tensor(np.stack(images), dtype=DTYPE).permute(0, 3, 1, 2).requires_grad_(with_grad)
    obs = torch.as_tensor(np.stack([observations[f, k] for f, k, _, _ in renders]),
                          dtype=DTYPE).permute(0, 3, 1, 2)
    if blur > 0:
        l_obs = ((blur_images(pred, blur) - blur_images(obs, blur)) ** 2).mean()
        grad = None
        if with_grad:
            (g_img,) = torch.autograd.grad(cfg.w_obs * l_obs, pred)
            grad = _vertex_grad(vertices, renders, cloud, rest_mesh, cameras, g_img, cfg)
        return float(l_obs.detach()), 0.0, grad
    l_obs = ((pred - obs) ** 2).mean()
    need_ssim = cfg.w_ssim > 0 or report_ssim
    l_ssim = 1.0 - ssim(pred, obs, cfg.ssim_window).mean() if need_ssim else torch.full((), np.nan, dtype=DTYPE)
    grad = None
    if with_grad:
        weighted = cfg.w_obs * l_obs + (cfg.w_ssim * l_ssim if cfg.w_ssim > 0 else 0.0)
        (g_img,) = torch.autograd.grad(weighted, pred)
        grad = _vertex_grad(vertices, renders, cloud, rest_mesh, cameras, g_img, cfg)
    return float(l_obs.detach()), float(l_ssim.detach()), grad


def _weighted_total(cfg: UpdateConfig, l_obs, l_ssim, l_iso, l_magn) -> float:
    # an unweighted L_SSIM may be NaN (not evaluated) and must not leak into the total
    ssim_term = cfg.w_ssim * l_ssim if cfg.w_ssim > 0 else 0.0
    return cfg.w_obs * l_obs + ssim_term + cfg.w_iso * l_iso + cfg.w_magn * l_magn


def _vertex_grad(vertices, renders, cloud, rest_mesh, cameras, g_img, cfg):
    g_img = g_img.permute(0, 2, 3, 1).numpy()
    grad = np.zeros_like(vertices)
    for i, (f, k, mesh, out) in enumerate(renders):
        g = render_backward(out, cloud, mesh, rest_mesh, cameras[k], g_img[i],
                            through_face_rotation=cfg.through_face_rotation)
        grad[f] += g.vertices
    return grad


def compute_losses(meshes, observations, cloud: GaussianCloud, rest_mesh: AugmentedMesh, cameras,
                   config: UpdateConfig | None = None, anchor: AugmentedMesh | None = None) -> dict:
    """All loss terms for a refined sequence; ``anchor`` precedes the first frame in the regularisers."""
    cfg = config or UpdateConfig()
    observations = np.asarray(observations)
    if observations.shape[0] != len(meshes) or observations.shape[1] != len(cameras):
        raise ValueError(f"observations {observations.shape[:2]} do not match "
                         f"{len(meshes)} frames x {len(cameras)} views")
    verts = np.stack([m.vertices for m in meshes])
    l_obs, l_ssim, _ = _image_terms(verts, range(len(meshes)), observations, cloud, rest_mesh, cameras,
                                    cfg, with_grad=False, report_ssim=True)
    seq = verts if anchor is None else np.concatenate([anchor.vertices[None], verts])
    seq_t = torch.as_tensor(seq, dtype=DTYPE)
    l_iso = float(iso_loss(seq_t, rest_mesh.edges))
    l_magn = float(magn_loss(seq_t))
    total = _weighted_total(cfg, l_obs, l_ssim, l_iso, l_magn)
    return {"L_obs": l_obs, "L_SSIM": l_ssim, "L_iso": l_iso, "L_magn": l_magn, "total": total}


# --- refinement -----------------------------------------------------------------------

@dataclass
class RefineResult:
    meshes: list
    losses: list  # one dict per recorded epoch
    best_epoch: int
    field: nn.Module
    initial_total: float
    best_total: float
    checkpoints: list = field(default_factory=list)  # (wall seconds, best total so far)


def _with_fd_velocities(positions: np.ndarray, template: list, anchor, dt: float) -> list:
    out = []
    prev = None if anchor is None else anchor.vertices
    for i, x in enumerate(positions):
        vel = template[i].velocities if prev is None else (x - prev) / dt
        out.append(template[i].with_state(x, vel))
        prev = x
    return out


def refine_states(predicted, observations, cloud: GaussianCloud, cameras, config: UpdateConfig | None = None,
                  field_: nn.Module | None = None, rest_mesh: AugmentedMesh | None = None,
                  anchor: AugmentedMesh | None = None, dt: float = 1.0, log=None,
                  on_checkpoint=None) -> RefineResult:
    """Fit offsets to ``predicted`` frames against ``observations`` (F x K x H x W x 3).

    Only the field parameters move; the cloud is frozen.  The best iterate by
    total loss is returned, with the unrefined prediction as epoch -1.  ``on_checkpoint(seconds, meshes)`` is called
    whenever the best iterate improves, for convergence curves.
    """
    cfg = config or UpdateConfig()
    predicted = list(predicted)
    observations = np.asarray(observations, dtype=np.float64)
    n_frames = len(predicted)
    if observations.shape[0] != n_frames or observations.shape[1] != len(cameras):
        raise ValueError("observations must be frames x views matching the predictions")
    rest_mesh = rest_mesh or predicted[0]
    n = rest_mesh.n_vertices
    if field_ is None:
        field_ = (ResidualField(n, cfg.width, cfg.init_std, cfg.seed) if cfg.residual
                  else FrameOffsets(n_frames, n))
    base = torch.as_tensor(np.stack([m.vertices for m in predicted]), dtype=DTYPE)
    t_hat = window_times(n_frames)
    anchor_t = None if anchor is None else torch.tensor(np.array(anchor.vertices), dtype=DTYPE)[None]
    opt = torch.optim.Adam(field_.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(derive_seed(cfg.seed, "refine_frames", n_frames))
    minibatch = cfg.frames_per_epoch is not None and cfg.frames_per_epoch < n_frames
    all_frames = list(range(n_frames))
    start = time.perf_counter()

    def regularisers(v):
        seq = v if anchor_t is None else torch.cat([anchor_t, v])
        return iso_loss(seq, rest_mesh.edges), magn_loss(seq)

    def full_total(v_np):
        l_obs, l_ssim, _ = _image_terms(v_np, all_frames, observations, cloud, rest_mesh, cameras, cfg, False)
        with torch.no_grad():
            iso, magn = regularisers(torch.as_tensor(v_np))
        return _weighted_total(cfg, l_obs, l_ssim, iso.item(), magn.item())

    # the unrefined prediction competes as epoch -1, so refinement never makes the loss worse
    raw = base.numpy().copy()
    initial_total = full_total(raw)
    best = (initial_total, raw, -1)
    history = []
    checkpoints = []
    for epoch in range(cfg.epochs + 1):
        verts = base + field_(t_hat)
        v_np = verts.detach().numpy().copy()
        last = epoch == cfg.epochs
        if minibatch and not last:
            frames = sorted(rng.choice(n_frames, cfg.frames_per_epoch, replace=False).tolist())
        else:
            frames = all_frames
        l_obs, l_ssim, g_img = _image_terms(v_np, frames, observations, cloud, rest_mesh, cameras, cfg,
                                            with_grad=not last, report_ssim=last)
        iso, magn = regularisers(verts)
        total = _weighted_total(cfg, l_obs, l_ssim, iso.item(), magn.item())
        if not np.isfinite(total):
            raise RefinementDiverged(epoch)
        rec = {"epoch": epoch, "L_obs": l_obs, "L_SSIM": l_ssim, "L_iso": iso.item(), "L_magn": magn.item(),
               "total": total}
        history.append(rec)
        if log:
            log(rec)
        if not minibatch or frames is all_frames:
            exact = total
        elif epoch % cfg.eval_interval == 0:
            exact = full_total(v_np)
        else:
            exact = None
        if exact is not None:
            if exact < best[0]:
                best = (exact, v_np, epoch)
                elapsed = time.perf_counter() - start
                checkpoints.append((elapsed, exact))
                if on_checkpoint:
                    on_checkpoint(elapsed, _with_fd_velocities(v_np, predicted, anchor, dt))
        if last:
            break
        opt.zero_grad()
        surrogate = (verts * torch.as_tensor(g_img)).sum() + cfg.w_iso * iso + cfg.w_magn * magn
        surrogate.backward()
        opt.step()
    meshes = _with_fd_velocities(best[1], predicted, anchor, dt)
    return RefineResult(meshes, history, best[2], field_, float(initial_total), float(best[0]), checkpoints)


def field_objective(field_: nn.Module, predicted, observations, cloud: GaussianCloud, cameras,
                    config: UpdateConfig | None = None, rest_mesh: AugmentedMesh | None = None,
                    anchor: AugmentedMesh | None = None):
    """Total refinement loss of ``field_`` over all frames and its gradient per field parameter.

    Uses the same image and regulariser routes as ``refine_states``; exposed
    so the parameter gradient can be checked against finite differences.
    """
    cfg = config or UpdateConfig()
    rest_mesh = rest_mesh or predicted[0]
    observations = np.asarray(observations, dtype=np.float64)
    base = torch.as_tensor(np.stack([m.vertices for m in predicted]), dtype=DTYPE)
    verts = base + field_(window_times(len(predicted)))
    v_np = verts.detach().numpy().copy()
    l_obs, l_ssim, g_img = _image_terms(v_np, range(len(predicted)), observations, cloud, rest_mesh, cameras,
                                        cfg, with_grad=True)
    seq = verts if anchor is None else torch.cat([torch.tensor(np.array(anchor.vertices), dtype=DTYPE)[None], verts])
    iso, magn = iso_loss(seq, rest_mesh.edges), magn_loss(seq)
    total = _weighted_total(cfg, l_obs, l_ssim, iso.item(), magn.item())
    field_.zero_grad()
    ((verts * torch.as_tensor(g_img)).sum() + cfg.w_iso * iso + cfg.w_magn * magn).backward()
    grads = [p.grad.detach().numpy().copy() for p in field_.parameters()]
    field_.zero_grad()
    return total, grads


def _skew(w: torch.Tensor) -> torch.Tensor:
    z = torch.zeros((), dtype=DTYPE)
    return torch.stack([torch.stack([z, -w[2], w[1]]), torch.stack([w[2], z, -w[0]]),
                        torch.stack([-w[1], w[0], z])])


@dataclass
class AlignResult:
    mesh: AugmentedMesh
    translation: np.ndarray
    rotation: np.ndarray
    scale: float
    losses: list


def align_similarity(mesh: AugmentedMesh, observations, cloud: GaussianCloud, cameras,
                     rest_mesh: AugmentedMesh | None = None, blur_levels=(8.0, 4.0, 2.0),
                     iterations: int = 20, lr: float = 0.05, config: UpdateConfig | None = None) -> AlignResult:
    """Coarse-to-fine similarity alignment of one state to its K views.

    Translation, rotation (about the centroid) and uniform scale are fitted
    against increasingly sharp Gaussian-blurred images, which reaches
    offsets far wider than the splat footprints.  Rest lengths are scaled
    with the estimated scale.  ``observations`` is K x H x W x 3.
    """
    cfg = replace(config or UpdateConfig(), w_obs=1.0)
    rest_mesh = rest_mesh or mesh
    obs = np.asarray(observations, dtype=np.float64)[None]
    v0 = torch.tensor(np.array(mesh.vertices), dtype=DTYPE)
    centre = v0.mean(dim=0)
    extent = float(np.linalg.norm(np.ptp(mesh.vertices, axis=0))) or 1.0
    # unit-free parameters: translation in extents, scale in log units
    params = {k: torch.zeros(3 if k != "s" else 1, dtype=DTYPE, requires_grad=True) for k in ("t", "w", "s")}
    opt = torch.optim.Adam(params.values(), lr=lr)

    def pose():
        rot = torch.linalg.matrix_exp(_skew(params["w"]))
        v = centre + torch.exp(params["s"]) * (v0 - centre) @ rot.T + extent * params["t"]
        return v, rot

    history = []
    for sigma in blur_levels:
        for _ in range(iterations):
            v, _ = pose()
            v_np = v.detach().numpy()[None].copy()
            l_obs, _, grad = _image_terms(v_np, [0], obs, cloud, rest_mesh, cameras, cfg, True, blur=sigma)
            history.append({"blur": sigma, "L_obs": l_obs})
            opt.zero_grad()
            (v * torch.as_tensor(grad[0])).sum().backward()
            opt.step()
    with torch.no_grad():
        v, rot = pose()
        scale = float(torch.exp(params["s"]))
    aligned = AugmentedMesh(v.numpy().copy(), np.array(mesh.velocities) @ rot.numpy().T * scale, mesh.faces,
                            mesh.edges, mesh.rest_edge_lengths * scale)
    return AlignResult(aligned, extent * params["t"].detach().numpy().copy(), rot.numpy().copy(), scale, history)


# --- tracking ---------------------------------------------------------------------------

class StaticPrior:
    """Predicts no motion at all; the no-dynamics ablation."""

    name = "static"

    def predict(self, history, action, grasped_vertex: int, dt: float) -> AugmentedMesh:
        cur = list(history)[-1]
        return cur.with_state(cur.vertices)


@dataclass
class TrackResult:
    meshes: list  # T + 1 states, index 0 is the (possibly refined) initial state
    predicted: list  # prior predictions before refinement, T + 1 with the initial state first
    step_seconds: list
    wall_seconds: float
    losses: list
    checkpoints: list = field(default_factory=list)  # (wall seconds, meshes) for time ablations


def track(scene, prior, cloud: GaussianCloud, config: UpdateConfig | None = None,
          initial: AugmentedMesh | None = None, views=None, refine: bool = True,
          refine_initial: bool = False, record_checkpoints: bool = False) -> TrackResult:
    """Estimate every state of ``scene`` with ``prior`` predictions refined against its images.

    ``initial`` replaces the ground-truth t = 0 state (initialisation-error
    experiments); ``views`` selects a camera subset.
    """
    cfg = config or UpdateConfig()
    if scene.n_steps < 1:
        raise ValueError("scene has no steps")
    rest = scene.rest_mesh
    views = list(range(len(scene.cameras))) if views is None else list(views)
    cams = [scene.cameras[k] for k in views]
    obs = scene.observations[:, views]
    actions = scene.trajectory.actions
    dt = scene.trajectory.dt
    grasp = scene.grasped_vertex
    init = initial or scene.ground_truth[0]
    start = time.perf_counter()
    losses, step_seconds, checkpoints = [], [], []

    if refine and refine_initial:
        init = align_similarity(init, obs[0], cloud, cams, rest, config=cfg).mesh
        res = refine_states([init], obs[:1], cloud, cams, cfg, rest_mesh=rest, dt=dt)
        init = res.meshes[0]
        losses.extend(res.losses)

    if not refine:
        preds = rollout(prior, [init], actions, grasp, dt)
        wall = time.perf_counter() - start
        return TrackResult([init] + preds, [init] + preds, [wall / len(actions)] * len(actions), wall, losses)

    horizon = scene.n_steps if cfg.mode == "ROLLOUT" else cfg.horizon
    states = [init]
    predicted = [init]
    t = 0
    while t < scene.n_steps:
        t0 = time.perf_counter()
        h = min(horizon, scene.n_steps - t)
        preds = rollout(prior, states[-4:], actions[t:t + h], grasp, dt)
        predicted.extend(preds)
        window, anchor, frames = preds, states[-1], obs[t + 1:t + h + 1]
        wcfg = replace(cfg, seed=derive_seed(cfg.seed, "window", t))
        on_ckpt = None
        if record_checkpoints and cfg.mode == "ROLLOUT":
            def on_ckpt(sec, meshes, _base=time.perf_counter() - start):
                checkpoints.append((_base + sec, meshes))
        res = refine_states(window, frames, cloud, cams, wcfg, rest_mesh=rest, anchor=anchor, dt=dt,
                            on_checkpoint=on_ckpt)
        losses.extend(res.losses)
        states.extend(res.meshes)
        t += h
        step_seconds.extend([(time.perf_counter() - t0) / h] * h)
    wall = time.perf_counter() - start
    return TrackResult(states, predicted, step_seconds, wall, losses, checkpoints)
