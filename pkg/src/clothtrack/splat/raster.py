"""Front-to-back alpha compositing of projected Gaussians and its exact adjoint.

Gaussians are sorted once per view by camera depth and splatted in that
order over their 3-sigma boxes, so every pixel is composited front to back.
The per-(Gaussian, pixel) alpha and transmittance are kept for the backward
pass, which walks the same lists back to front.

The footprint weight is ``(exp(-q) - exp(-Q)) / (1 - exp(-Q))`` with
``q = d^T cov2d^-1 d / 2`` and ``Q = 4.5`` (the 3-sigma ellipse).  It equals
one at the centre and reaches zero continuously at the ellipse, so images
stay continuous in every parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from ..mesh import AugmentedMesh
from .camera import CameraView, Projection, project_gaussians
from .gaussians import (LOG_SCALE_RANGE, GaussianCloud, WorldGaussians, quat_backward,
                        world_gaussians)

CUTOFF_Q = 4.5
_EXP_CUT = float(np.exp(-CUTOFF_Q))
_TAPER = 1.0 / (1.0 - _EXP_CUT)


@njit(cache=True)
def _forward_kernel(order, mean2d, conic, opac, colors, box, offsets, height, width,
                    alpha_buf, trans_buf):
    image = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    for gi in order:
        x0, x1, y0, y1 = box[gi, 0], box[gi, 1], box[gi, 2], box[gi, 3]
        k = offsets[gi]
        mx, my = mean2d[gi, 0], mean2d[gi, 1]
        a, b, c = conic[gi, 0], conic[gi, 1], conic[gi, 2]
        o = opac[gi]
        for r in range(y0, y1 + 1):
            dy = r + 0.5 - my
            for col in range(x0, x1 + 1):
                dx = col + 0.5 - mx
                q = 0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
                alpha = 0.0
                if q < CUTOFF_Q:
                    alpha = o * (np.exp(-q) - _EXP_CUT) * _TAPER
                t = trans[r, col]
                alpha_buf[k] = alpha
                trans_buf[k] = t
                k += 1
                if alpha > 0.0:
                    w = alpha * t
                    image[r, col, 0] += w * colors[gi, 0]
                    image[r, col, 1] += w * colors[gi, 1]
                    image[r, col, 2] += w * colors[gi, 2]
                    trans[r, col] = t * (1.0 - alpha)
    return image, trans


@njit(cache=True)
def _backward_kernel(order, mean2d, conic, opac, colors, box, offsets, height, width,
                     alpha_buf, trans_buf, pixel_grad):
    n = mean2d.shape[0]
    g_color = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    behind = np.zeros((height, width, 3))
    for idx in range(order.shape[0] - 1, -1, -1):
        gi = order[idx]
        x0, x1, y0, y1 = box[gi, 0], box[gi, 1], box[gi, 2], box[gi, 3]
        k = offsets[gi]
        mx, my = mean2d[gi, 0], mean2d[gi, 1]
        a, b, c = conic[gi, 0], conic[gi, 1], conic[gi, 2]
        o = opac[gi]
        cr, cg, cb = colors[gi, 0], colors[gi, 1], colors[gi, 2]
        for r in range(y0, y1 + 1):
            dy = r + 0.5 - my
            for col in range(x0, x1 + 1):
                alpha = alpha_buf[k]
                t = trans_buf[k]
                k += 1
                if alpha <= 0.0:
                    continue
                dx = col + 0.5 - mx
                gr, gg, gb = pixel_grad[r, col, 0], pixel_grad[r, col, 1], pixel_grad[r, col, 2]
                w = alpha * t
                g_color[gi, 0] += w * gr
                g_color[gi, 1] += w * gg
                g_color[gi, 2] += w * gb
                br, bg, bb = behind[r, col, 0], behind[r, col, 1], behind[r, col, 2]
                d_alpha = t * (gr * (cr - br) + gg * (cg - bg) + gb * (cb - bb))
                behind[r, col, 0] = alpha * cr + (1.0 - alpha) * br
                behind[r, col, 1] = alpha * cg + (1.0 - alpha) * bg
                behind[r, col, 2] = alpha * cb + (1.0 - alpha) * bb
                q = 0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
                e = np.exp(-q)
                g_opac[gi] += d_alpha * (e - _EXP_CUT) * _TAPER
                d_q = -d_alpha * o * e * _TAPER
                g_mean[gi, 0] -= d_q * (a * dx + b * dy)
                g_mean[gi, 1] -= d_q * (b * dx + c * dy)
                g_conic[gi, 0] += d_q * 0.5 * dx * dx
                g_conic[gi, 1] += d_q * dx * dy
                g_conic[gi, 2] += d_q * 0.5 * dy * dy
    return g_color, g_opac, g_mean, g_conic


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3)
    opacity: np.ndarray  # (H, W) accumulated alpha
    world: WorldGaussians
    proj: Projection
    order: np.ndarray
    conic: np.ndarray
    box: np.ndarray
    offsets: np.ndarray
    alpha_buf: np.ndarray
    trans_buf: np.ndarray
    opac: np.ndarray
    vertices: np.ndarray
    cloud: GaussianCloud


@dataclass
class RenderGradients:
    vertices: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    bc: np.ndarray

    def __iadd__(self, other: "RenderGradients"):
        for f in ("vertices", "colors", "opacity_logits", "log_scales", "quats", "bc"):
            getattr(self, f).__iadd__(getattr(other, f))
        return self


def _screen_setup(proj: Projection, cam: CameraView):
    cov = proj.cov2d
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    conic = np.stack([cov[:, 1, 1] / det, -cov[:, 0, 1] / det, cov[:, 0, 0] / det], axis=1)
    rx = np.sqrt(2.0 * CUTOFF_Q * cov[:, 0, 0])
    ry = np.sqrt(2.0 * CUTOFF_Q * cov[:, 1, 1])
    mx, my = proj.mean2d[:, 0], proj.mean2d[:, 1]
    box = np.stack([
        np.ceil(mx - rx - 0.5), np.floor(mx + rx - 0.5),
        np.ceil(my - ry - 0.5), np.floor(my + ry - 0.5),
    ], axis=1)
    box[:, 0:2] = np.clip(box[:, 0:2], 0, cam.width - 1)
    box[:, 2:4] = np.clip(box[:, 2:4], 0, cam.height - 1)
    box = box.astype(np.int64)
    outside = ((mx + rx < 0) | (mx - rx > cam.width) | (my + ry < 0) | (my - ry > cam.height)
               | ~proj.valid)
    box[outside] = (0, -1, 0, -1)
    area = np.maximum(box[:, 1] - box[:, 0] + 1, 0) * np.maximum(box[:, 3] - box[:, 2] + 1, 0)
    area[outside] = 0
    offsets = np.zeros(len(area), dtype=np.int64)
    offsets[1:] = np.cumsum(area)[:-1]
    return conic, box, offsets, int(area.sum())


def render_view(cloud: GaussianCloud, mesh: AugmentedMesh, rest_mesh: AugmentedMesh,
                camera: CameraView, world: WorldGaussians | None = None) -> RenderOutput:
    """Render ``cloud`` attached to ``mesh`` from ``camera`` on a black background."""
    if world is None:
        world = world_gaussians(cloud, mesh, rest_mesh)
    proj = project_gaussians(world.means, world.covs, camera)
    conic, box, offsets, total = _screen_setup(proj, camera)
    depth = np.where(proj.valid, proj.p_cam[:, 2], np.inf)
    order = np.argsort(depth, kind="stable")
    order = order[proj.valid[order]]
    opac = cloud.opacities
    alpha_buf = np.empty(total)
    trans_buf = np.empty(total)
    image, trans = _forward_kernel(order, proj.mean2d, conic, opac, cloud.colors, box, offsets,
                                   camera.height, camera.width, alpha_buf, trans_buf)
    return RenderOutput(image, 1.0 - trans, world, proj, order, conic, box, offsets,
                        alpha_buf, trans_buf, opac, np.array(mesh.vertices), cloud.copy())


def _procrustes_backward(rest_tris, def_tris, rots, grad_rot):
    """Adjoint of :func:`face_rotations` w.r.t. the deformed corners (F x 3 x 3)."""
    a = rest_tris - rest_tris.mean(axis=1, keepdims=True)
    b = def_tris - def_tris.mean(axis=1, keepdims=True)
    cov = np.einsum("fki,fkj->fij", b, a)
    # cov = R P with P symmetric; solve (Omega P + P Omega) = skew system in P's eigenbasis
    p = np.swapaxes(rots, 1, 2) @ cov
    p = 0.5 * (p + np.swapaxes(p, 1, 2))
    s, v = np.linalg.eigh(p)
    a_mat = np.swapaxes(rots, 1, 2) @ grad_rot
    skew = 0.5 * (a_mat - np.swapaxes(a_mat, 1, 2))
    sk = np.swapaxes(v, 1, 2) @ skew @ v
    denom = s[:, :, None] + s[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        zt = np.where(np.abs(denom) > 1e-18, sk / denom, 0.0)
    z = v @ zt @ np.swapaxes(v, 1, 2)
    grad_cov = 2.0 * rots @ z
    # cov = sum_k b_k a_k^T with b centred; centring drops out because sum_k a_k = 0
    return np.einsum("fij,fkj->fki", grad_cov, a)


def render_backward(output: RenderOutput, cloud: GaussianCloud, mesh: AugmentedMesh,
                    rest_mesh: AugmentedMesh, camera: CameraView, pixel_grad: np.ndarray,
                    through_face_rotation: bool = False) -> RenderGradients:
    """Reverse-mode gradients of ``sum(pixel_grad * output.rgb)``.

    By default face rotations are treated as constants with respect to the
    vertices; ``through_face_rotation=True`` also differentiates the
    rotation registration.
    """
    if not (np.array_equal(output.vertices, mesh.vertices) and output.cloud.params_equal(cloud)):
        raise ValueError("render_backward inputs do not match the forward pass")
    pixel_grad = np.asarray(pixel_grad, dtype=np.float64)
    if pixel_grad.shape != output.rgb.shape:
        raise ValueError(f"pixel_grad shape {pixel_grad.shape} != image shape {output.rgb.shape}")
    proj, world = output.proj, output.world
    g_color, g_opac, g_mean2d, g_conic = _backward_kernel(
        output.order, proj.mean2d, output.conic, output.opac, cloud.colors, output.box,
        output.offsets, camera.height, camera.width, output.alpha_buf, output.trans_buf,
        np.ascontiguousarray(pixel_grad))

    # conic -> 2D covariance
    a_inv = np.empty((len(cloud), 2, 2))
    a_inv[:, 0, 0] = output.conic[:, 0]
    a_inv[:, 0, 1] = a_inv[:, 1, 0] = output.conic[:, 1]
    a_inv[:, 1, 1] = output.conic[:, 2]
    g_a = np.empty_like(a_inv)
    g_a[:, 0, 0] = g_conic[:, 0]
    g_a[:, 0, 1] = g_a[:, 1, 0] = 0.5 * g_conic[:, 1]
    g_a[:, 1, 1] = g_conic[:, 2]
    g_cov2d = -a_inv @ g_a @ a_inv

    rot_w = camera.rotation
    jac = proj.jac
    t = jac @ rot_w
    g_cov3d = np.swapaxes(t, 1, 2) @ g_cov2d @ t
    g_t = 2.0 * g_cov2d @ t @ world.covs
    g_jac = g_t @ rot_w.T

    x, y, z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
    z = np.where(proj.valid, z, 1.0)
    fx, fy = camera.fx, camera.fy
    g_p = np.einsum("gij,gi->gj", jac, g_mean2d)
    g_p[:, 0] += g_jac[:, 0, 2] * (-fx / z**2)
    g_p[:, 1] += g_jac[:, 1, 2] * (-fy / z**2)
    g_p[:, 2] += (g_jac[:, 0, 0] * (-fx / z**2) + g_jac[:, 0, 2] * (2 * fx * x / z**3)
                  + g_jac[:, 1, 1] * (-fy / z**2) + g_jac[:, 1, 2] * (2 * fy * y / z**3))
    g_p[~proj.valid] = 0.0
    g_cov3d[~proj.valid] = 0.0
    g_mu = g_p @ rot_w

    # covariance -> rotation and scales
    rot, scales = world.rotations, world.scales
    m = rot * scales[:, None, :]
    g_m = 2.0 * g_cov3d @ m
    g_scales = np.einsum("gik,gik->gk", g_m, rot)
    in_range = (cloud.log_scales > LOG_SCALE_RANGE[0]) & (cloud.log_scales < LOG_SCALE_RANGE[1])
    g_log_scales = g_scales * scales * in_range
    g_rot = g_m * scales[:, None, :]
    g_local = np.swapaxes(world.face_rot, 1, 2) @ g_rot
    g_quats = quat_backward(cloud.quats, g_local)

    # barycentric centre -> vertices and weights
    faces = mesh.faces[cloud.face_ids]
    tri = mesh.vertices[faces]
    g_bc = np.einsum("gkj,gj->gk", tri, g_mu)
    g_vertices = np.zeros_like(mesh.vertices)
    np.add.at(g_vertices, faces.ravel(), (cloud.bc[:, :, None] * g_mu[:, None, :]).reshape(-1, 3))

    if through_face_rotation:
        g_face_rot = np.zeros((mesh.n_faces, 3, 3))
        np.add.at(g_face_rot, cloud.face_ids, g_rot @ np.swapaxes(world.local_rot, 1, 2))
        used = np.unique(cloud.face_ids)
        g_tri = _procrustes_backward(rest_mesh.face_vertices()[used], mesh.face_vertices()[used],
                                     world.face_rotations[used], g_face_rot[used])
        np.add.at(g_vertices, mesh.faces[used].ravel(), g_tri.reshape(-1, 3))

    opac = output.opac
    return RenderGradients(
        vertices=g_vertices,
        colors=g_color,
        opacity_logits=g_opac * opac * (1.0 - opac),
        log_scales=g_log_scales,
        quats=g_quats,
        bc=g_bc,
    )
