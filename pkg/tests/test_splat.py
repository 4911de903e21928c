import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from clothtrack.mesh import grid_mesh
from clothtrack.splat.camera import hemisphere_cameras, look_at, project_gaussian
from clothtrack.splat.fit import FitConfig, fit_appearance, observation_loss
from clothtrack.splat.gaussians import (GaussianCloud, attach_gaussians, quat_to_rotmat, rotmat_to_quat,
                                        world_gaussians)
from clothtrack.splat.raster import render_backward, render_view

from gradcheck import finite_difference, micro_scene, relative_errors, scene_errors


@pytest.mark.parametrize("seed", [0, 1])
def test_backward_matches_finite_differences(seed):
    errs = scene_errors(seed)
    for name, e in errs.items():
        assert np.percentile(e, 95) < 1e-3, name


def test_exact_vertex_gradient_through_rotations():
    errs = scene_errors(3, through_face_rotation=True)
    assert np.percentile(errs["vertices"], 95) < 1e-3


def test_quaternion_gradient():
    rest, mesh, cloud, cam, pg = micro_scene(5)
    out = render_view(cloud, mesh, rest, cam)
    g = render_backward(out, cloud, mesh, rest, cam, pg)
    fd = finite_difference(cloud, mesh, rest, cam, pg, "quats")
    assert np.percentile(relative_errors(g.quats, fd), 95) < 1e-3


def test_stop_gradient_differs_from_exact():
    rest, mesh, cloud, cam, pg = micro_scene(4)
    out = render_view(cloud, mesh, rest, cam)
    a = render_backward(out, cloud, mesh, rest, cam, pg).vertices
    b = render_backward(out, cloud, mesh, rest, cam, pg, through_face_rotation=True).vertices
    assert not np.allclose(a, b)


def test_backward_rejects_mismatched_inputs():
    rest, mesh, cloud, cam, pg = micro_scene(0)
    out = render_view(cloud, mesh, rest, cam)
    with pytest.raises(ValueError):
        render_backward(out, cloud, rest, rest, cam, pg)
    with pytest.raises(ValueError):
        render_backward(out, cloud, mesh, rest, cam, pg[:8])


def test_project_centre_and_cull():
    cam = look_at([0, 0, 1.0], [0, 0, 0], up=(0, 1, 0), width=32, height=32)
    mean2d, cov2d, culled = project_gaussian([0, 0, 0], np.eye(3) * 1e-4, cam)
    assert np.allclose(mean2d, [16, 16]) and not culled
    assert np.allclose(cov2d, cov2d.T) and np.all(np.linalg.eigvalsh(cov2d) > 0)
    assert project_gaussian([0, 0, 2.0], np.eye(3) * 1e-4, cam)[2]


def test_single_opaque_gaussian_peaks_at_centre():
    mesh = grid_mesh(0.1, 0.1, 2, 2)
    cloud = attach_gaussians(mesh, 1, 0, opacity_logit=20.0, color=(1.0, 0.0, 0.0)).subset([0])
    cam = look_at([0.05, 0.03, 0.4], [0.05, 0.03, 0.0], up=(0, 1, 0), width=32, height=32)
    img = render_view(cloud, mesh, mesh, cam).rgb
    centre = world_gaussians(cloud, mesh, mesh).means[0]
    mean2d, _, _ = project_gaussian(centre, np.eye(3), cam)
    iy, ix = np.unravel_index(np.argmax(img[..., 0]), img.shape[:2])
    assert abs(ix + 0.5 - mean2d[0]) <= 1 and abs(iy + 0.5 - mean2d[1]) <= 1
    assert img[..., 1:].max() == 0.0 and img.max() <= 1.0


def test_empty_cloud_renders_black():
    mesh = grid_mesh(0.1, 0.1, 2, 2)
    cloud = attach_gaussians(mesh, 1, 0).subset(np.zeros(2, bool))
    img = render_view(cloud, mesh, mesh, hemisphere_cameras([0.05, 0.05, 0], 1, width=8, height=8)[0]).rgb
    assert np.all(img == 0)


def test_front_gaussian_occludes_back():
    mesh = grid_mesh(0.1, 0.1, 2, 2)
    cloud = attach_gaussians(mesh, 1, 0, opacity_logit=30.0)
    lifted = mesh.with_state(mesh.vertices)
    cam = look_at([0.05, 0.05, 0.5], [0.05, 0.05, 0.0], up=(0, 1, 0), width=16, height=16)
    cloud.colors[:] = [[1, 0, 0], [0, 0, 1]]
    cloud.log_scales[:, :2] = np.log(0.05)
    cloud.bc[:] = [1 / 3, 1 / 3, 1 / 3]
    img = render_view(cloud, lifted, mesh, cam).rgb
    # both overlap at the centre; the image is dominated by whichever is nearer the camera
    depth = world_gaussians(cloud, lifted, mesh).means @ cam.rotation[2]
    front = int(np.argmin(depth))
    centre = img[8, 8]
    assert centre[0 if front == 0 else 2] > 0.9


@settings(max_examples=50, deadline=None)
@given(q=arrays(np.float64, 4, elements=st.floats(-1, 1)))
def test_quaternion_round_trip(q):
    if np.linalg.norm(q) < 1e-3:
        return
    r = quat_to_rotmat(q[None])[0]
    assert np.allclose(r @ r.T, np.eye(3), atol=1e-12) and np.isclose(np.linalg.det(r), 1.0)
    assert np.allclose(quat_to_rotmat(rotmat_to_quat(r)), r, atol=1e-9)


def test_rigid_motion_moves_gaussians_rigidly(rng):
    mesh = grid_mesh(0.1, 0.1, 3, 3)
    cloud = attach_gaussians(mesh, 2, 0)
    from scipy.spatial.transform import Rotation
    r = Rotation.from_rotvec([0.3, -0.2, 0.5]).as_matrix()
    moved = mesh.with_state(mesh.vertices @ r.T + [0.1, 0.0, 0.2])
    w0, w1 = world_gaussians(cloud, mesh, mesh), world_gaussians(cloud, moved, mesh)
    assert np.allclose(w1.means, w0.means @ r.T + [0.1, 0.0, 0.2])
    assert np.allclose(w1.covs, r @ w0.covs @ r.T)


def test_cloud_serialisation(tmp_path):
    cloud = attach_gaussians(grid_mesh(0.1, 0.1, 3, 3), 2, 4)
    cloud.save(tmp_path / "c.json")
    assert GaussianCloud.load(tmp_path / "c.json").params_equal(cloud)


def test_attach_places_centres_inside_faces():
    mesh = grid_mesh(0.2, 0.2, 5, 5)
    cloud = attach_gaussians(mesh, 3, 1)
    assert len(cloud) == 3 * mesh.n_faces
    assert np.allclose(cloud.bc.sum(1), 1.0)
    assert np.all(cloud.bc > 0)


def test_fit_recovers_colours(small_scene):
    rest = small_scene.rest_mesh
    init = attach_gaussians(rest, 2, 7)
    res = fit_appearance(init, rest, small_scene.observations[0], small_scene.cameras,
                         FitConfig(iterations=120, prune_interval=0), return_result=True)
    assert res.best_loss < 0.2 * res.initial_loss
    loss, _ = observation_loss(res.cloud, rest, rest, small_scene.cameras, small_scene.observations[0])
    assert np.isclose(loss, res.best_loss)
    assert np.allclose(res.cloud.bc.sum(1), 1.0)


def test_fit_never_worse_than_start(small_scene):
    rest = small_scene.rest_mesh
    res = fit_appearance(small_scene.gt_cloud, rest, small_scene.observations[0], small_scene.cameras,
                         FitConfig(iterations=5), return_result=True)
    assert res.best_loss <= res.initial_loss


def test_fit_rejects_view_mismatch(small_scene):
    with pytest.raises(ValueError):
        fit_appearance(small_scene.gt_cloud, small_scene.rest_mesh, small_scene.observations[0][:1],
                       small_scene.cameras)
