"""Mass-spring cloth simulator, Bezier pick-and-place actions and synthetic scenes.

The simulator integrates structural springs (mesh edges) and bending springs
(opposite corners of adjacent triangles) with semi-implicit Euler, under
gravity, axial spring damping and a frictional ground plane at z = 0.  One
vertex is rigidly attached to the gripper: its velocity is the commanded
action and its position follows the action exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from matplotlib.path import Path as PolygonPath
from numba import njit
from PIL import Image

from .mesh import AugmentedMesh, delaunay_mesh_from_points, grid_mesh, load_mesh, save_mesh
from .seeding import derive_seed, rng_for
from .splat.camera import CameraView, hemisphere_cameras
from .splat.gaussians import GaussianCloud, attach_gaussians
from .splat.raster import render_view

TEMPLATES = ("TOWEL", "SHORTS", "TSHIRT")


class SimulationDiverged(RuntimeError):
    def __init__(self, substep: int):
        super().__init__(f"simulation produced a non-finite state at substep {substep}")
        self.substep = substep


@dataclass(frozen=True)
class ClothParams:
    mass_per_vertex: float = 8e-4
    stretch_stiffness: float = 200.0
    bending_stiffness: float = 1.0
    damping: float = 0.05
    gravity: float = 9.81
    dt: float = 1.0
    substeps: int = 1000
    friction: float = 0.5

    def __post_init__(self):
        if self.stretch_stiffness < 0 or self.bending_stiffness < 0:
            raise ValueError("stiffnesses must be non-negative")
        if self.dt <= 0 or self.substeps < 1:
            raise ValueError("dt must be positive and substeps >= 1")
        if self.mass_per_vertex <= 0:
            raise ValueError("mass must be positive")

    @property
    def substep_dt(self) -> float:
        return self.dt / self.substeps

    def with_dt(self, dt: float) -> "ClothParams":
        """Same substep size (or smaller), new outer step."""
        return replace(self, dt=dt, substeps=max(1, math.ceil(dt / self.substep_dt - 1e-9)))


# --- springs -----------------------------------------------------------------

_SPRING_CACHE: dict = {}


def _unfolded_distance(lab, lac, lbc, lad, lbd):
    """Distance between the apexes of two triangles hinged on edge ab, laid flat."""
    cx = (lab**2 + lac**2 - lbc**2) / (2 * lab)
    cy = math.sqrt(max(lac**2 - cx**2, 0.0))
    dx = (lab**2 + lad**2 - lbd**2) / (2 * lab)
    dy = -math.sqrt(max(lad**2 - dx**2, 0.0))
    return math.hypot(cx - dx, cy - dy)


def spring_set(mesh: AugmentedMesh):
    """(i, j, rest_length, is_bending) arrays; bending rest lengths assume a flat rest shape."""
    key = id(mesh.faces)
    hit = _SPRING_CACHE.get(key)
    if hit is not None and hit[0] is mesh.faces:
        return hit[1]
    rest = {tuple(e): l for e, l in zip(mesh.edges.tolist(), mesh.rest_edge_lengths.tolist())}

    def length(a, b):
        return rest[(min(a, b), max(a, b))]

    bi, bj, brest = [], [], []
    for (a, b), fs in sorted(mesh.edge_faces.items()):
        if len(fs) != 2:
            continue
        c, d = (int(next(v for v in mesh.faces[f] if v != a and v != b)) for f in fs)
        bi.append(c)
        bj.append(d)
        brest.append(_unfolded_distance(length(a, b), length(a, c), length(b, c),
                                        length(a, d), length(b, d)))
    si = np.concatenate([mesh.edges[:, 0], np.asarray(bi, dtype=np.int64)])
    sj = np.concatenate([mesh.edges[:, 1], np.asarray(bj, dtype=np.int64)])
    srest = np.concatenate([mesh.rest_edge_lengths, np.asarray(brest)])
    bending = np.zeros(len(si), dtype=np.bool_)
    bending[len(mesh.edges):] = True
    springs = (si, sj, srest, bending)
    _SPRING_CACHE[key] = (mesh.faces, springs)
    return springs


@njit(cache=True)
def _integrate(x, v, si, sj, srest, sk, sc, mass, gravity, dt, substeps, grasp, actions, friction):
    nb, n = x.shape[0], x.shape[1]
    bad = np.full(nb, -1, dtype=np.int64)
    force = np.zeros((n, 3))
    for b in range(nb):
        g0 = x[b, grasp].copy()
        for s in range(substeps):
            force[:] = 0.0
            for i in range(n):
                force[i, 2] = -mass * gravity
            for e in range(si.shape[0]):
                i, j = si[e], sj[e]
                d0 = x[b, j, 0] - x[b, i, 0]
                d1 = x[b, j, 1] - x[b, i, 1]
                d2 = x[b, j, 2] - x[b, i, 2]
                ln = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
                if ln < 1e-12:
                    continue
                n0, n1, n2 = d0 / ln, d1 / ln, d2 / ln
                rel = ((v[b, j, 0] - v[b, i, 0]) * n0 + (v[b, j, 1] - v[b, i, 1]) * n1
                       + (v[b, j, 2] - v[b, i, 2]) * n2)
                f = sk[e] * (ln - srest[e]) + sc[e] * rel
                force[i, 0] += f * n0
                force[i, 1] += f * n1
                force[i, 2] += f * n2
                force[j, 0] -= f * n0
                force[j, 1] -= f * n1
                force[j, 2] -= f * n2
            finite = True
            decel = friction * gravity * dt
            for i in range(n):
                if i == grasp:
                    for k in range(3):
                        v[b, i, k] = actions[b, k]
                        x[b, i, k] = g0[k] + actions[b, k] * dt * (s + 1)
                    continue
                for k in range(3):
                    v[b, i, k] += dt * force[i, k] / mass
                    x[b, i, k] += dt * v[b, i, k]
                if x[b, i, 2] <= 0.0:
                    x[b, i, 2] = 0.0
                    if v[b, i, 2] < 0.0:
                        v[b, i, 2] = 0.0
                    vt = math.sqrt(v[b, i, 0] ** 2 + v[b, i, 1] ** 2)
                    if vt <= decel:
                        v[b, i, 0] = 0.0
                        v[b, i, 1] = 0.0
                    else:
                        scale = 1.0 - decel / vt
                        v[b, i, 0] *= scale
                        v[b, i, 1] *= scale
                if not (math.isfinite(x[b, i, 0]) and math.isfinite(x[b, i, 1])
                        and math.isfinite(x[b, i, 2])):
                    finite = False
            if not finite:
                bad[b] = s
                break
    return bad


def simulate_batch(mesh: AugmentedMesh, params: ClothParams, positions, velocities, actions,
                   grasped_vertex: int):
    """Advance a batch of states (B x N x 3) of one cloth by one action step each."""
    si, sj, srest, bending = spring_set(mesh)
    sk = np.where(bending, params.bending_stiffness, params.stretch_stiffness)
    sc = np.full(len(si), params.damping)
    x = np.array(positions, dtype=np.float64)
    v = np.array(velocities, dtype=np.float64)
    acts = np.ascontiguousarray(np.asarray(actions, dtype=np.float64).reshape(-1, 3))
    if not 0 <= grasped_vertex < mesh.n_vertices:
        raise IndexError(f"grasped vertex {grasped_vertex} out of range")
    bad = _integrate(x, v, si, sj, srest, sk, sc, params.mass_per_vertex, params.gravity,
                     params.substep_dt, params.substeps, int(grasped_vertex), acts, params.friction)
    if (bad >= 0).any():
        raise SimulationDiverged(int(bad[bad >= 0][0]))
    return x, v


def simulate_step(mesh: AugmentedMesh, params: ClothParams, action, grasped_vertex: int) -> AugmentedMesh:
    x, v = simulate_batch(mesh, params, mesh.vertices[None], mesh.velocities[None],
                          np.asarray(action, dtype=np.float64)[None], grasped_vertex)
    return mesh.with_state(x[0], v[0])


def cloth_energy(mesh: AugmentedMesh, params: ClothParams, exclude=None) -> float:
    """Kinetic plus elastic spring energy (no gravity term)."""
    si, sj, srest, bending = spring_set(mesh)
    k = np.where(bending, params.bending_stiffness, params.stretch_stiffness)
    ln = np.linalg.norm(mesh.vertices[sj] - mesh.vertices[si], axis=1)
    vel = mesh.velocities.copy()
    if exclude is not None:
        vel[exclude] = 0.0
    kinetic = 0.5 * params.mass_per_vertex * np.sum(vel**2)
    return float(kinetic + 0.5 * np.sum(k * (ln - srest) ** 2))


# --- trajectories -------------------------------------------------------------

@dataclass
class ActionTrajectory:
    pick_vertex: int
    pick_point: np.ndarray
    place_point: np.ndarray
    control_point: np.ndarray
    actions: np.ndarray  # (T, 3) gripper velocities, m/s
    dt: float
    velocity: float

    @property
    def n_steps(self) -> int:
        return len(self.actions)

    def waypoints(self) -> np.ndarray:
        """Gripper positions at t = 0..T."""
        return self.pick_point + np.concatenate([np.zeros((1, 3)), np.cumsum(self.actions * self.dt, axis=0)])

    def to_dict(self) -> dict:
        return {
            "pick_vertex": int(self.pick_vertex),
            "pick_point": self.pick_point.tolist(),
            "place_point": self.place_point.tolist(),
            "control_point": self.control_point.tolist(),
            "actions": self.actions.tolist(),
            "dt": self.dt,
            "velocity": self.velocity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActionTrajectory":
        return cls(int(d["pick_vertex"]), np.asarray(d["pick_point"]), np.asarray(d["place_point"]),
                   np.asarray(d["control_point"]), np.asarray(d["actions"]).reshape(-1, 3),
                   float(d["dt"]), float(d["velocity"]))


def _rotate_about(vec, axis, angle):
    axis = axis / np.linalg.norm(axis)
    return (vec * np.cos(angle) + np.cross(axis, vec) * np.sin(angle)
            + axis * np.dot(axis, vec) * (1 - np.cos(angle)))


def bezier_control_point(pick, place, height: float, tilt: float) -> np.ndarray:
    """Midpoint control point lifted by ``height`` and tilted about the pick-place axis."""
    pick, place = np.asarray(pick, dtype=np.float64), np.asarray(place, dtype=np.float64)
    axis = place - pick
    lift = np.array([0.0, 0.0, height])
    if np.linalg.norm(axis) > 0 and tilt != 0.0:
        lift = _rotate_about(lift, axis, tilt)
    return 0.5 * (pick + place) + lift


def discretize_path(points_fn, n_steps: int, n_dense: int = 4001):
    """Split a parametric curve on [0, 1] into ``n_steps`` equal arc-length pieces."""
    s = np.linspace(0.0, 1.0, n_dense)
    dense = points_fn(s)
    seg = np.linalg.norm(np.diff(dense, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, arc[-1], n_steps + 1)
    s_t = np.interp(targets, arc, s)
    pts = points_fn(s_t)
    pts[0], pts[-1] = dense[0], dense[-1]
    return pts, arc[-1]


def trajectory_from_curve(pick_vertex, pick, place, control, velocity, n_steps=None, dt=1.0):
    pick, place, control = (np.asarray(p, dtype=np.float64) for p in (pick, place, control))

    def curve(s):
        s = s[:, None]
        return (1 - s) ** 2 * pick + 2 * s * (1 - s) * control + s**2 * place

    _, length = discretize_path(curve, 8)
    if n_steps is None:
        n_steps = max(1, int(round(length / (velocity * dt))))
    pts, length = discretize_path(curve, n_steps)
    pts[0], pts[-1] = pick, place
    step_dt = length / (velocity * n_steps) if length > 0 else dt
    deltas = np.diff(pts, axis=0)
    return ActionTrajectory(int(pick_vertex), pick, place, control, deltas / step_dt, float(step_dt),
                            float(velocity))


def make_bezier_trajectory(mesh: AugmentedMesh, rng_seed: int, gripper_velocity: float | None = None,
                           n_steps: int | None = None, dt: float = 1.0, pick_vertex: int | None = None,
                           place_point=None, height: float | None = None, tilt: float | None = None,
                           min_distance: float = 0.05) -> ActionTrajectory:
    """Random quadratic-Bezier pick-and-place trajectory on ``mesh``.

    Heights are drawn from [0.05, 0.15] m, tilts from [-pi/4, pi/4] rad and
    gripper speeds from [0.005, 0.02] m/s unless given.  With ``n_steps`` the
    step length ``dt`` is chosen so the gripper moves at the sampled speed.
    """
    rng = np.random.default_rng(rng_seed)
    verts = mesh.vertices
    if pick_vertex is None:
        pick_vertex = int(rng.integers(mesh.n_vertices))
    pick = verts[pick_vertex].copy()
    if place_point is None:
        far = np.nonzero(np.linalg.norm(verts - pick, axis=1) >= min_distance)[0]
        choices = far if len(far) else np.arange(mesh.n_vertices)
        place_point = verts[int(rng.choice(choices))].copy()
    height = rng.uniform(0.05, 0.15) if height is None else height
    tilt = rng.uniform(-np.pi / 4, np.pi / 4) if tilt is None else tilt
    velocity = rng.uniform(0.005, 0.02) if gripper_velocity is None else gripper_velocity
    control = bezier_control_point(pick, place_point, height, tilt)
    return trajectory_from_curve(pick_vertex, pick, place_point, control, velocity, n_steps, dt)


def straight_trajectory(pick_vertex: int, pick, place, n_steps: int, velocity: float) -> ActionTrajectory:
    pick, place = np.asarray(pick, dtype=np.float64), np.asarray(place, dtype=np.float64)
    return trajectory_from_curve(pick_vertex, pick, place, 0.5 * (pick + place), velocity, n_steps)


def rollout_simulator(mesh: AugmentedMesh, params: ClothParams, actions, grasped_vertex: int):
    states = [mesh]
    for a in actions:
        states.append(simulate_step(states[-1], params, a, grasped_vertex))
    return states


# --- templates ----------------------------------------------------------------

def _polygon_mesh(outline: np.ndarray, spacing: float) -> AugmentedMesh:
    poly = PolygonPath(outline)
    lo, hi = outline.min(0), outline.max(0)
    xs = np.arange(lo[0], hi[0] + 1e-9, spacing)
    ys = np.arange(lo[1], hi[1] + 1e-9, spacing)
    grid = np.array([(x, y) for y in ys for x in xs])
    inside = grid[poly.contains_points(grid, radius=-spacing * 0.3)]
    boundary = []
    closed = np.vstack([outline, outline[:1]])
    for a, b in zip(closed[:-1], closed[1:]):
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / spacing)))
        for k in range(n):
            boundary.append(a + (b - a) * k / n)
    pts2 = np.vstack([np.asarray(boundary), inside])
    pts2 = pts2[np.unique(np.round(pts2 / (spacing * 1e-3)).astype(np.int64), axis=0, return_index=True)[1]]
    pts2 = pts2[np.lexsort((pts2[:, 0], pts2[:, 1]))]
    full = delaunay_mesh_from_points(np.column_stack([pts2, np.zeros(len(pts2))]))
    cent = full.vertices[full.faces].mean(axis=1)[:, :2]
    faces = full.faces[poly.contains_points(cent)]
    used = np.unique(faces)
    remap = -np.ones(full.n_vertices, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return AugmentedMesh(full.vertices[used], None, remap[faces])


def _shorts_outline(size: float) -> np.ndarray:
    w, h = size, size * 1.1
    return np.array([[0, h], [0, 0], [0.42 * w, 0], [0.5 * w, 0.55 * h], [0.58 * w, 0],
                     [w, 0], [w, h]], dtype=np.float64)


def _tshirt_outline(size: float) -> np.ndarray:
    s = size
    return np.array([[0.25 * s, 0], [0.75 * s, 0], [0.75 * s, 0.7 * s], [s, 0.55 * s], [s, 0.8 * s],
                     [0.65 * s, s], [0.35 * s, s], [0, 0.8 * s], [0, 0.55 * s], [0.25 * s, 0.7 * s]],
                    dtype=np.float64)


def template_mesh(template: str, size_params: dict | None = None) -> AugmentedMesh:
    sp = dict(size_params or {})
    template = template.upper()
    if template == "TOWEL":
        return grid_mesh(sp.get("width", 0.2), sp.get("height", 0.2), sp.get("nx", 8), sp.get("ny", 8))
    if template == "SHORTS":
        return _polygon_mesh(_shorts_outline(sp.get("size", 0.25)), sp.get("spacing", 0.03))
    if template == "TSHIRT":
        return _polygon_mesh(_tshirt_outline(sp.get("size", 0.3)), sp.get("spacing", 0.03))
    raise ValueError(f"unknown template {template!r}; expected one of {TEMPLATES}")


def checker_colors(rest_mesh: AugmentedMesh, cloud: GaussianCloud) -> np.ndarray:
    """Checkerboard over a smooth colour ramp, evaluated at each Gaussian's rest position."""
    tri = rest_mesh.vertices[rest_mesh.faces[cloud.face_ids]]
    centroid = tri.mean(axis=1)
    lo = rest_mesh.vertices.min(0)
    span = np.maximum(rest_mesh.vertices.max(0) - lo, 1e-9)
    uv = (centroid - lo) / span
    cell = rest_mesh.rest_edge_lengths.min()
    parity = (np.floor((centroid[:, 0] - lo[0]) / cell + 1e-6)
              + np.floor((centroid[:, 1] - lo[1]) / cell + 1e-6)) % 2
    base = np.stack([0.25 + 0.65 * uv[:, 0], 0.25 + 0.65 * uv[:, 1], 0.85 - 0.55 * uv[:, 0]], axis=1)
    return np.clip(base * np.where(parity > 0, 0.45, 1.0)[:, None], 0.0, 1.0)


def ground_truth_cloud(rest_mesh: AugmentedMesh, seed: int, per_face: int = 2) -> GaussianCloud:
    cloud = attach_gaussians(rest_mesh, per_face, derive_seed(seed, "gt_cloud"), opacity_logit=3.0)
    cloud.colors = checker_colors(rest_mesh, cloud)
    return cloud


# --- scenes -------------------------------------------------------------------

@dataclass
class Scene:
    template: str
    ground_truth: list  # T+1 AugmentedMesh
    observations: np.ndarray  # (T+1, K, H, W, 3)
    cameras: list
    trajectory: ActionTrajectory
    grasped_vertex: int
    params: ClothParams
    gt_cloud: GaussianCloud
    seed: int = 0
    size_params: dict = field(default_factory=dict)

    @property
    def rest_mesh(self) -> AugmentedMesh:
        return self.ground_truth[0]

    @property
    def n_steps(self) -> int:
        return len(self.ground_truth) - 1

    def subset_views(self, views) -> "Scene":
        views = list(views)
        return replace(self, observations=self.observations[:, views],
                       cameras=[self.cameras[k] for k in views])


def render_observations(cloud, meshes, rest_mesh, cameras, noise: float = 0.0, rng=None) -> np.ndarray:
    obs = np.stack([np.stack([render_view(cloud, m, rest_mesh, cam).rgb for cam in cameras])
                    for m in meshes])
    if noise > 0:
        rng = rng or np.random.default_rng(0)
        obs = np.clip(obs + rng.normal(0.0, noise, obs.shape), 0.0, 1.0)
    return obs


def generate_scene(template: str = "TOWEL", size_params: dict | None = None, n_views: int = 4,
                   image_wh=(128, 128), rng_seed: int = 0, n_steps: int = 16,
                   params: ClothParams | None = None, pixel_noise: float = 0.0,
                   trajectory: ActionTrajectory | None = None, camera_radius: float = 0.45,
                   per_face: int = 2) -> Scene:
    if n_views < 1:
        raise ValueError("need at least one view")
    rest = template_mesh(template, size_params)
    if trajectory is None:
        trajectory = make_bezier_trajectory(rest, derive_seed(rng_seed, "trajectory"), n_steps=n_steps)
    params = (params or ClothParams()).with_dt(trajectory.dt)
    states = rollout_simulator(rest, params, trajectory.actions, trajectory.pick_vertex)
    cloud = ground_truth_cloud(rest, rng_seed, per_face)
    width, height = image_wh
    cams = hemisphere_cameras(rest.vertices.mean(0), n_views, radius=camera_radius, width=width,
                              height=height)
    obs = render_observations(cloud, states, rest, cams, pixel_noise, rng_for(rng_seed, "pixel_noise"))
    return Scene(template.upper(), states, obs, cams, trajectory, trajectory.pick_vertex, params,
                 cloud, rng_seed, dict(size_params or {}))


def save_scene(scene: Scene, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "template": scene.template,
        "size_params": scene.size_params,
        "seed": scene.seed,
        "grasped_vertex": int(scene.grasped_vertex),
        "params": asdict(scene.params),
        "trajectory": scene.trajectory.to_dict(),
        "cameras": [c.to_dict() for c in scene.cameras],
        "n_steps": scene.n_steps,
    }
    (d / "scene.json").write_text(json.dumps(meta, indent=1))
    scene.gt_cloud.save(d / "gt_cloud.json")
    for t, mesh in enumerate(scene.ground_truth):
        save_mesh(mesh, d / f"mesh_t{t:04d}.json")
        for k in range(len(scene.cameras)):
            img = np.round(np.clip(scene.observations[t, k], 0, 1) * 255).astype(np.uint8)
            Image.fromarray(img).save(d / f"view{k:02d}_t{t:04d}.png")
    return d


def load_scene(directory) -> Scene:
    d = Path(directory)
    meta = json.loads((d / "scene.json").read_text())
    rest = load_mesh(d / "mesh_t0000.json")
    meshes = [rest] + [load_mesh(d / f"mesh_t{t:04d}.json", rest) for t in range(1, meta["n_steps"] + 1)]
    cams = [CameraView.from_dict(c) for c in meta["cameras"]]
    obs = np.stack([
        np.stack([_read_image(d, k, t) for k in range(len(cams))])
        for t in range(meta["n_steps"] + 1)
    ])
    return Scene(meta["template"], meshes, obs, cams, ActionTrajectory.from_dict(meta["trajectory"]),
                 meta["grasped_vertex"], ClothParams(**meta["params"]), GaussianCloud.load(d / "gt_cloud.json"),
                 meta["seed"], meta["size_params"])


def _read_image(d: Path, k: int, t: int) -> np.ndarray:
    png = d / f"view{k:02d}_t{t:04d}.png"
    path = png if png.exists() else d / f"view{k:02d}_t{t:04d}.ppm"
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
