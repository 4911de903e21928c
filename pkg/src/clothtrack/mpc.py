"""Half-folding with random-shooting MPC over a transition prior.

Four strategies are compared: a fixed straight pick-to-place motion, MPC
planned once and executed blind, MPC re-planned every step from refined
state estimates, and MPC re-planned from the simulator's true state.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .gns import PerturbedSimulator, rollout_batch
from .mesh import AugmentedMesh, grid_mesh
from .metrics import mte, tracks_from_meshes
from .seeding import derive_seed, rng_for
from .sim import ClothParams, ground_truth_cloud, render_observations, simulate_step
from .splat.camera import hemisphere_cameras
from .update import UpdateConfig, refine_states

STRATEGIES = ("FIXED", "MPC_OL", "MPC_CS", "MPC_ORACLE")
FOLD_THICKNESS = 0.003


class PlanningError(RuntimeError):
    pass


@dataclass(frozen=True)
class PlanConfig:
    n_candidates: int = 32
    horizon: int = 4
    control_var: tuple = (2.5e-5, 2.5e-5, 2.5e-5)  # per-axis action variance, (m/s)^2
    n_steps: int = 10
    dt: float = 1.5
    strategy: str = "MPC_CS"
    seed: int = 0

    def __post_init__(self):
        if self.n_candidates < 1 or self.horizon < 1:
            raise ValueError("n_candidates and horizon must be >= 1")
        if min(self.control_var) <= 0:
            raise ValueError("control variances must be positive")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")


def _rectangle_bounds(mesh: AugmentedMesh):
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    box_area = (hi[0] - lo[0]) * (hi[1] - lo[1])
    flat = np.ptp(mesh.vertices[:, 2]) < 1e-9
    if not flat or box_area <= 0 or abs(mesh.face_areas().sum() - box_area) > 1e-6 * max(box_area, 1.0):
        raise ValueError("half-fold goals need a flat axis-aligned rectangular cloth")
    return lo, hi


def half_fold_goal(mesh: AugmentedMesh) -> np.ndarray:
    """Vertices beyond the x mid-line mirrored onto the near half, lifted by one thickness."""
    lo, hi = _rectangle_bounds(mesh)
    mid = 0.5 * (lo[0] + hi[0])
    goal = np.array(mesh.vertices)
    far = goal[:, 0] > mid
    goal[far, 0] = 2 * mid - goal[far, 0]
    goal[far, 2] += FOLD_THICKNESS
    return goal


def fold_cost(positions, goal) -> np.ndarray:
    """Summed squared vertex distance to the goal, over the trailing (N, 3) axes."""
    return np.sum((np.asarray(positions) - goal) ** 2, axis=(-2, -1))


def final_mse(mesh: AugmentedMesh, goal) -> float:
    """Mean squared vertex distance to the goal (m^2)."""
    return float(np.mean(np.sum((mesh.vertices - goal) ** 2, axis=1)))


@dataclass
class PlanResult:
    action: np.ndarray
    cost: float
    sequence: np.ndarray
    costs: np.ndarray  # per candidate


def candidate_noise(seed: int, step: int, index: int, horizon: int, control_var) -> np.ndarray:
    """Noise for candidate ``index``; independent of how many candidates are drawn."""
    rng = rng_for(seed, "candidate", step, index)
    return rng.normal(size=(horizon, 3)) * np.sqrt(np.asarray(control_var, dtype=np.float64))


def plan_step(history, goal, prior, config: PlanConfig, nominal, grasped_vertex: int, step: int = 0) -> PlanResult:
    """Random shooting around ``nominal`` (H x 3); candidate 0 is the nominal itself."""
    nominal = np.asarray(nominal, dtype=np.float64).reshape(-1, 3)
    horizon = len(nominal)
    cands = np.stack([nominal] + [nominal + candidate_noise(config.seed, step, i, horizon, config.control_var)
                                  for i in range(1, config.n_candidates)])
    traj = rollout_batch(prior, history, cands, grasped_vertex, config.dt)
    costs = fold_cost(traj, goal).sum(axis=1)
    costs = np.where(np.isfinite(costs), costs, np.inf)
    if not np.isfinite(costs).any():
        raise PlanningError("every candidate rollout diverged")
    best = int(np.argmin(costs))
    return PlanResult(cands[best, 0].copy(), float(costs[best]), cands[best], costs)


def shift_warm_start(sequence: np.ndarray, fallback) -> np.ndarray:
    seq = np.asarray(sequence)
    return np.concatenate([seq[1:], np.asarray(fallback, dtype=np.float64).reshape(1, 3)])


# --- episodes -----------------------------------------------------------------------

@dataclass
class FoldSetup:
    rest: AugmentedMesh
    goal: np.ndarray
    grasped_vertex: int
    place_point: np.ndarray
    params: ClothParams  # true dynamics
    cameras: list
    cloud: object  # appearance used both to render observations and to refine
    seed: int


def make_fold_setup(seed: int, width: float = 0.2, nx: int = 8, n_views: int = 4, image_wh=(64, 64),
                    params: ClothParams | None = None) -> FoldSetup:
    """Flat towel, far corner grasped; the seed picks the corner and jitters the true stiffness."""
    rest = grid_mesh(width, width, nx, nx)
    goal = half_fold_goal(rest)
    rng = rng_for(seed, "fold_setup")
    far_corners = [nx - 1, nx * nx - 1]
    grasp = far_corners[int(rng.integers(2))]
    base = params or ClothParams()
    true_params = replace(base, stretch_stiffness=base.stretch_stiffness * rng.uniform(0.8, 1.2),
                          bending_stiffness=base.bending_stiffness * rng.uniform(0.5, 2.0))
    cams = hemisphere_cameras(rest.vertices.mean(0), n_views, width=image_wh[0], height=image_wh[1])
    cloud = ground_truth_cloud(rest, seed)
    return FoldSetup(rest, goal, grasp, goal[grasp].copy(), true_params, cams, cloud, seed)


def fixed_actions(setup: FoldSetup, config: PlanConfig) -> np.ndarray:
    """Constant velocity along the straight line from the grasped vertex to its goal."""
    if config.n_steps == 0:
        return np.zeros((0, 3))
    delta = setup.place_point - setup.rest.vertices[setup.grasped_vertex]
    return np.tile(delta / (config.n_steps * config.dt), (config.n_steps, 1))


@dataclass
class FoldResult:
    strategy: str
    final_mesh: AugmentedMesh
    final_mse: float
    initial_mse: float
    rows: list = field(default_factory=list)  # per-step report rows
    states: list = field(default_factory=list)
    estimates: list = field(default_factory=list)


def closed_loop_fold(setup: FoldSetup, strategy: str, config: PlanConfig, prior=None,
                     update_config: UpdateConfig | None = None) -> FoldResult:
    """Run one half-fold episode on the true simulator with the given strategy."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    prior = prior or PerturbedSimulator(setup.params)
    ucfg = update_config or UpdateConfig(epochs=60, lr=1e-4)
    cfg = replace(config, strategy=strategy)
    true_params = setup.params.with_dt(cfg.dt)
    grasp = setup.grasped_vertex
    states = [setup.rest]
    estimates = [setup.rest]
    rows = []
    nominal_full = fixed_actions(setup, cfg)
    if strategy == "MPC_OL" and cfg.n_steps:
        plan = plan_step([setup.rest], setup.goal, prior, cfg, nominal_full, grasp, step=0)
        open_loop = plan.sequence
    nominal = nominal_full[:cfg.horizon]
    for t in range(cfg.n_steps):
        predicted_cost = float("nan")
        if strategy == "FIXED":
            action = nominal_full[t]
        elif strategy == "MPC_OL":
            action = open_loop[t]
        else:
            h = min(cfg.horizon, cfg.n_steps - t)
            source = states if strategy == "MPC_ORACLE" else estimates
            plan = plan_step(source[-4:], setup.goal, prior, cfg, nominal[:h], grasp, step=t)
            action, predicted_cost = plan.action, plan.cost
            nxt = nominal_full[min(t + h, cfg.n_steps - 1)]
            nominal = shift_warm_start(plan.sequence, nxt) if h > 1 else np.asarray([nxt])
            nominal = np.concatenate([nominal, np.tile(nominal[-1:], (max(0, cfg.horizon - len(nominal)), 1))])
        state = simulate_step(states[-1], true_params, action, grasp)
        states.append(state)
        row = {"step": t, "strategy": strategy, "predicted_cost": predicted_cost,
               "action_x": action[0], "action_y": action[1], "action_z": action[2],
               "refined_mte_mm": float("nan"), "prior_mte_mm": float("nan")}
        if strategy == "MPC_CS":
            pred = prior.predict(estimates[-4:], action, grasp, cfg.dt)
            obs = render_observations(setup.cloud, [state], setup.rest, setup.cameras)
            wcfg = replace(ucfg, seed=derive_seed(cfg.seed, "fold_refine", t))
            res = refine_states([pred], obs, setup.cloud, setup.cameras, wcfg, rest_mesh=setup.rest,
                                anchor=estimates[-1], dt=cfg.dt)
            estimates.append(res.meshes[0])
            truth = tracks_from_meshes([state])
            row["refined_mte_mm"] = mte(tracks_from_meshes(res.meshes), truth)
            row["prior_mte_mm"] = mte(tracks_from_meshes([pred]), truth)
        else:
            estimates.append(state)
        rows.append(row)
    return FoldResult(strategy, states[-1], final_mse(states[-1], setup.goal), final_mse(setup.rest, setup.goal),
                      rows, states, estimates)
