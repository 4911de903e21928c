"""Shared experiment plumbing: the desk scene suite, sequence metrics and ablation cells.

The CLI, the scripts in ``scripts/`` and the acceptance tests all build on
these helpers so that every entry point runs the same protocol.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

from .gns import BallisticPrior, GNSConfig, PerturbedSimulator, evaluate, gns_train, rollout, simulated_samples
from .metrics import apply_init_augmentation, evaluate_tracks, mte, tracks_from_meshes
from .mpc import STRATEGIES, PlanConfig, closed_loop_fold, make_fold_setup
from .seeding import derive_seed
from .sim import Scene, generate_scene
from .update import StaticPrior, TrackResult, UpdateConfig, track

AUGMENTATIONS = ("TRANS", "ROT", "SCALING", "NOISE", "TRSN")

ABLATION_CELLS = ("only_gnn", "no_gnn", "no_lreg", "no_residual", "views_1", "views_2", "views_3", "views_4")


@dataclass(frozen=True)
class SuiteConfig:
    seeds: tuple = (0, 1, 2)
    template: str = "TOWEL"
    n_views: int = 4
    image_size: int = 128
    n_steps: int = 16
    pixel_noise: float = 0.0


def make_suite(cfg: SuiteConfig = SuiteConfig()) -> list:
    return [generate_scene(cfg.template, n_views=cfg.n_views, image_wh=(cfg.image_size, cfg.image_size),
                           rng_seed=seed, n_steps=cfg.n_steps, pixel_noise=cfg.pixel_noise)
            for seed in cfg.seeds]


def default_update_config(**overrides) -> UpdateConfig:
    """Refinement settings used by the experiments (ROLLOUT over a 4-frame minibatch)."""
    return replace(UpdateConfig(frames_per_epoch=4), **overrides)


def sequence_mte(meshes, scene: Scene) -> float:
    """MTE over frames 1..T; frame 0 is the given initial state and is not scored."""
    return mte(tracks_from_meshes(meshes[1:]), tracks_from_meshes(scene.ground_truth[1:]))


def sequence_metrics(meshes, scene: Scene) -> dict:
    return evaluate_tracks(tracks_from_meshes(meshes[1:]), tracks_from_meshes(scene.ground_truth[1:]))


def run_cell(scene: Scene, cell: str, cloud, prior=None, config: UpdateConfig | None = None) -> TrackResult:
    """Track ``scene`` under one ablation cell."""
    if cell not in ABLATION_CELLS:
        raise ValueError(f"unknown ablation cell {cell!r}")
    prior = prior or PerturbedSimulator(scene.params)
    cfg = config or default_update_config()
    if cell == "only_gnn":
        return track(scene, prior, cloud, cfg, refine=False)
    if cell == "no_gnn":
        return track(scene, StaticPrior(), cloud, cfg)
    if cell == "no_lreg":
        return track(scene, prior, cloud, cfg.without_regularisers())
    if cell == "no_residual":
        return track(scene, prior, cloud, replace(cfg, residual=False))
    n_views = int(cell.split("_")[1])
    return track(scene, prior, cloud, cfg, views=range(min(n_views, len(scene.cameras))))


def ablation_rows(scene: Scene, cloud, prior=None, config: UpdateConfig | None = None,
                  cells=ABLATION_CELLS) -> list:
    rows = []
    for cell in cells:
        start = time.perf_counter()
        res = run_cell(scene, cell, cloud, prior, config)
        row = {"scene_seed": scene.seed, "cell": cell}
        row.update(sequence_metrics(res.meshes, scene))
        row["wall_seconds"] = time.perf_counter() - start
        rows.append(row)
    return rows


def refinement_rows(scenes, config: UpdateConfig | None = None) -> list:
    """Unrefined prior rollout against ROLLOUT refinement, one row per scene."""
    rows = []
    for scene in scenes:
        prior = PerturbedSimulator(scene.params)
        start = time.perf_counter()
        res = track(scene, prior, scene.gt_cloud, config or default_update_config())
        seconds = time.perf_counter() - start
        base = track(scene, prior, scene.gt_cloud, refine=False)
        prior_mte, refined_mte = sequence_mte(base.meshes, scene), sequence_mte(res.meshes, scene)
        rows.append({"scene_seed": scene.seed, "prior_mte_mm": prior_mte, "refined_mte_mm": refined_mte,
                     "ratio": refined_mte / prior_mte, "wall_seconds": seconds})
    return rows


def mode_rows(scene: Scene, config: UpdateConfig | None = None, horizon: int = 1) -> list:
    """ROLLOUT and ITERATIVE(H) on one scene with the same epoch budget per refinement."""
    base = config or default_update_config()
    prior = PerturbedSimulator(scene.params)
    rows = []
    for mode in ("ROLLOUT", "ITERATIVE"):
        cfg = replace(base, mode=mode, horizon=horizon)
        if mode == "ITERATIVE" and cfg.frames_per_epoch is not None and cfg.frames_per_epoch >= horizon:
            cfg = replace(cfg, frames_per_epoch=None)
        start = time.perf_counter()
        res = track(scene, prior, scene.gt_cloud, cfg)
        rows.append({"scene_seed": scene.seed, "mode": mode, "horizon": horizon,
                     "mte_mm": sequence_mte(res.meshes, scene), "wall_seconds": time.perf_counter() - start})
    return rows


def robustness_rows(scene: Scene, augmentations=AUGMENTATIONS, refine_initial: bool = False,
                    config: UpdateConfig | None = None, aug_seed: int = 0) -> list:
    """Tracking from augmented initial meshes (``None`` in ``augmentations`` means unaugmented)."""
    cfg = config or default_update_config()
    prior = PerturbedSimulator(scene.params)
    rows = []
    for kind in augmentations:
        init = None
        if kind is not None:
            init = apply_init_augmentation(scene.ground_truth[0], kind, derive_seed(aug_seed, "aug", scene.seed, kind))
        start = time.perf_counter()
        res = track(scene, prior, scene.gt_cloud, cfg, initial=init, refine_initial=refine_initial)
        rows.append({"scene_seed": scene.seed, "augmentation": kind or "NONE", "refine_initial": refine_initial,
                     "mte_mm": sequence_mte(res.meshes, scene), "wall_seconds": time.perf_counter() - start})
    return rows


def fold_rows(seeds, strategies=STRATEGIES, config: PlanConfig = PlanConfig(), update_config=None,
              image_size: int = 64) -> list:
    """Final MSE to the half-fold goal per seeded episode and strategy."""
    rows = []
    for seed in seeds:
        setup = make_fold_setup(seed, image_wh=(image_size, image_size))
        for strategy in strategies:
            res = closed_loop_fold(setup, strategy, replace(config, seed=seed), update_config=update_config)
            refined = [r["refined_mte_mm"] for r in res.rows if r["refined_mte_mm"] == r["refined_mte_mm"]]
            prior = [r["prior_mte_mm"] for r in res.rows if r["prior_mte_mm"] == r["prior_mte_mm"]]
            rows.append({"episode": seed, "strategy": strategy, "initial_mse": res.initial_mse,
                         "final_mse": res.final_mse,
                         "mean_refined_mte_mm": sum(refined) / len(refined) if refined else float("nan"),
                         "mean_prior_mte_mm": sum(prior) / len(prior) if prior else float("nan")})
    return rows


@dataclass(frozen=True)
class PriorSanityConfig:
    n_train: int = 24
    n_val: int = 4  # early stopping
    n_test: int = 8  # held out for the reported one-step errors
    n_steps: int = 16
    heldout_seeds: tuple = (1000, 1001, 1002, 1003)  # rollout scenes
    gns: GNSConfig = GNSConfig(epochs=40)
    seed: int = 0


def prior_sanity(cfg: PriorSanityConfig = PriorSanityConfig()) -> dict:
    """Held-out one-step and rollout errors of a trained GNS against zero acceleration."""
    m = cfg.gns.history
    train, val, test = (simulated_samples(n, derive_seed(cfg.seed, split), n_steps=cfg.n_steps, m=m)
                        for n, split in ((cfg.n_train, "train"), (cfg.n_val, "val"), (cfg.n_test, "test")))
    start = time.perf_counter()
    prior, curves = gns_train(train, val, replace(cfg.gns, seed=derive_seed(cfg.seed, "gns")))
    seconds = time.perf_counter() - start
    out = {**evaluate(prior, test, m), "train_seconds": seconds, "best_epoch": curves["best_epoch"]}
    for name, p in (("gns", prior), ("ballistic", BallisticPrior(m))):
        errors = []
        for seed in cfg.heldout_seeds:
            scene = generate_scene("TOWEL", n_views=1, image_wh=(8, 8), rng_seed=seed, n_steps=cfg.n_steps)
            traj = scene.trajectory
            preds = rollout(p, [scene.ground_truth[0]], traj.actions, scene.grasped_vertex, traj.dt)
            errors.append(sequence_mte([scene.ground_truth[0]] + preds, scene))
        out[f"{name}_rollout_mte_mm"] = sum(errors) / len(errors)
    return out
