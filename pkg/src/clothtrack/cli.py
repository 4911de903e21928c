"""Command-line entry point: ``clothtrack <command> [flags]``.

Every command takes ``--config`` (a JSON RunConfig), ``--seed`` and ``--out``
and writes the fully resolved config to ``<out>/config.json``.  Exit status is
0 on success, 1 when a module fails and 2 on usage errors (unknown command,
flag or config key).  ``CS_THREADS`` caps torch and numba worker threads.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

COMMANDS = ("gen-dataset", "train-prior", "fit-appearance", "track", "eval", "ablate", "plan", "render-debug")


class ConfigError(ValueError):
    """Malformed or unknown configuration; reported as a usage error."""


# --- configuration -------------------------------------------------------------------

@dataclass
class SceneSection:
    template: str = "TOWEL"
    n_scenes: int = 1
    n_views: int = 4
    image_size: int = 128
    n_steps: int = 16
    pixel_noise: float = 0.0


@dataclass
class PriorSection:
    kind: str = "perturbed"  # perturbed | gns | ballistic | static
    stiffness_scale: float = 0.5
    path: str | None = None  # GNS checkpoint


@dataclass
class TrainSection:
    n_trajectories: int = 12
    n_val_trajectories: int = 3
    n_steps: int = 16


def _module_configs():
    from .gns import GNSConfig
    from .mpc import PlanConfig
    from .splat.fit import FitConfig
    from .update import UpdateConfig

    return FitConfig, UpdateConfig, GNSConfig, PlanConfig


def _default_update():
    from .experiments import default_update_config

    return default_update_config()


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    scene: SceneSection = field(default_factory=SceneSection)
    prior: PriorSection = field(default_factory=PriorSection)
    train: TrainSection = field(default_factory=TrainSection)
    fit: object = field(default_factory=lambda: _module_configs()[0]())
    update: object = field(default_factory=_default_update)
    gns: object = field(default_factory=lambda: _module_configs()[2]())
    plan: object = field(default_factory=lambda: _module_configs()[3]())

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


SECTION_TYPES = {"scene": SceneSection, "prior": PriorSection, "train": TrainSection}


def _section_types() -> dict:
    fit, update, gns, plan = _module_configs()
    return {**SECTION_TYPES, "fit": fit, "update": update, "gns": gns, "plan": plan}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build_section(cls, base, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    values = {}
    for key, value in data.items():
        current = getattr(base, key)
        if isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        if isinstance(current, dict) and isinstance(value, dict):
            extra = sorted(set(value) - set(current))
            if extra:
                raise ConfigError(f"unknown key(s) in {where}.{key}: {', '.join(extra)}")
            value = {**current, **value}
        values[key] = value
    try:
        return replace(base, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def load_run_config(data: dict | None = None) -> RunConfig:
    """RunConfig from a (possibly partial) JSON document; unknown keys are rejected."""
    cfg = RunConfig()
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    types = _section_types()
    unknown = sorted(set(data) - {"seed", "out"} - set(types))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    for key in ("seed", "out"):
        if key in data:
            cfg = replace(cfg, **{key: data[key]})
    for name, cls in types.items():
        if name in data:
            cfg = replace(cfg, **{name: _build_section(cls, getattr(cfg, name), data[name], name)})
    return cfg


# --- reports -------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6g}"
    return str(value)


def write_report(path, rows, columns=None) -> Path:
    """CSV with a stable column order and 6-significant-digit floats; empty input writes the header."""
    rows = list(rows)
    if columns is None:
        columns = []
        for row in rows:
            columns.extend(k for k in row if k not in columns)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in columns])
    return path


def write_tracks(path, meshes) -> None:
    from .metrics import tracks_from_meshes

    tracks = tracks_from_meshes(meshes)
    doc = {"n_points": int(tracks.shape[0]), "n_frames": int(tracks.shape[1]), "tracks": tracks.tolist()}
    Path(path).write_text(json.dumps(doc))


def read_tracks(path) -> np.ndarray:
    doc = json.loads(Path(path).read_text())
    tracks = np.asarray(doc["tracks"], dtype=np.float64)
    if tracks.shape != (doc["n_points"], doc["n_frames"], 3):
        raise ValueError(f"{path}: track array has shape {tracks.shape}")
    return tracks


def _save_image(path, rgb) -> None:
    from PIL import Image

    Image.fromarray(np.round(np.clip(rgb, 0.0, 1.0) * 255).astype(np.uint8)).save(path)


# --- helpers -------------------------------------------------------------------------

def _apply_threads() -> int:
    raw = os.environ.get("CS_THREADS")
    if raw is None:
        return 1
    try:
        n = max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"CS_THREADS must be an integer, got {raw!r}") from exc
    import torch

    torch.set_num_threads(n)
    return n


def _make_prior(cfg: RunConfig, scene):
    from .gns import BallisticPrior, GNSPrior, PerturbedSimulator
    from .update import StaticPrior

    kind = cfg.prior.kind
    if kind == "perturbed":
        return PerturbedSimulator(scene.params, stiffness_scale=cfg.prior.stiffness_scale)
    if kind == "gns":
        if not cfg.prior.path:
            raise ConfigError("prior.kind 'gns' needs prior.path (or --prior-path)")
        return GNSPrior.load(cfg.prior.path)
    if kind == "ballistic":
        return BallisticPrior(cfg.gns.history)
    if kind == "static":
        return StaticPrior()
    raise ConfigError(f"unknown prior kind {kind!r}")


def _load_cloud(path, scene):
    from .splat.gaussians import GaussianCloud

    if path is None:
        print("note: no --cloud given, using the scene's ground-truth appearance", file=sys.stderr)
        return scene.gt_cloud
    return GaussianCloud.load(path)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    return out


# --- commands ------------------------------------------------------------------------

def cmd_gen_dataset(cfg: RunConfig, args) -> None:
    from .seeding import derive_seed
    from .sim import generate_scene, save_scene

    out = _out_dir(cfg)
    s = cfg.scene
    rows = []
    for i in range(s.n_scenes):
        seed = derive_seed(cfg.seed, "scene", i) if s.n_scenes > 1 else cfg.seed
        scene = generate_scene(s.template, n_views=s.n_views, image_wh=(s.image_size, s.image_size),
                               rng_seed=seed, n_steps=s.n_steps, pixel_noise=s.pixel_noise)
        name = f"scene_{i:03d}"
        save_scene(scene, out / name)
        rows.append({"scene": name, "seed": seed, "template": scene.template, "n_steps": scene.n_steps,
                     "n_views": len(scene.cameras), "grasped_vertex": scene.grasped_vertex,
                     "velocity": scene.trajectory.velocity})
    write_report(out / "dataset.csv", rows, ["scene", "seed", "template", "n_steps", "n_views",
                                             "grasped_vertex", "velocity"])


def cmd_train_prior(cfg: RunConfig, args) -> None:
    from .gns import evaluate, gns_train, simulated_samples
    from .seeding import derive_seed

    out = _out_dir(cfg)
    t = cfg.train
    s = cfg.scene
    m = cfg.gns.history
    train = simulated_samples(t.n_trajectories, derive_seed(cfg.seed, "train"), s.template, n_steps=t.n_steps, m=m)
    val = simulated_samples(t.n_val_trajectories, derive_seed(cfg.seed, "val"), s.template, n_steps=t.n_steps, m=m)
    gcfg = replace(cfg.gns, seed=derive_seed(cfg.seed, "gns"))
    prior, curves = gns_train(train, val, gcfg)
    prior.save(out / "gns.json")
    rows = [{"epoch": e, "train_mse": a, "val_mse": b}
            for e, a, b in zip(curves["epoch"], curves["train"], curves["val"])]
    write_report(out / "train_curves.csv", rows, ["epoch", "train_mse", "val_mse"])
    stats = evaluate(prior, val, m) if val else {}
    write_report(out / "prior_eval.csv", [stats] if stats else [], ["accel_mse", "zero_accel_mse", "position_mse"])


def cmd_fit_appearance(cfg: RunConfig, args) -> None:
    from .seeding import derive_seed
    from .sim import load_scene
    from .splat.fit import fit_appearance
    from .splat.gaussians import attach_gaussians

    out = _out_dir(cfg)
    scene = load_scene(args.scene)
    rest = scene.rest_mesh
    init = attach_gaussians(rest, args.per_face, derive_seed(cfg.seed, "appearance_init"))
    res = fit_appearance(init, rest, scene.observations[0], scene.cameras, cfg.fit, return_result=True)
    res.cloud.save(out / "cloud.json")
    write_report(out / "fit_losses.csv", [{"iteration": i, "L_obs": v} for i, v in enumerate(res.losses)],
                 ["iteration", "L_obs"])


def cmd_track(cfg: RunConfig, args) -> None:
    from .experiments import sequence_metrics
    from .metrics import apply_init_augmentation, mte, tracks_from_meshes
    from .seeding import derive_seed
    from .sim import load_scene
    from .update import track

    out = _out_dir(cfg)
    scene = load_scene(args.scene)
    cloud = _load_cloud(args.cloud, scene)
    prior = _make_prior(cfg, scene)
    initial = None
    if args.augment:
        initial = apply_init_augmentation(scene.ground_truth[0], args.augment, derive_seed(cfg.seed, "augment"))
    ucfg = replace(cfg.update, seed=derive_seed(cfg.seed, "update"))
    res = track(scene, prior, cloud, ucfg, initial=initial, views=args.views, refine=not args.no_refine,
                refine_initial=args.refine_initial, record_checkpoints=args.checkpoints)
    write_tracks(out / "tracks.json", res.meshes)
    loss_cols = ["epoch", "L_obs", "L_SSIM", "L_iso", "L_magn", "total"]
    write_report(out / "losses.csv", res.losses, loss_cols)
    metrics = sequence_metrics(res.meshes, scene)
    metrics["prior_mte_mm"] = sequence_metrics(res.predicted, scene)["mte_mm"]
    write_report(out / "metrics.csv", [metrics])
    if args.checkpoints:
        gt = tracks_from_meshes(scene.ground_truth[1:])
        rows = [{"wall_seconds": sec, "mte_mm": mte(tracks_from_meshes(meshes), gt)}
                for sec, meshes in res.checkpoints]
        write_report(out / "convergence.csv", rows, ["wall_seconds", "mte_mm"])


def cmd_eval(cfg: RunConfig, args) -> None:
    from .metrics import evaluate_tracks, tracks_from_meshes
    from .sim import load_scene

    out = _out_dir(cfg)
    pred = read_tracks(args.pred)
    scene = load_scene(args.gt)
    gt = tracks_from_meshes(scene.ground_truth)
    if pred.shape != gt.shape:
        raise ValueError(f"predicted tracks {pred.shape} do not match ground truth {gt.shape}")
    write_report(out / "metrics.csv", [evaluate_tracks(pred[:, 1:], gt[:, 1:])])


def _ablate_one(payload):
    scene_dir, cfg_dict, cloud_path, cells = payload
    from .experiments import ablation_rows
    from .sim import load_scene

    cfg = load_run_config(cfg_dict)
    scene = load_scene(scene_dir)
    cloud = _load_cloud(cloud_path, scene)
    rows = ablation_rows(scene, cloud, _make_prior(cfg, scene), cfg.update, cells)
    for r in rows:
        r["scene"] = str(scene_dir)
    return rows


def cmd_ablate(cfg: RunConfig, args) -> None:
    from .experiments import ABLATION_CELLS

    out = _out_dir(cfg)
    cells = args.cells or list(ABLATION_CELLS)
    bad = sorted(set(cells) - set(ABLATION_CELLS))
    if bad:
        raise ConfigError(f"unknown ablation cell(s): {', '.join(bad)}")
    payloads = [(s, cfg.to_dict(), args.cloud, cells) for s in args.scene]
    workers = min(len(payloads), args.threads)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_ablate_one, payloads))
    else:
        results = [_ablate_one(p) for p in payloads]
    rows = [r for rs in results for r in rs]
    cols = ["scene", "scene_seed", "cell", "mte_mm", "delta_10", "delta_20", "delta_40", "delta_80",
            "delta_160", "delta_avg", "survival", "wall_seconds"]
    write_report(out / "ablation.csv", rows, cols)


def cmd_plan(cfg: RunConfig, args) -> None:
    from .mpc import STRATEGIES, closed_loop_fold, make_fold_setup
    from .seeding import derive_seed

    out = _out_dir(cfg)
    strategies = args.strategies or list(STRATEGIES)
    bad = sorted(set(strategies) - set(STRATEGIES))
    if bad:
        raise ConfigError(f"unknown strategy: {', '.join(bad)}")
    rows, summary = [], []
    for ep in range(args.episodes):
        setup = make_fold_setup(derive_seed(cfg.seed, "episode", ep), image_wh=(args.image_size,) * 2)
        pcfg = replace(cfg.plan, seed=derive_seed(cfg.seed, "plan", ep))
        for strategy in strategies:
            res = closed_loop_fold(setup, strategy, pcfg)
            rows.extend(dict(r, episode=ep) for r in res.rows)
            summary.append({"episode": ep, "strategy": strategy, "initial_mse": res.initial_mse,
                            "final_mse": res.final_mse})
            if ep == 0:
                from .sim import render_observations

                frames = render_observations(setup.cloud, [res.final_mesh], setup.rest, setup.cameras)[0]
                for k, img in enumerate(frames):
                    _save_image(out / f"final_{strategy}_view{k:02d}.png", img)
    cols = ["episode", "step", "strategy", "predicted_cost", "action_x", "action_y", "action_z",
            "refined_mte_mm", "prior_mte_mm"]
    write_report(out / "plan_report.csv", rows, cols)
    write_report(out / "plan_summary.csv", summary, ["episode", "strategy", "initial_mse", "final_mse"])


def cmd_render_debug(cfg: RunConfig, args) -> None:
    from .sim import load_scene
    from .splat.gaussians import write_gaussian_csv
    from .splat.raster import render_view

    out = _out_dir(cfg)
    scene = load_scene(args.scene)
    if not 0 <= args.t <= scene.n_steps:
        raise ValueError(f"--t must lie in [0, {scene.n_steps}]")
    cloud = _load_cloud(args.cloud, scene)
    mesh = scene.ground_truth[args.t]
    for k, cam in enumerate(scene.cameras):
        r = render_view(cloud, mesh, scene.rest_mesh, cam)
        _save_image(out / f"render_view{k:02d}_t{args.t:04d}.png", r.rgb)
        _save_image(out / f"residual_view{k:02d}_t{args.t:04d}.png",
                    0.5 + 0.5 * (r.rgb - scene.observations[args.t, k]))
        if k == 0:
            write_gaussian_csv(out / f"gaussians_t{args.t:04d}.csv", cloud, r.proj.p_cam[:, 2], r.proj.mean2d)


HANDLERS = {
    "gen-dataset": cmd_gen_dataset, "train-prior": cmd_train_prior, "fit-appearance": cmd_fit_appearance,
    "track": cmd_track, "eval": cmd_eval, "ablate": cmd_ablate, "plan": cmd_plan,
    "render-debug": cmd_render_debug,
}


# --- argument parsing ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON RunConfig (partial documents allowed)")
    common.add_argument("--seed", type=int, help="root seed; every random stream derives from it")
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="clothtrack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-dataset", parents=[common], help="simulate and render synthetic scenes")
    p.add_argument("--template", choices=["TOWEL", "SHORTS", "TSHIRT"])
    p.add_argument("--n-scenes", type=int)
    p.add_argument("--views", type=int, dest="n_views")
    p.add_argument("--image-size", type=int)
    p.add_argument("--steps", type=int, dest="n_steps")
    p.add_argument("--pixel-noise", type=float)

    p = sub.add_parser("train-prior", parents=[common], help="train the graph network prior")
    p.add_argument("--n-trajectories", type=int)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("fit-appearance", parents=[common], help="fit Gaussians to the t = 0 views")
    p.add_argument("--scene", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--per-face", type=int, default=2)

    p = sub.add_parser("track", parents=[common], help="predict and refine a scene's states")
    p.add_argument("--scene", required=True)
    p.add_argument("--cloud", help="fitted cloud.json (default: the scene's ground-truth appearance)")
    p.add_argument("--mode", type=str.upper, choices=["ROLLOUT", "ITERATIVE"])
    p.add_argument("--horizon", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--prior", choices=["perturbed", "gns", "ballistic", "static"])
    p.add_argument("--prior-path")
    p.add_argument("--views", type=int, nargs="+", help="camera indices to use")
    p.add_argument("--augment", type=str.upper, choices=["TRANS", "ROT", "SCALING", "NOISE", "TRSN"])
    p.add_argument("--refine-initial", action="store_true")
    p.add_argument("--no-refine", action="store_true")
    p.add_argument("--checkpoints", action="store_true", help="write (wall seconds, MTE) convergence pairs")

    p = sub.add_parser("eval", parents=[common], help="score tracks against a scene")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)

    p = sub.add_parser("ablate", parents=[common], help="run the ablation grid")
    p.add_argument("--scene", required=True, nargs="+")
    p.add_argument("--cloud")
    p.add_argument("--cells", nargs="+")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("plan", parents=[common], help="closed-loop half-folding episodes")
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--strategies", nargs="+", type=str.upper)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--candidates", type=int)
    p.add_argument("--horizon", type=int)

    p = sub.add_parser("render-debug", parents=[common], help="render a frame with debug outputs")
    p.add_argument("--scene", required=True)
    p.add_argument("--cloud")
    p.add_argument("--t", type=int, default=0)
    return parser


def resolve_config(args) -> RunConfig:
    data = {}
    if args.config is not None:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    cfg = load_run_config(data)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)

    def override(section: str, **values):
        nonlocal cfg
        values = {k: v for k, v in values.items() if v is not None}
        if values:
            cfg = replace(cfg, **{section: _build_section(type(getattr(cfg, section)), getattr(cfg, section),
                                                          values, section)})

    cmd = args.command
    if cmd == "gen-dataset":
        override("scene", template=args.template, n_scenes=args.n_scenes, n_views=args.n_views,
                 image_size=args.image_size, n_steps=args.n_steps, pixel_noise=args.pixel_noise)
    elif cmd == "train-prior":
        override("train", n_trajectories=args.n_trajectories)
        override("gns", epochs=args.epochs)
    elif cmd == "fit-appearance":
        override("fit", iterations=args.iterations)
    elif cmd == "track":
        override("update", mode=args.mode, horizon=args.horizon, epochs=args.epochs)
        override("prior", kind=args.prior, path=args.prior_path)
    elif cmd == "ablate":
        override("update", epochs=args.epochs)
    elif cmd == "plan":
        override("plan", n_candidates=args.candidates, horizon=args.horizon)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        threads = _apply_threads()
        args.threads = threads
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"clothtrack {args.command}: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    try:
        HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"clothtrack {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # module failures map to exit status 1
        print(f"clothtrack {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
