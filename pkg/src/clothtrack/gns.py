"""Transition priors: a message-passing graph network simulator and simulator-based fallbacks.

All priors share one interface, ``predict(history, action, grasped_vertex, dt)``,
where ``history`` is a list of meshes ending with the current state.  The
grasped vertex always moves by exactly ``action * dt``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .mesh import AugmentedMesh
from .seeding import derive_seed
from .sim import ClothParams, SimulationDiverged, simulate_batch, simulate_step

DTYPE = torch.float64


class PredictionError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"training loss became non-finite at iteration {iteration}")
        self.iteration = iteration


# --- features -------------------------------------------------------------------

@dataclass
class GraphFeatures:
    node_features: np.ndarray  # (N, 3m + 1)
    edge_features: np.ndarray  # (2L, 4)
    senders: np.ndarray  # (2L,)
    receivers: np.ndarray  # (2L,)
    velocities: np.ndarray  # (m, N, 3), oldest first


def pad_history(history, m: int) -> list:
    history = list(history)
    if not history:
        raise ValueError("empty history")
    n = history[0].n_vertices
    if any(h.n_vertices != n for h in history):
        raise ValueError("history meshes have different vertex counts")
    if len(history) < m + 1:
        history = [history[0]] * (m + 1 - len(history)) + history
    return history[-(m + 1):]


def history_velocities(history, dt: float, m: int = 3) -> np.ndarray:
    """(m, N, 3) finite-difference velocities, oldest first."""
    pos = np.stack([h.vertices for h in pad_history(history, m)])
    return np.diff(pos, axis=0) / dt


def build_graph_features(history, grasped_vertex: int, dt: float = 1.0, m: int = 3,
                         action=None) -> GraphFeatures:
    """Node features: past ``m`` velocities and a grasped flag; edge features: offset and length.

    With ``action`` given, the grasped vertex's latest velocity is replaced by it.
    """
    hist = pad_history(history, m)
    vel = history_velocities(hist, dt, m)
    if action is not None:
        vel[-1, grasped_vertex] = np.asarray(action, dtype=np.float64)
    cur = hist[-1]
    n = cur.n_vertices
    flag = np.zeros((n, 1))
    flag[grasped_vertex] = 1.0
    node = np.concatenate([vel.transpose(1, 0, 2).reshape(n, 3 * m), flag], axis=1)
    e = cur.edges
    senders = np.concatenate([e[:, 0], e[:, 1]])
    receivers = np.concatenate([e[:, 1], e[:, 0]])
    diff = cur.vertices[senders] - cur.vertices[receivers]
    edge = np.concatenate([diff, np.linalg.norm(diff, axis=1, keepdims=True)], axis=1)
    return GraphFeatures(node, edge, senders, receivers, vel)


# --- network ----------------------------------------------------------------------

@dataclass(frozen=True)
class GNSConfig:
    history: int = 3
    blocks: int = 3
    width: int = 32
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0


def _mlp(n_in: int, width: int, n_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(n_in, width), nn.ReLU(), nn.Linear(width, width), nn.ReLU(),
                         nn.Linear(width, n_out))


class GNSNet(nn.Module):
    """Encoder, ``blocks`` residual edge/node update blocks, acceleration decoder."""

    def __init__(self, cfg: GNSConfig):
        super().__init__()
        w = cfg.width
        self.node_enc = _mlp(3 * cfg.history + 1, w, w)
        self.edge_enc = _mlp(4, w, w)
        self.edge_blocks = nn.ModuleList([_mlp(3 * w, w, w) for _ in range(cfg.blocks)])
        self.node_blocks = nn.ModuleList([_mlp(2 * w, w, w) for _ in range(cfg.blocks)])
        self.decoder = _mlp(w, w, 3)
        self.register_buffer("node_mean", torch.zeros(3 * cfg.history + 1, dtype=DTYPE))
        self.register_buffer("node_std", torch.ones(3 * cfg.history + 1, dtype=DTYPE))
        self.register_buffer("edge_mean", torch.zeros(4, dtype=DTYPE))
        self.register_buffer("edge_std", torch.ones(4, dtype=DTYPE))
        self.register_buffer("accel_std", torch.ones(3, dtype=DTYPE))

    def forward(self, node, edge, senders, receivers, dt):
        """Accelerations (m/s^2) for node features in SI units and a per-node step ``dt``.

        Velocities enter as per-step displacements and the decoder emits
        per-step second differences, so slowly driven cloth looks the same
        at every step length.
        """
        dt = dt.reshape(-1, 1)
        node = torch.cat([node[:, :-1] * dt, node[:, -1:]], dim=1)
        h = self.node_enc((node - self.node_mean) / self.node_std)
        e = self.edge_enc((edge - self.edge_mean) / self.edge_std)
        for eb, nb in zip(self.edge_blocks, self.node_blocks):
            e = e + eb(torch.cat([e, h[senders], h[receivers]], dim=1))
            agg = torch.zeros_like(h).index_add_(0, receivers, e)
            h = h + nb(torch.cat([h, agg], dim=1))
        return self.decoder(h) * self.accel_std / dt**2


def zero_decoder_output(net: GNSNet) -> None:
    with torch.no_grad():
        net.decoder[-1].weight.zero_()
        net.decoder[-1].bias.zero_()


def _to_torch(feat: GraphFeatures, dt: float):
    node = torch.as_tensor(feat.node_features, dtype=DTYPE)
    return (node, torch.as_tensor(feat.edge_features, dtype=DTYPE), torch.as_tensor(feat.senders),
            torch.as_tensor(feat.receivers), torch.full((len(node),), float(dt), dtype=DTYPE))


# --- priors -----------------------------------------------------------------------

def _advance(cur: AugmentedMesh, vel: np.ndarray, accel: np.ndarray, action, grasped: int, dt: float):
    v_new = vel + accel * dt
    v_new[grasped] = action
    x_new = cur.vertices + v_new * dt
    x_new[grasped] = cur.vertices[grasped] + np.asarray(action, dtype=np.float64) * dt
    return cur.with_state(x_new, v_new)


class GNSPrior:
    def __init__(self, net: GNSNet, cfg: GNSConfig):
        self.net = net.to(DTYPE)
        self.cfg = cfg

    name = "gns"

    @classmethod
    def initialise(cls, cfg: GNSConfig = GNSConfig()) -> "GNSPrior":
        torch.manual_seed(derive_seed(cfg.seed, "gns_init") % (2**63))
        return cls(GNSNet(cfg).to(DTYPE), cfg)

    def accelerations(self, history, action, grasped_vertex: int, dt: float) -> np.ndarray:
        feat = build_graph_features(history, grasped_vertex, dt, self.cfg.history, action)
        with torch.no_grad():
            acc = self.net(*_to_torch(feat, dt)).numpy()
        return acc

    def predict(self, history, action, grasped_vertex: int, dt: float) -> AugmentedMesh:
        action = np.asarray(action, dtype=np.float64)
        if not np.all(np.isfinite(action)):
            raise PredictionError("non-finite action")
        hist = pad_history(history, self.cfg.history)
        acc = self.accelerations(hist, action, grasped_vertex, dt)
        if not np.all(np.isfinite(acc)):
            raise PredictionError("network produced non-finite accelerations")
        vel = history_velocities(hist, dt, self.cfg.history)[-1]
        vel[grasped_vertex] = action
        return _advance(hist[-1], vel, acc, action, grasped_vertex, dt)

    # checkpoints
    def to_dict(self) -> dict:
        state = self.net.state_dict()
        return {
            "config": asdict(self.cfg),
            "tensors": [{"name": k, "shape": list(v.shape), "data": v.reshape(-1).tolist()}
                        for k, v in state.items()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GNSPrior":
        cfg = GNSConfig(**d["config"])
        net = GNSNet(cfg).to(DTYPE)
        expected = net.state_dict()
        loaded = {}
        for t in d["tensors"]:
            if t["name"] not in expected:
                raise ValueError(f"unexpected tensor {t['name']!r} in checkpoint")
            if list(expected[t["name"]].shape) != list(t["shape"]):
                raise ValueError(f"shape mismatch for {t['name']}: {t['shape']} vs "
                                 f"{list(expected[t['name']].shape)}")
            loaded[t["name"]] = torch.tensor(t["data"], dtype=DTYPE).reshape(t["shape"])
        missing = set(expected) - set(loaded)
        if missing:
            raise ValueError(f"checkpoint lacks tensors {sorted(missing)}")
        net.load_state_dict(loaded)
        return cls(net, cfg)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "GNSPrior":
        return cls.from_dict(json.loads(Path(path).read_text()))


class BallisticPrior:
    """Zero-acceleration extrapolation of the finite-difference velocities."""

    name = "ballistic"

    def __init__(self, history: int = 3):
        self.m = history

    def predict(self, history, action, grasped_vertex: int, dt: float) -> AugmentedMesh:
        hist = pad_history(history, self.m)
        vel = history_velocities(hist, dt, self.m)[-1]
        action = np.asarray(action, dtype=np.float64)
        vel[grasped_vertex] = action
        return _advance(hist[-1], vel, np.zeros_like(vel), action, grasped_vertex, dt)


class PerturbedSimulator:
    """The ground-truth simulator with scaled stiffness, standing in for a model gap."""

    name = "perturbed"

    def __init__(self, params: ClothParams | None = None, stiffness_scale: float = 0.5,
                 damping_scale: float = 1.0):
        base = params or ClothParams()
        self.params = replace(base, stretch_stiffness=base.stretch_stiffness * stiffness_scale,
                              bending_stiffness=base.bending_stiffness * stiffness_scale,
                              damping=base.damping * damping_scale)

    def predict(self, history, action, grasped_vertex: int, dt: float) -> AugmentedMesh:
        return simulate_step(list(history)[-1], self.params.with_dt(dt), action, grasped_vertex)

    def predict_batch(self, mesh: AugmentedMesh, positions, velocities, actions, grasped_vertex: int,
                      dt: float):
        """One step for B candidate states at once: (B, N, 3) positions and velocities."""
        return simulate_batch(mesh, self.params.with_dt(dt), positions, velocities, actions, grasped_vertex)


def rollout(prior, initial_history, actions, grasped_vertex: int, dt: float) -> list:
    """Iterate one-step predictions; returns the ``T`` predicted states."""
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, 3)
    if len(actions) < 1:
        raise ValueError("rollout needs at least one action")
    hist = list(initial_history)
    out = []
    for a in actions:
        nxt = prior.predict(hist, a, grasped_vertex, dt)
        out.append(nxt)
        hist = hist[-3:] + [nxt]
    return out


def rollout_batch(prior, history, action_seqs, grasped_vertex: int, dt: float) -> np.ndarray:
    """Roll B action sequences (B, H, 3) from one history; returns (B, H, N, 3) positions.

    Diverged candidates come back as NaN.
    """
    action_seqs = np.asarray(action_seqs, dtype=np.float64)
    n_cand, horizon = action_seqs.shape[:2]
    cur = list(history)[-1]
    out = np.full((n_cand, horizon, cur.n_vertices, 3), np.nan)
    if hasattr(prior, "predict_batch"):
        x = np.repeat(cur.vertices[None], n_cand, axis=0)
        v = np.repeat(cur.velocities[None], n_cand, axis=0)
        for h in range(horizon):
            try:
                x, v = prior.predict_batch(cur, x, v, action_seqs[:, h], grasped_vertex, dt)
            except SimulationDiverged:
                return _rollout_each(prior, history, action_seqs, grasped_vertex, dt, out)
            out[:, h] = x
        return out
    return _rollout_each(prior, history, action_seqs, grasped_vertex, dt, out)


def _rollout_each(prior, history, action_seqs, grasped_vertex, dt, out):
    for b, seq in enumerate(action_seqs):
        try:
            states = rollout(prior, history, seq, grasped_vertex, dt)
        except (SimulationDiverged, PredictionError):
            continue
        out[b] = np.stack([s.vertices for s in states])
    return out


# --- training -----------------------------------------------------------------------

@dataclass
class Sample:
    history: list
    action: np.ndarray
    target: AugmentedMesh
    grasped_vertex: int
    dt: float


def samples_from_states(states, actions, grasped_vertex: int, dt: float, m: int = 3) -> list:
    """One sample per step of a simulated trajectory."""
    return [Sample(states[max(0, t - m):t + 1], np.asarray(actions[t]), states[t + 1], grasped_vertex, dt)
            for t in range(len(actions))]


def target_accelerations(sample: Sample, m: int = 3) -> np.ndarray:
    hist = pad_history(sample.history, m)
    v_prev = history_velocities(hist, sample.dt, m)[-1]
    v_next = (sample.target.vertices - hist[-1].vertices) / sample.dt
    return (v_next - v_prev) / sample.dt


@dataclass
class _Batch:
    node: torch.Tensor
    edge: torch.Tensor
    senders: torch.Tensor
    receivers: torch.Tensor
    target: torch.Tensor
    mask: torch.Tensor
    dt: torch.Tensor  # per node


def _collate(samples, m: int) -> _Batch:
    nodes, edges, snd, rcv, tgt, mask, dts = [], [], [], [], [], [], []
    offset = 0
    for s in samples:
        f = build_graph_features(s.history, s.grasped_vertex, s.dt, m, s.action)
        nodes.append(f.node_features)
        edges.append(f.edge_features)
        snd.append(f.senders + offset)
        rcv.append(f.receivers + offset)
        tgt.append(target_accelerations(s, m))
        mk = np.ones(len(f.node_features))
        mk[s.grasped_vertex] = 0.0
        mask.append(mk)
        dts.append(np.full(len(mk), float(s.dt)))
        offset += len(f.node_features)
    cat = np.concatenate
    return _Batch(torch.as_tensor(cat(nodes), dtype=DTYPE), torch.as_tensor(cat(edges), dtype=DTYPE),
                  torch.as_tensor(cat(snd)), torch.as_tensor(cat(rcv)), torch.as_tensor(cat(tgt), dtype=DTYPE),
                  torch.as_tensor(cat(mask), dtype=DTYPE), torch.as_tensor(cat(dts), dtype=DTYPE))


def acceleration_loss(net: GNSNet, batch: _Batch) -> torch.Tensor:
    """Masked acceleration MSE, each node's error scaled by dt^2 and the per-axis target scale."""
    pred = net(batch.node, batch.edge, batch.senders, batch.receivers, batch.dt)
    err = ((pred - batch.target) * batch.dt[:, None] ** 2 / net.accel_std) ** 2
    return (err.sum(dim=1) * batch.mask).sum() / (3 * batch.mask.sum())


def evaluate(prior, samples, m: int = 3) -> dict:
    """Acceleration MSE (m^2/s^4) and next-position MSE (m^2) over free vertices."""
    acc_err, pos_err, zero_err, count = 0.0, 0.0, 0.0, 0
    for s in samples:
        tgt = target_accelerations(s, m)
        pred_mesh = prior.predict(s.history, s.action, s.grasped_vertex, s.dt)
        pred_acc = target_accelerations(Sample(s.history, s.action, pred_mesh, s.grasped_vertex, s.dt), m)
        free = np.ones(len(tgt), dtype=bool)
        free[s.grasped_vertex] = False
        acc_err += float(np.sum((pred_acc - tgt)[free] ** 2))
        zero_err += float(np.sum(tgt[free] ** 2))
        pos_err += float(np.sum((pred_mesh.vertices - s.target.vertices)[free] ** 2))
        count += 3 * int(free.sum())
    return {"accel_mse": acc_err / count, "zero_accel_mse": zero_err / count, "position_mse": pos_err / count}


def _fit_normalisation(net: GNSNet, batch: _Batch) -> None:
    with torch.no_grad():
        dt = batch.dt[:, None]
        node = torch.cat([batch.node[:, :-1] * dt, batch.node[:, -1:]], dim=1)
        net.node_mean.copy_(node.mean(0))
        net.node_std.copy_(node.std(0).clamp_min(1e-8))
        net.node_mean[-1] = 0.0
        net.node_std[-1] = 1.0
        net.edge_mean.copy_(batch.edge.mean(0))
        net.edge_std.copy_(batch.edge.std(0).clamp_min(1e-8))
        free = batch.mask > 0
        net.accel_std.copy_((batch.target * dt**2)[free].std(0).clamp_min(1e-12))


def gns_train(train: list, val: list, cfg: GNSConfig = GNSConfig(), log=None):
    """Train on one-step acceleration MSE with Adam; returns (prior, curves).

    The decoder starts at zero, so training begins from the zero-acceleration
    baseline.  With a validation set the epoch with the lowest validation
    loss is returned (``curves["best_epoch"]``); otherwise the last one.
    """
    if not train:
        raise ValueError("empty training set")
    prior = GNSPrior.initialise(cfg)
    net = prior.net
    m = cfg.history
    full = _collate(train, m)
    _fit_normalisation(net, full)
    zero_decoder_output(net)
    val_batch = _collate(val, m) if val else None
    rng = np.random.default_rng(derive_seed(cfg.seed, "gns_batches"))
    batches_per_epoch = max(1, int(np.ceil(len(train) / cfg.batch_size)))
    cached = [_collate([s], m) for s in train]
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    curves = {"epoch": [], "train": [], "val": [], "best_epoch": cfg.epochs}
    best_val, best_state = np.inf, None
    it = 0
    for epoch in range(cfg.epochs + 1):
        with torch.no_grad():
            curves["epoch"].append(epoch)
            curves["train"].append(float(acceleration_loss(net, full)))
            curves["val"].append(float(acceleration_loss(net, val_batch)) if val_batch else float("nan"))
        if log:
            log(epoch, curves["train"][-1], curves["val"][-1])
        if val_batch is not None and curves["val"][-1] < best_val:
            best_val = curves["val"][-1]
            best_state = {k: v.clone() for k, v in net.state_dict().items()}
            curves["best_epoch"] = epoch
        if epoch == cfg.epochs:
            break
        perm = rng.permutation(len(train))
        for b in range(batches_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = _merge([cached[i] for i in idx])
            opt.zero_grad()
            loss = acceleration_loss(net, batch)
            if not torch.isfinite(loss):
                raise TrainingDiverged(it)
            loss.backward()
            opt.step()
            it += 1
    if best_state is not None:
        net.load_state_dict(best_state)
    return prior, curves


def _merge(batches) -> _Batch:
    offs = np.cumsum([0] + [len(b.node) for b in batches[:-1]])
    return _Batch(torch.cat([b.node for b in batches]), torch.cat([b.edge for b in batches]),
                  torch.cat([b.senders + int(o) for b, o in zip(batches, offs)]),
                  torch.cat([b.receivers + int(o) for b, o in zip(batches, offs)]),
                  torch.cat([b.target for b in batches]), torch.cat([b.mask for b in batches]),
                  torch.cat([b.dt for b in batches]))


def simulated_samples(n_trajectories: int, seed: int, template: str = "TOWEL", size_params=None,
                      n_steps: int = 16, params: ClothParams | None = None, m: int = 3) -> list:
    """Training samples from random pick-and-place rollouts of the ground-truth simulator."""
    from .sim import make_bezier_trajectory, rollout_simulator, template_mesh

    rest = template_mesh(template, size_params)
    out = []
    for k in range(n_trajectories):
        traj = make_bezier_trajectory(rest, derive_seed(seed, "gns_data", k), n_steps=n_steps)
        p = (params or ClothParams()).with_dt(traj.dt)
        states = rollout_simulator(rest, p, traj.actions, traj.pick_vertex)
        out.extend(samples_from_states(states, traj.actions, traj.pick_vertex, traj.dt, m))
    return out
