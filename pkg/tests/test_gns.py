import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from clothtrack.gns import (BallisticPrior, GNSConfig, GNSPrior, PerturbedSimulator, PredictionError,
                            acceleration_loss,
                            build_graph_features, evaluate, gns_train, pad_history, rollout, rollout_batch,
                            samples_from_states, simulated_samples, zero_decoder_output, _collate)
from clothtrack.mesh import grid_mesh
from clothtrack.sim import ClothParams, make_bezier_trajectory, rollout_simulator, simulate_step

SMALL = GNSConfig(width=8, blocks=2, epochs=3, batch_size=4)


@pytest.fixture(scope="module")
def trajectory():
    rest = grid_mesh(0.2, 0.2, 4, 4)
    traj = make_bezier_trajectory(rest, 11, n_steps=6)
    params = ClothParams().with_dt(traj.dt)
    return rest, traj, rollout_simulator(rest, params, traj.actions, traj.pick_vertex)


def test_feature_shapes_and_symmetry(trajectory):
    rest, traj, states = trajectory
    f = build_graph_features(states[:4], traj.pick_vertex, traj.dt)
    assert f.node_features.shape == (16, 10)
    assert f.edge_features.shape == (2 * len(rest.edges), 4)
    half = len(rest.edges)
    assert np.array_equal(f.senders[:half], f.receivers[half:])
    assert np.allclose(f.edge_features[:half, :3], -f.edge_features[half:, :3])
    assert np.allclose(f.edge_features[:, 3], np.linalg.norm(f.edge_features[:, :3], axis=1))
    assert f.node_features[traj.pick_vertex, -1] == 1 and f.node_features[:, -1].sum() == 1


def test_short_history_is_padded_with_rest(trajectory):
    rest, traj, states = trajectory
    padded = pad_history(states[:2], 3)
    assert len(padded) == 4 and padded[0] is states[0] and padded[1] is states[0]
    f = build_graph_features(states[:1], traj.pick_vertex)
    assert np.all(f.node_features[:, :9] == 0)


def test_action_overrides_grasped_velocity(trajectory):
    rest, traj, states = trajectory
    f = build_graph_features(states[:3], traj.pick_vertex, traj.dt, action=[1.0, 2.0, 3.0])
    assert np.allclose(f.node_features[traj.pick_vertex, 6:9], [1, 2, 3])


def test_zero_decoder_is_ballistic(trajectory):
    rest, traj, states = trajectory
    prior = GNSPrior.initialise(SMALL)
    zero_decoder_output(prior.net)
    a = prior.predict(states[:4], traj.actions[3], traj.pick_vertex, traj.dt)
    b = BallisticPrior().predict(states[:4], traj.actions[3], traj.pick_vertex, traj.dt)
    assert np.allclose(a.vertices, b.vertices, atol=1e-15)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000))
def test_grasped_vertex_moves_by_action(seed):
    rest = grid_mesh(0.2, 0.2, 3, 3)
    prior = GNSPrior.initialise(GNSConfig(width=8, blocks=1, seed=seed))
    action = np.random.default_rng(seed).normal(size=3) * 0.01
    out = prior.predict([rest], action, 4, 1.5)
    assert np.allclose(out.vertices[4] - rest.vertices[4], action * 1.5, atol=1e-15)


def test_loss_gradient_matches_finite_differences(trajectory):
    rest, traj, states = trajectory
    torch.manual_seed(0)
    prior = GNSPrior.initialise(SMALL)
    batch = _collate(samples_from_states(states, traj.actions, traj.pick_vertex, traj.dt), 3)
    net = prior.net
    params = list(net.parameters())
    net.zero_grad()
    acceleration_loss(net, batch).backward()
    rng = np.random.default_rng(0)
    rel = []
    for _ in range(20):
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = float(p.grad[idx])
        h = 1e-6
        with torch.no_grad():
            orig = float(p[idx])
            p[idx] = orig + h
            up = float(acceleration_loss(net, batch))
            p[idx] = orig - h
            down = float(acceleration_loss(net, batch))
            p[idx] = orig
        fd = (up - down) / (2 * h)
        rel.append(abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8))
    assert max(rel) < 1e-3


def test_checkpoint_round_trip(tmp_path, trajectory):
    rest, traj, states = trajectory
    prior = GNSPrior.initialise(SMALL)
    prior.save(tmp_path / "g.json")
    back = GNSPrior.load(tmp_path / "g.json")
    a = prior.predict(states[:4], traj.actions[3], traj.pick_vertex, traj.dt)
    b = back.predict(states[:4], traj.actions[3], traj.pick_vertex, traj.dt)
    assert np.array_equal(a.vertices, b.vertices)
    doc = prior.to_dict()
    doc["tensors"][0]["shape"] = [1, 1]
    with pytest.raises(ValueError, match="shape mismatch"):
        GNSPrior.from_dict(doc)


def test_ballistic_acceleration_error_equals_zero_baseline(trajectory):
    rest, traj, states = trajectory
    samples = samples_from_states(states, traj.actions, traj.pick_vertex, traj.dt)
    stats = evaluate(BallisticPrior(), samples)
    assert stats["accel_mse"] == pytest.approx(stats["zero_accel_mse"], rel=1e-9)


def test_training_reduces_loss():
    train = simulated_samples(2, 0, size_params={"nx": 4, "ny": 4}, n_steps=6)
    prior, curves = gns_train(train, [], GNSConfig(width=16, blocks=2, epochs=15, batch_size=4))
    assert curves["train"][-1] < curves["train"][0]
    assert len(curves["epoch"]) == 16


def test_training_is_deterministic():
    train = simulated_samples(1, 1, size_params={"nx": 3, "ny": 3}, n_steps=4)
    a, _ = gns_train(train, [], SMALL)
    b, _ = gns_train(train, [], SMALL)
    for (ka, va), (kb, vb) in zip(a.net.state_dict().items(), b.net.state_dict().items()):
        assert torch.equal(va, vb)


def test_perturbed_simulator_with_unit_scale_is_exact(trajectory):
    rest, traj, states = trajectory
    params = ClothParams()
    prior = PerturbedSimulator(params, stiffness_scale=1.0)
    pred = prior.predict(states[:2], traj.actions[1], traj.pick_vertex, traj.dt)
    assert np.allclose(pred.vertices, states[2].vertices, atol=1e-12)


def test_rollout_batch_matches_sequential(trajectory):
    rest, traj, states = trajectory
    prior = PerturbedSimulator(ClothParams())
    seqs = np.stack([traj.actions[:3], traj.actions[:3] * 0.5])
    batch = rollout_batch(prior, [rest], seqs, traj.pick_vertex, traj.dt)
    for b in range(2):
        seq = rollout(prior, [rest], seqs[b], traj.pick_vertex, traj.dt)
        assert np.allclose(batch[b], np.stack([s.vertices for s in seq]), atol=1e-12)
    gns = GNSPrior.initialise(SMALL)
    out = rollout_batch(gns, [rest], seqs, traj.pick_vertex, traj.dt)
    assert out.shape == (2, 3, 16, 3) and np.all(np.isfinite(out))


def test_rollout_batch_marks_divergence_with_nan():
    class Fragile(BallisticPrior):
        def predict(self, history, action, grasped_vertex, dt):
            if np.abs(action).max() > 1.0:
                raise PredictionError("too fast")
            return super().predict(history, action, grasped_vertex, dt)

    rest = grid_mesh(0.2, 0.2, 3, 3)
    seqs = np.array([[[0.0, 0.0, 0.01]], [[5.0, 0.0, 0.0]]])
    out = rollout_batch(Fragile(), [rest], seqs, 0, 1.0)
    assert np.all(np.isfinite(out[0])) and np.all(np.isnan(out[1]))


def test_rollout_requires_actions(trajectory):
    rest, traj, states = trajectory
    with pytest.raises(ValueError):
        rollout(BallisticPrior(), [rest], np.zeros((0, 3)), 0, 1.0)


def test_training_starts_ballistic_and_keeps_best_validation_epoch():
    train = simulated_samples(2, 0, size_params={"nx": 4, "ny": 4}, n_steps=6)
    val = simulated_samples(1, 1, size_params={"nx": 4, "ny": 4}, n_steps=6)
    prior, curves = gns_train(train, val, GNSConfig(width=16, blocks=2, epochs=6, batch_size=4))
    assert curves["val"][curves["best_epoch"]] == min(curves["val"])
    with torch.no_grad():
        assert float(acceleration_loss(prior.net, _collate(val, 3))) == pytest.approx(min(curves["val"]), rel=1e-12)
    untrained, _ = gns_train(train, val, GNSConfig(width=16, blocks=2, epochs=0, batch_size=4))
    stats = evaluate(untrained, val)
    assert stats["accel_mse"] == pytest.approx(stats["zero_accel_mse"], rel=1e-9)
