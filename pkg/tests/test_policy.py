import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from helpers import finite_difference_errors, random_steps, tiny_config
from mogcsl.data import ConfigError, RelabeledStep, Trajectory, relabel_all
from mogcsl.policy import (
    CheckpointError,
    PolicyConfig,
    PolicyModel,
    build_model,
    encode_state,
    evaluate_loss,
    load_model,
    make_batch,
    predict,
    predict_batch,
    save_model,
    scalarize_goals,
    train,
)


def test_probabilities_sum_to_one():
    model = build_model(tiny_config())
    for hist, t, g in [((), 1, (0, 0)), ((1, 2, 3), 3, (5.0, -2.0)), ((5,) * 9, 8, (1e3, 0))]:
        p = predict(model, hist, t, g)
        assert p.shape == (5,)
        assert np.all((p > 0) & (p < 1))
        assert abs(p.sum() - 1) < 1e-6


def test_zeroed_output_layer_is_uniform():
    model = build_model(tiny_config())
    with torch.no_grad():
        model.output_layer.weight.zero_()
        model.output_layer.bias.zero_()
    assert np.allclose(predict(model, (1, 2), 2, (1.0, 1.0)), 0.2)


def test_initial_loss_near_log_n():
    cfg = tiny_config(n_items=20, item_embed_dim=32, goal_embed_dim=32, timestep_embed_dim=32, encoder_width=32, mlp_hidden_sizes=(32,))
    steps = random_steps(2000, cfg, seed=1)
    model = build_model(cfg, steps)
    loss = evaluate_loss(model, make_batch(steps, cfg))
    assert abs(loss - math.log(20)) < 0.15


def test_single_tuple_memorized():
    cfg = tiny_config(batch_size=8, learning_rate=1e-2, max_epochs=200)
    step = RelabeledStep((1, 2), 3, 4, np.array([1.0, 0.5]))
    model = build_model(cfg, [step])
    report = train(model, [step] * 8, epochs=200)
    assert report.epochs <= 200
    assert report.train_loss[-1] < 0.01


def deterministic_two_item(n=100):
    # item 1 then item 2, alternating; each step pays (1, 0)
    trajs = []
    for i in range(n):
        length = 2 + i % 4
        acts = [1 + (t % 2) for t in range(length)]
        trajs.append(Trajectory.from_arrays(f"t{i}", acts, [[1.0, 0.0]] * length))
    return relabel_all(trajs)


def test_deterministic_overfit():
    steps = deterministic_two_item()
    cfg = tiny_config(n_items=2, batch_size=32, learning_rate=5e-3, max_epochs=60)
    model = build_model(cfg, steps)
    train(model, steps)
    batch = make_batch(steps, cfg)
    with torch.no_grad():
        pred = model(batch.hist, batch.t, batch.goal).argmax(dim=1)
    assert (pred == batch.action).float().mean() >= 0.99


@settings(max_examples=50)
@given(
    st.integers(1, 12),
    st.integers(1, 3),
    st.sampled_from([4, 8, 12]),
    st.integers(1, 9),
    st.integers(1, 9),
    st.booleans(),
    st.sampled_from(["transformer", "gru"]),
)
def test_embedding_size_random_configs(n_items, d, D, gdim, tdim, attention, encoder):
    cfg = PolicyConfig(
        n_items=n_items, d=d, window=3, item_embed_dim=D, goal_embed_dim=gdim, timestep_embed_dim=tdim,
        encoder=encoder, encoder_width=8, attention_block=attention, mlp_hidden_sizes=(4,), max_timestep=4,
    )
    model = PolicyModel(cfg)
    emb = encode_state(model, (1,), 2, np.zeros(d))
    expected = 3 * D if attention else D + tdim + gdim
    assert emb.shape == (model.embedding_dim,) == (expected,)


def test_empty_history_embedding_and_determinism():
    model = build_model(tiny_config())
    a = encode_state(model, (), 1, (0.0, 0.0))
    b = encode_state(model, (), 1, (0.0, 0.0))
    assert a.shape == (model.embedding_dim,) == (24,)
    assert np.all(np.isfinite(a))
    assert np.array_equal(a, b)


def test_gradient_matches_finite_differences():
    errors = finite_difference_errors(tiny_config(), n_samples=3)
    worst = max(errors, key=errors.get)
    assert errors[worst] <= 1e-4, worst


def test_gradient_check_gru_no_attention():
    errors = finite_difference_errors(tiny_config(encoder="gru", attention_block=False), n_samples=3, seed=1)
    assert max(errors.values()) <= 1e-4


def test_permutation_consistency():
    cfg = tiny_config()
    model = build_model(cfg)
    perm = np.array([3, 1, 5, 2, 4])  # old id i+1 -> new id perm[i]
    permuted = build_model(cfg)
    permuted.load_state_dict(model.state_dict())
    with torch.no_grad():
        permuted.item_emb.weight[torch.as_tensor(perm)] = model.item_emb.weight[1:]
        permuted.output_layer.weight[torch.as_tensor(perm - 1)] = model.output_layer.weight
        permuted.output_layer.bias[torch.as_tensor(perm - 1)] = model.output_layer.bias
    rng = np.random.default_rng(0)
    for _ in range(10):
        hist = tuple(int(a) for a in rng.integers(1, 6, size=3))
        g = rng.normal(size=2)
        p = predict(model, hist, 2, g)
        q = predict(permuted, tuple(int(perm[a - 1]) for a in hist), 2, g)
        assert np.allclose(q[perm - 1], p, atol=1e-6)


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_config()
    steps = random_steps(50, cfg)
    model = build_model(cfg, steps)
    train(model, steps, epochs=2)
    save_model(model, tmp_path / "m.pt", {"note": 1})
    back = load_model(tmp_path / "m.pt", expect=cfg)
    batch = make_batch(steps, cfg)
    a = predict_batch(model, batch.hist.numpy(), batch.t.numpy(), batch.goal.numpy())
    b = predict_batch(back, batch.hist.numpy(), batch.t.numpy(), batch.goal.numpy())
    assert np.abs(a - b).max() <= 1e-6
    assert back.extra == {"note": 1}


def test_corrupt_checkpoint(tmp_path):
    path = tmp_path / "bad.pt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_model(path)


def test_checkpoint_version_mismatch(tmp_path):
    model = build_model(tiny_config())
    save_model(model, tmp_path / "m.pt")
    payload = torch.load(tmp_path / "m.pt", weights_only=True)
    payload["version"] = 99
    torch.save(payload, tmp_path / "m.pt")
    with pytest.raises(CheckpointError, match="version"):
        load_model(tmp_path / "m.pt")


def test_checkpoint_different_n_names_field(tmp_path):
    save_model(build_model(tiny_config()), tmp_path / "m.pt")
    with pytest.raises(CheckpointError, match="n_items"):
        load_model(tmp_path / "m.pt", expect=tiny_config(n_items=7))


def test_scalarize_examples():
    steps = [RelabeledStep((), 1, 1, np.array([2.0, 1.0]))]
    assert scalarize_goals(steps, [0.5, 0.5])[0].goal.tolist() == [1.5]
    assert scalarize_goals(steps, [1.0, 0.0])[0].goal.tolist() == [2.0]
    for bad in ([0.5, 0.6], [1.0], [-0.1, 1.1]):
        with pytest.raises(ConfigError):
            scalarize_goals(steps, bad)


def test_scalar_mode_requires_weights():
    with pytest.raises(ConfigError):
        tiny_config(goal_mode="scalar")
    cfg = tiny_config(goal_mode="scalar", weights=(0.3, 0.7))
    assert cfg.goal_dim == 1


def test_unknown_item_rejected():
    model = build_model(tiny_config())
    with pytest.raises(ValueError, match="unknown item"):
        predict(model, (1, 6), 2, (0.0, 0.0))
    with pytest.raises(ValueError):
        predict(model, (1,), 2, (0.0, 0.0, 0.0))


def test_timestep_beyond_table_is_clamped(caplog):
    model = build_model(tiny_config())
    with caplog.at_level(logging.WARNING):
        p = predict(model, (1,), 50, (0.0, 0.0))
    assert "clamped" in caplog.text
    assert np.allclose(p, predict(model, (1,), 8, (0.0, 0.0)))


def sequence_denoise_steps(n, seed):
    """Histories of random items; the action is a function of the history
    only when every goal component exceeds -1, else uniform noise."""
    rng = np.random.default_rng(seed)
    steps = []
    for _ in range(n):
        hist = tuple(int(a) for a in rng.integers(1, 6, size=4))
        goal = rng.normal(size=5)
        clean = 1 + sum(a > 3 for a in hist)  # 1..5
        action = clean if (goal > -1).all() else int(rng.integers(1, 6))
        steps.append(RelabeledStep(hist, 1, action, goal))
    return steps


def test_goal_sensitivity():
    cfg = tiny_config(d=5, batch_size=64, learning_rate=5e-3, max_epochs=40, item_embed_dim=16, goal_embed_dim=16, timestep_embed_dim=16, encoder_width=16, mlp_hidden_sizes=(32,))
    tr, va = sequence_denoise_steps(4000, 0), sequence_denoise_steps(500, 1)
    model = build_model(cfg, tr)
    train(model, tr, va)
    rng = np.random.default_rng(2)
    tvs = []
    for _ in range(50):
        hist = tuple(int(a) for a in rng.integers(1, 6, size=4))
        high = predict(model, hist, 1, np.full(5, 1.0))
        low = predict(model, hist, 1, np.full(5, -2.0))
        tvs.append(0.5 * np.abs(high - low).sum())
    assert np.mean(tvs) > 0.05
