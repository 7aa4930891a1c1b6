import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egoforecast import nn
from egoforecast.attention import (
    AttentionModel,
    AttentionSequence,
    TrainConfig,
    com_mse,
    feed_probability,
    minimum_enclosing_circle,
    predict_cc,
    predict_com,
    predict_lv,
    predict_zv,
    rollout,
    rollout_batch,
    sequence_loss,
    step,
    train,
    windows,
    _Windows,
)
from egoforecast.errors import DegenerateCollinear, EmptyFrame, ShapeMismatch
from egoforecast.formation import FrameState
from egoforecast.geometry import PlayerState, rigid_transform_2d
from egoforecast.simworld import ScenarioConfig, generate
from oracles import mec_bruteforce


def frame_at(P, attention=None):
    players = [PlayerState(np.asarray(p, float), np.array([1.0, 0.0]), np.zeros(2), k) for k, p in enumerate(P)]
    return FrameState(0.0, players, attention)


@pytest.fixture(scope="module")
def data():
    frames = generate(ScenarioConfig(seconds=12, seed=5)).frames
    return windows(frames, 4, 4)


@pytest.fixture(scope="module")
def model():
    m = AttentionModel.create(seed=3)
    m.params["head.w"] *= 10.0
    return m


def rel_err(a, n):
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-7)


# -------------------------------------------------------------- baselines


def test_zv_lv():
    np.testing.assert_array_equal(predict_zv([5, 5], 3), [[5, 5]] * 3)
    assert predict_zv([1, 2], 0).shape == (0, 2)
    np.testing.assert_allclose(predict_lv([0, 0], [1, 0], 1.0, 2), [[1, 0], [2, 0]])
    np.testing.assert_allclose(predict_lv([3, 4], [-1, 2], 0.5, 1), [[2.5, 5]])
    np.testing.assert_array_equal(predict_lv([3, 4], [0, 0], 0.5, 4), predict_zv([3, 4], 4))


def test_com():
    np.testing.assert_allclose(predict_com(frame_at([[0, 0], [2, 0], [1, 3]])), [1, 1])
    np.testing.assert_array_equal(predict_com(frame_at([[4, 7]])), [4, 7])
    rng = np.random.default_rng(0)
    P = rng.uniform(0, 15, (10, 2))
    naive = [sum(p[0] for p in P) / 10, sum(p[1] for p in P) / 10]
    np.testing.assert_allclose(predict_com(frame_at(P)), naive, atol=1e-12)
    with pytest.raises(EmptyFrame):
        predict_com(FrameState(0.0, []))


def test_cc_cases():
    np.testing.assert_allclose(predict_cc(frame_at([[0, 0], [2, 0], [0, 2]])), [1, 1], atol=1e-12)
    np.testing.assert_allclose(predict_cc(frame_at([[0, 0], [4, 0]])), [2, 0], atol=1e-12)
    with pytest.raises(DegenerateCollinear):
        predict_cc(frame_at([[0, 0], [1, 1], [2, 2]]))
    with pytest.raises(DegenerateCollinear):
        predict_cc(frame_at([[1, 1]]))


def test_cc_matches_bruteforce():
    rng = np.random.default_rng(1)
    for _ in range(20):
        P = rng.uniform(0, 15, (8, 2))
        c, r = mec_bruteforce(P)
        np.testing.assert_allclose(predict_cc(frame_at(P)), c, atol=1e-9)
        assert minimum_enclosing_circle(P)[1] == pytest.approx(r, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000), st.floats(-math.pi, math.pi), st.floats(-5, 5), st.floats(-5, 5))
def test_baselines_rigid_and_permutation(seed, angle, tx, ty):
    rng = np.random.default_rng(seed)
    center = np.array([7.5, 14.0])
    P = center + rng.uniform(-5, 5, (6, 2))

    def move(X):
        return rigid_transform_2d(np.asarray(X) - center, angle, center + [tx, ty])

    for fn in (predict_com, predict_cc):
        base = fn(frame_at(P))
        np.testing.assert_allclose(fn(frame_at(move(P))), move(base), atol=1e-9)
        np.testing.assert_allclose(fn(frame_at(P[rng.permutation(6)])), base, atol=1e-9)


# -------------------------------------------------------------- recurrent model


def test_zero_model_is_identity(data):
    m = AttentionModel.zeros()
    enc = m.encoder()
    seq = data[0]
    x = enc.encode(seq.positions[0], seq.velocities[0])
    s, h = step(m, [3.0, 4.0], x)
    assert s.tolist() == [3.0, 4.0]
    traj = rollout(m, [3.0, 4.0], [enc.encode(seq.positions[t], seq.velocities[t]) for t in range(4)], 4)
    assert np.all(traj == [3.0, 4.0])


def test_step_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        step(AttentionModel.zeros(), [1.0, 1.0], np.zeros((40, 80, 5)))


def test_step_deterministic(model, data):
    enc = model.encoder()
    x = enc.encode(data[0].positions[0], data[0].velocities[0])
    a = step(model, [5.0, 9.0], x)
    b = step(AttentionModel(model.config, {k: v.copy() for k, v in model.params.items()}), [5.0, 9.0], x)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_rollout_composition(model, data):
    enc = model.encoder()
    seq = data[1]
    xs = [enc.encode(seq.positions[t], seq.velocities[t]) for t in range(3)]
    s0 = seq.attention[0]
    one = rollout(model, s0, xs, 1)
    np.testing.assert_array_equal(one[0], step(model, s0, xs[0])[0])
    s1, h1 = step(model, s0, xs[0])
    s2, h2 = step(model, s1, xs[1], h1)
    s3, _ = step(model, s2, xs[2], h2)
    np.testing.assert_allclose(rollout(model, s0, xs, 3), [s1, s2, s3], atol=1e-12)
    batch = rollout_batch(model, s0[None], np.array(xs)[None])
    np.testing.assert_allclose(batch[0], [s1, s2, s3], atol=1e-12)
    with pytest.raises(ShapeMismatch):
        rollout(model, s0, xs, 4)


def test_rollout_loss_equals_rollout_error(model, data):
    w = _Windows(data[:3], model.encoder())
    x, S = w.batch(np.arange(3))
    pred = rollout_batch(model, S[:, 0], x, w.steps)
    expect = np.sum((pred - S[:, 1:]) ** 2) / 3
    assert sequence_loss(model, x, S) == pytest.approx(expect, rel=1e-12)


def test_gradient_check(model, data):
    w = _Windows(data[:3], model.encoder())
    x, S = w.batch(np.arange(3))
    rng = np.random.default_rng(0)
    mix = (rng.random((3, w.steps)) < 0.5).astype(float)
    params = {k: v.copy() for k, v in model.params.items()}
    probe = AttentionModel(model.config, params)
    _, grads = sequence_loss(probe, x, S, mix, with_grad=True)
    coords = nn.sample_coords(params, 100, rng)
    numeric = nn.finite_difference(lambda p: sequence_loss(probe, x, S, mix), params, coords)
    analytic = np.array([grads[k].reshape(-1)[i] for k, i in coords])
    assert rel_err(analytic, numeric).max() < 1e-4


def test_feed_probability_schedule():
    assert [feed_probability(e, 10, 0.5) for e in range(5)] == [0.0] * 5
    assert feed_probability(5, 10, 0.5) == 0.0 and feed_probability(9, 10, 0.5) == 1.0
    assert feed_probability(0, 1, 0.0) == 1.0


def test_lr_zero_leaves_params(model, data):
    res = train(model, data[:4], TrainConfig(epochs=2, lr=0.0, batch_size=2))
    for k, v in model.params.items():
        assert res.model.params[k].tobytes() == v.tobytes()


def test_first_epoch_loss_recomputed(model, data):
    subset = data[:4]
    res = train(model, subset, TrainConfig(epochs=1, batch_size=len(subset), keep_best=False))
    w = _Windows(subset, model.encoder())
    x, S = w.batch(np.arange(len(subset)))
    # epoch 0 is teacher-forced and one batch covers the set
    expect = sequence_loss(model, x, S, np.ones((len(subset), w.steps)))
    assert res.loss_curve[0] == pytest.approx(expect, abs=1e-9)
    assert np.all(np.isfinite(np.concatenate([v.ravel() for v in res.model.params.values()])))


def test_train_never_worse(model, data):
    res = train(model, data[:4], TrainConfig(epochs=3, batch_size=2))
    assert res.final_loss <= res.initial_loss
    assert len(res.loss_curve) == 3


def test_constant_target_converges(data):
    const = [
        AttentionSequence(seq.timestamps, np.tile([7.0, 12.0], (len(seq), 1)), seq.positions, seq.velocities)
        for seq in data[:4]
    ]
    res = train(AttentionModel.create(seed=1), const, TrainConfig(epochs=200, batch_size=4))
    w = _Windows(const, res.model.encoder())
    x, S = w.batch(np.arange(len(const)))
    assert sequence_loss(res.model, x, S) / w.steps <= 1e-3


def test_sequence_timestamps_validated():
    with pytest.raises(ValueError):
        AttentionSequence(np.array([0.0, 0.5, 0.7]), np.zeros((3, 2)), np.zeros((3, 1, 2)), np.zeros((3, 1, 2)))


def test_com_mse_zero_when_attention_is_com(data):
    seq = data[0]
    com = AttentionSequence(seq.timestamps, seq.positions.mean(axis=1), seq.positions, seq.velocities)
    assert com_mse([com], 4) == pytest.approx(0.0, abs=1e-24)
