import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egoforecast import nn
from egoforecast.errors import LengthMismatch, NoPairs, ShapeMismatch
from egoforecast.geometry import GridSpec, LabelImage, PlayerState, label_distance
from egoforecast.retrieval import (
    EmbedTrainConfig,
    EmbeddingParams,
    Exemplar,
    ExemplarDatabase,
    PairSet,
    Trajectory,
    best_threshold,
    contrastive_loss,
    embed,
    embed_database,
    label_input,
    make_pairs,
    medoidshift_cluster,
    retrieve,
    train_embedding,
    trajectory_distances,
)
from oracles import contrastive_loop, medoids_k2

GRID = GridSpec(n_rows=32, n_cols=64)


def label(hsv):
    owner = np.where(hsv[..., 2] > 0, 0, -1)
    return LabelImage(GRID, hsv, owner)


def random_label(rng):
    hsv = np.zeros(GRID.shape + (3,))
    mask = rng.random(GRID.shape) < 0.3
    hsv[mask, 0] = rng.uniform(0, 2 * math.pi, mask.sum())
    hsv[mask, 1] = rng.uniform(0, 1, mask.sum())
    hsv[mask, 2] = 0.9
    return label(hsv)


def block_label(col, hue=1.0):
    hsv = np.zeros(GRID.shape + (3,))
    hsv[8:24, col : col + 10] = (hue, 1.0, 0.9)
    return label(hsv)


def straight(pid, start, direction, T=5, dt=0.5, speed=1.0):
    d = np.asarray(direction, float) / np.linalg.norm(direction)
    P = np.asarray(start, float) + speed * dt * np.arange(T)[:, None] * d
    return Trajectory(pid, 0.0, dt, P, np.tile(d, (T, 1)))


def exemplar(pos, angle, lab, pid=0):
    g = np.array([math.cos(angle), math.sin(angle)])
    st_ = PlayerState(np.asarray(pos, float), g, np.zeros(2), pid)
    return Exemplar(st_, lab, straight(pid, pos, g))


def random_db(rng, n=50, spread=4.0):
    ex = []
    for k in range(n):
        pos = 7.5 + rng.uniform(-spread, spread, 2)
        ex.append(exemplar(pos, rng.uniform(-0.6, 0.6), random_label(rng), k % 6))
    return ExemplarDatabase(ex, GRID)


def separable_db(rng, n=40):
    ex = []
    for k in range(n):
        col = (5 if k % 2 == 0 else 45) + int(rng.integers(-2, 3))
        ex.append(exemplar(7.5 + rng.uniform(-1, 1, 2), rng.uniform(-0.3, 0.3), block_label(col), k % 6))
    return ExemplarDatabase(ex, GRID)


# -------------------------------------------------------------- pairs


def test_make_pairs_matches_exhaustive():
    rng = np.random.default_rng(0)
    db = random_db(rng)
    pairs = make_pairs(db, max_pairs=10**9, max_share=1.0)
    expect_i, expect_l = [], []
    for i in range(len(db)):
        for j in range(i + 1, len(db)):
            a, b = db[i].state, db[j].state
            dg = abs((a.gaze_angle - b.gaze_angle + math.pi) % (2 * math.pi) - math.pi)
            if np.linalg.norm(a.position - b.position) < 3.0 and dg < math.radians(45):
                expect_i.append((i, j))
                expect_l.append(int(label_distance(db[i].label, db[j].label) < pairs.eps_m))
    assert list(zip(pairs.i.tolist(), pairs.j.tolist())) == expect_i
    assert pairs.label.tolist() == expect_l
    assert np.all(pairs.i != pairs.j)


def test_make_pairs_balanced():
    rng = np.random.default_rng(1)
    pairs = make_pairs(random_db(rng))
    share = pairs.label.mean()
    assert 0.4 - 1e-9 <= share <= 0.6 + 1e-9


def test_gate_excludes_far_pair():
    lab = block_label(5)
    db = ExemplarDatabase([exemplar([5.0, 5.0], 0.0, lab), exemplar([5.0, 10.0], 0.0, lab, 1)], GRID)
    with pytest.raises(NoPairs):
        make_pairs(db)


def test_identical_labels_positive():
    lab = block_label(5)
    db = ExemplarDatabase([exemplar([5.0, 5.0], 0.0, lab), exemplar([6.0, 5.0], 0.1, lab, 1)], GRID)
    assert make_pairs(db).label.tolist() == [1]


def test_single_exemplar_no_pairs():
    with pytest.raises(NoPairs):
        make_pairs(ExemplarDatabase([exemplar([5.0, 5.0], 0.0, block_label(5))], GRID))


# -------------------------------------------------------------- embedding + loss


@pytest.fixture(scope="module")
def small():
    rng = np.random.default_rng(2)
    db = random_db(rng, 12)
    X = np.stack([label_input(e.label) for e in db.exemplars])
    params = EmbeddingParams.create(GRID, seed=4)
    pairs = PairSet(
        np.array([0, 1, 2, 3, 4, 5, 6, 7]),
        np.array([1, 2, 3, 4, 5, 6, 7, 8]),
        np.array([1, 0, 1, 0, 0, 1, 0, 1]),
    )
    return db, X, params, pairs


def test_embed_deterministic_and_identical(small):
    db, X, params, _ = small
    a = embed(params, db[0].label)
    assert a.tobytes() == embed(params.copy(), db[0].label).tobytes()
    assert a.shape == (32,) and np.all(np.isfinite(a))
    with pytest.raises(ShapeMismatch):
        embed(EmbeddingParams.create(GridSpec(n_rows=64, n_cols=64)), db[0].label)


def test_contrastive_matches_loop(small):
    db, X, params, pairs = small
    E = embed_database(db, params).embeddings
    for margin in (0.1, 1.0, 3.0):
        loss, _ = contrastive_loss(params, pairs, margin, X, with_grad=False)
        assert loss == pytest.approx(contrastive_loop(E, pairs, margin), abs=1e-12)
        assert loss >= 0


def test_contrastive_gradient_check(small):
    _, X, params, pairs = small
    p = params.copy()
    _, grads = contrastive_loss(p, pairs, 2.0, X)
    rng = np.random.default_rng(0)
    coords = nn.sample_coords(p.params, 100, rng)
    numeric = nn.finite_difference(lambda q: contrastive_loss(p, pairs, 2.0, X, with_grad=False)[0], p.params, coords)
    analytic = np.array([grads[k].reshape(-1)[i] for k, i in coords])
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), 1e-7)
    assert rel.max() < 1e-4


def test_positive_identical_and_inactive_hinge(small):
    _, X, params, _ = small
    same = PairSet(np.array([0]), np.array([1]), np.array([1]))
    X2 = X.copy()
    X2[1] = X2[0]
    loss, grads = contrastive_loss(params, same, 1.0, X2)
    assert loss == 0.0 and all(np.all(g == 0) for g in grads.values())
    neg = PairSet(np.array([0]), np.array([1]), np.array([0]))
    loss, grads = contrastive_loss(params, neg, 1e-6, X)
    assert loss == 0.0 and all(np.all(g == 0) for g in grads.values())
    with pytest.raises(ValueError):
        contrastive_loss(params, neg, 0.0, X)


def test_lr_zero_params_unchanged():
    db = separable_db(np.random.default_rng(3), 12)
    init = EmbeddingParams.create(GRID, seed=0)
    res = train_embedding(db, EmbedTrainConfig(epochs=2, lr=0.0, eps_m=5.0), init)
    for k, v in init.params.items():
        assert res.params.params[k].tobytes() == v.tobytes()


def test_huge_margin_monotone():
    db = separable_db(np.random.default_rng(4), 10)
    res = train_embedding(db, EmbedTrainConfig(epochs=10, margin=100.0, lr=1e-3, eps_m=5.0, holdout=0.1))
    curve = res.loss_curve
    assert all(b < a for a, b in zip(curve, curve[1:]))


def test_separable_training_and_threshold():
    db = separable_db(np.random.default_rng(5))
    res = train_embedding(db, EmbedTrainConfig(epochs=15, eps_m=8.0))
    assert res.accuracy >= 0.95
    train_labels = np.delete(res.pairs.label, res.holdout_idx)
    assert res.train_accuracy >= max(train_labels.mean(), 1 - train_labels.mean())


def test_best_threshold():
    d = np.array([0.1, 0.2, 0.3, 0.9, 1.0])
    l = np.array([1, 1, 1, 0, 0])
    eps, acc = best_threshold(d, l)
    assert acc == 1.0 and 0.3 < eps < 0.9
    eps, acc = best_threshold(np.array([0.5, 0.5]), np.array([1, 0]))
    assert acc == 0.5


# -------------------------------------------------------------- retrieve


def test_retrieve_matches_bruteforce():
    rng = np.random.default_rng(6)
    params = EmbeddingParams.create(GRID, seed=1)
    db = embed_database(random_db(rng, 40), params)
    E = db.embeddings
    for q in range(5):
        query = exemplar(7.5 + rng.uniform(-3, 3, 2), rng.uniform(-0.5, 0.5), random_label(rng), 9).state
        qlab = random_label(rng)
        qe = embed(params, qlab)
        dists = np.linalg.norm(E - qe, axis=1)
        eps = float(np.quantile(dists, 0.7))
        rows = []
        for k, e in enumerate(db.exemplars):
            dg = abs((e.state.gaze_angle - query.gaze_angle + math.pi) % (2 * math.pi) - math.pi)
            if np.linalg.norm(e.state.position - query.position) < 3 and dg < math.radians(45) and dists[k] < eps:
                rows.append((dists[k], k))
        expect = [k for _, k in sorted(rows)][:4]
        got = retrieve(query, qlab, db, params, eps, N=4)
        assert [r.index for r in got] == expect
        for r in got:
            src = db[r.index].trajectory
            np.testing.assert_allclose(r.trajectory.positions[0], query.position, atol=1e-12)
            np.testing.assert_allclose(np.diff(r.trajectory.positions, axis=0), np.diff(src.positions, axis=0), atol=1e-12)
            np.testing.assert_array_equal(r.trajectory.gazes, src.gazes)
            assert r.trajectory.player_id == 9


def test_retrieve_self_first_and_empty_gate():
    rng = np.random.default_rng(7)
    params = EmbeddingParams.create(GRID, seed=1)
    db = embed_database(random_db(rng, 20), params)
    got = retrieve(db[3].state, db[3].label, db, params, np.inf, N=3)
    assert got[0].distance == 0.0 and got[0].index in [k for k in range(20) if np.array_equal(db[k].label.hsv, db[3].label.hsv)]
    far = PlayerState(np.array([14.0, 27.0]), np.array([-1.0, 0.0]), player_id=0)
    assert retrieve(far, db[3].label, db, params, np.inf) == []


# -------------------------------------------------------------- clustering


def bundle(center, direction, offsets, pid0):
    return [straight(pid0 + k, np.asarray(center) + [o, 0.0], direction) for k, o in enumerate(offsets)]


def test_cluster_identical_and_single():
    t = straight(0, [3.0, 3.0], [1.0, 0.0])
    c = medoidshift_cluster([t])
    assert c.medoids == [0] and c.assignment.tolist() == [0]
    c = medoidshift_cluster([t, t, t])
    assert len(c.medoids) == 1 and set(c.assignment.tolist()) == {0}


def test_two_bundles_match_k2_oracle():
    trajs = bundle([2.0, 2.0], [0, 1], [-0.2, -0.1, 0.0, 0.1, 0.2], 0) + bundle([12.0, 2.0], [0, 1], [-0.2, -0.1, 0.0, 0.1, 0.2], 5)
    c = medoidshift_cluster(trajs, sigma=1.0)
    assert len(c.medoids) == 2
    assert tuple(c.medoids) == medoids_k2(trajectory_distances(trajs))
    assert c.assignment.tolist() == [0] * 5 + [1] * 5


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12), st.floats(0.3, 4.0))
def test_cluster_idempotent(seed, n, sigma):
    rng = np.random.default_rng(seed)
    trajs = [straight(k, rng.uniform(2, 12, 2), rng.normal(size=2) + 1e-3) for k in range(n)]
    c = medoidshift_cluster(trajs, sigma=sigma)
    assert len(c.assignment) == n and set(c.assignment.tolist()) == set(range(len(c.medoids)))
    again = medoidshift_cluster(c.trajectories, sigma=sigma)
    assert again.medoids == list(range(len(c.medoids)))


def test_cluster_length_mismatch():
    with pytest.raises(LengthMismatch):
        medoidshift_cluster([straight(0, [1, 1], [1, 0], T=3), straight(1, [1, 1], [1, 0], T=4)])
    with pytest.raises(LengthMismatch):
        medoidshift_cluster([])
