import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egoforecast.errors import NonDivisibleFactor
from egoforecast.formation import (
    FeatureEncoder,
    FrameState,
    cell_index,
    downsample,
    formation_from_arrays,
    formation_image,
    model_input,
    trajectory_velocities,
)
from egoforecast.geometry import Court, PlayerState
from oracles import block_mean_loop

COURT = Court()


def frame(P, V):
    players = [PlayerState(P[k], np.array([1.0, 0.0]), V[k], k) for k in range(len(P))]
    return FrameState(0.0, players)


def test_single_player_center():
    phi = formation_image(frame([COURT.center], [[1.0, 0.0]]))
    assert phi.occupied.sum() == 1
    hsv = phi.hsv()
    i, j = np.argwhere(phi.occupied)[0]
    assert tuple(hsv[i, j]) == (0.0, 1.0, 0.9)
    assert phi.speed_normalized[i, j] == pytest.approx(1 / 9)


def test_cancelling_velocities_angle_zero():
    p = COURT.center
    phi = formation_image(frame([p, p + 0.001], [[1.0, 0.0], [-1.0, 0.0]]))
    assert phi.occupied.sum() == 1
    i, j = np.argwhere(phi.occupied)[0]
    assert phi.speed[i, j] == 0.0 and phi.angle[i, j] == 0.0
    assert phi.hsv()[i, j, 2] == 0.9


def test_matches_scatter_oracle():
    rng = np.random.default_rng(0)
    P = rng.uniform([0, 0], [COURT.width, COURT.length], (10, 2))
    V = rng.normal(size=(10, 2))
    phi = formation_from_arrays(P, V)
    rows, cols = phi.shape
    sums, counts = {}, {}
    for p, v in zip(P, V):
        key = (min(int(p[0] / COURT.width * rows), rows - 1), min(int(p[1] / COURT.length * cols), cols - 1))
        sums[key] = sums.get(key, 0) + v
        counts[key] = counts.get(key, 0) + 1
    assert phi.occupied.sum() == len(sums)
    for key, s in sums.items():
        np.testing.assert_allclose(phi.velocity[key], s / counts[key], atol=1e-15)
    hsv = phi.hsv()
    assert np.all(hsv[phi.occupied, 2] == 0.9) and np.all(hsv[~phi.occupied] == 0)
    assert np.all((phi.angle >= 0) & (phi.angle < 2 * np.pi))


def test_out_of_court_clamped():
    i, j = cell_index([[-1.0, -2.0], [COURT.width + 1, COURT.length + 1]], COURT, (210, 410))
    assert i.tolist() == [0, 209] and j.tolist() == [0, 409]


def test_downsample_rules():
    empty = formation_from_arrays(np.zeros((0, 2)), np.zeros((0, 2)), grid=(10, 10))
    assert not downsample(empty, 5).occupied.any()
    one = formation_from_arrays([[0.1, 0.1]], [[2.0, -1.0]], grid=(10, 10))
    d = downsample(one, 2)
    assert d.occupied.sum() == 1
    np.testing.assert_array_equal(d.velocity[0, 0], [2.0, -1.0])
    with pytest.raises(NonDivisibleFactor):
        downsample(one, 3)


def test_downsample_matches_block_loop():
    rng = np.random.default_rng(1)
    P = rng.uniform([0, 0], [COURT.width, COURT.length], (40, 2))
    V = rng.normal(size=(40, 2))
    phi = formation_from_arrays(P, V, grid=(30, 60))
    d = downsample(phi, 5)
    occ, vel = block_mean_loop(phi.occupied, phi.velocity, 5)
    np.testing.assert_array_equal(d.occupied, occ)
    np.testing.assert_allclose(d.velocity, vel, atol=1e-14)


def test_encoder_matches_dense_path():
    rng = np.random.default_rng(2)
    enc = FeatureEncoder()
    for _ in range(5):
        P = rng.uniform([0, 0], [COURT.width, COURT.length], (8, 2))
        P[1] = P[0] + 0.01  # share a fine cell
        V = rng.normal(size=(8, 2))
        dense = model_input(downsample(formation_from_arrays(P, V), 5))
        np.testing.assert_allclose(enc.encode(P, V), dense, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_occupancy_bounded_and_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    P = rng.uniform([0, 0], [COURT.width, COURT.length], (n, 2))
    V = rng.normal(size=(n, 2))
    a = formation_from_arrays(P, V)
    perm = rng.permutation(n)
    b = formation_from_arrays(P[perm], V[perm])
    assert a.occupied.sum() <= n
    np.testing.assert_array_equal(a.occupied, b.occupied)
    np.testing.assert_allclose(a.velocity, b.velocity, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(-20, 20), st.integers(-20, 20))
def test_translation_by_whole_cells(seed, ki, kj):
    rng = np.random.default_rng(seed)
    rows, cols = 210, 410
    cw, cl = COURT.width / rows, COURT.length / cols
    # cell centers away from the border so shifted players stay inside
    ci = rng.integers(25, rows - 25, 5)
    cj = rng.integers(25, cols - 25, 5)
    P = np.stack([(ci + 0.5) * cw, (cj + 0.5) * cl], axis=1)
    V = rng.normal(size=(5, 2))
    a = formation_from_arrays(P, V)
    b = formation_from_arrays(P + [ki * cw, kj * cl], V)
    np.testing.assert_array_equal(np.roll(a.occupied, (ki, kj), axis=(0, 1)), b.occupied)


def test_trajectory_velocities():
    P = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 2.0]])
    v = trajectory_velocities(P, 0.5)
    np.testing.assert_allclose(v, [[2, 0], [2, 0], [0, 4]])


def test_frame_ids_unique():
    p = PlayerState(np.array([1.0, 1.0]), np.array([1.0, 0.0]), player_id=1)
    with pytest.raises(ValueError):
        FrameState(0.0, [p, p])
