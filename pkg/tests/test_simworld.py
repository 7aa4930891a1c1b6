import math

import numpy as np
import pytest

from egoforecast.compatibility import compatibility
from egoforecast.errors import HorizonExceedsData, InvalidConfig
from egoforecast.formation import FrameState
from egoforecast.geometry import GridSpec, PlayerState, triangulate_attention
from egoforecast.simworld import HARD_FLOOR, ScenarioConfig, build_exemplar_db, generate, label_for

GRID = GridSpec(n_rows=64, n_cols=128)


def test_single_player_static_attention():
    sc = generate(ScenarioConfig(n_players=1, seconds=20, attention_model="static", seed=1))
    s = sc.frames[0].attention
    d = [np.linalg.norm(f.positions[0] - s) for f in sc.frames]
    assert d[-1] < 0.05 and d[-1] < d[0]
    for f in sc.frames:
        if np.linalg.norm(f.positions[0] - s) > 1e-9:
            assert compatibility(s, [(p.position, p.gaze) for p in f.players]) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("model", ["waypoint", "piecewise"])
def test_noise_free_gaze_and_triangulation(model):
    sc = generate(ScenarioConfig(seconds=15, attention_model=model, seed=2))
    for f in sc.frames:
        assert compatibility(f.attention, [(p.position, p.gaze) for p in f.players]) == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(triangulate_attention(f.players).point, f.attention, atol=1e-6)


def test_deterministic():
    a = generate(ScenarioConfig(seconds=10, gaze_noise_deg=5, seed=3))
    b = generate(ScenarioConfig(seconds=10, gaze_noise_deg=5, seed=3))
    for fa, fb in zip(a.frames, b.frames):
        assert fa.positions.tobytes() == fb.positions.tobytes()
        assert np.array([p.gaze for p in fa.players]).tobytes() == np.array([p.gaze for p in fb.players]).tobytes()
        assert fa.attention.tobytes() == fb.attention.tobytes()
    c = generate(ScenarioConfig(seconds=10, gaze_noise_deg=5, seed=4))
    assert a.frames[-1].positions.tobytes() != c.frames[-1].positions.tobytes()


@pytest.mark.parametrize("seed", range(4))
def test_spacing_floor_and_speed(seed):
    cfg = ScenarioConfig(n_players=10, seconds=30, formation_radius=1.0, seed=seed)
    sc = generate(cfg)
    for f in sc.frames:
        P = f.positions
        d = np.linalg.norm(P[:, None] - P[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        assert d.min() >= HARD_FLOOR
        assert np.linalg.norm(f.velocities, axis=1).max() <= cfg.v_max + 1e-9


def test_velocities_are_finite_differences():
    sc = generate(ScenarioConfig(seconds=5, seed=5))
    F = sc.frames
    for a, b in zip(F, F[1:]):
        np.testing.assert_allclose(b.velocities, (b.positions - a.positions) / 0.5, atol=1e-12)
    assert len(F) == ScenarioConfig(seconds=5).n_frames == 11


def test_attention_speed_bounded():
    sc = generate(ScenarioConfig(seconds=60, seed=6))
    speed = np.linalg.norm(np.diff(sc.attention, axis=0), axis=1) / 0.5
    assert speed.max() <= 6.0 + 1e-9


def test_invalid_configs():
    for bad in (dict(n_players=0), dict(dt=0.0), dict(gaze_noise_deg=-1), dict(attention_model="spline"), dict(attention_speed=7.0)):
        with pytest.raises(InvalidConfig):
            generate(ScenarioConfig(**bad))


def two_facing(distance):
    a = PlayerState(np.array([5.0, 10.0]), np.array([0.0, 1.0]), player_id=0)
    b = PlayerState(np.array([5.0, 10.0 + distance]), np.array([0.0, -1.0]), player_id=1)
    return FrameState(0.0, [a, b])


def test_facing_players_hue_pi():
    frames = [two_facing(3.0)] * 3
    db = build_exemplar_db(frames, 2, grid=GRID)
    assert len(db) == 2
    for e in db.exemplars:
        fg = e.label.foreground
        assert fg.any() and set(np.unique(e.label.owner[fg]).tolist()) == {1 - e.state.player_id}
        np.testing.assert_allclose(e.label.hsv[fg, 0], math.pi, atol=1e-12)
        assert len(e.trajectory) == 3
        np.testing.assert_array_equal(e.trajectory.positions[0], e.state.position)


def test_empty_field_of_view():
    a = PlayerState(np.array([5.0, 10.0]), np.array([0.0, 1.0]), player_id=0)
    b = PlayerState(np.array([5.0, 6.0]), np.array([0.0, 1.0]), player_id=1)
    lab = label_for(FrameState(0.0, [a, b]), 0, grid=GRID)
    assert not lab.foreground.any() and np.all(lab.hsv == 0)


def test_silhouette_shrinks_with_distance():
    near = label_for(two_facing(2.0), 0, grid=GRID).foreground.sum()
    far = label_for(two_facing(8.0), 0, grid=GRID).foreground.sum()
    assert near > far > 0


def test_horizon_exceeds_data():
    frames = [two_facing(3.0)] * 3
    with pytest.raises(HorizonExceedsData):
        build_exemplar_db(frames, 3, grid=GRID)
