import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avchase import gridworld as gw
from avchase.gridworld import Action, EnvParams, NavGraph, Pose

from oracles import depth_ray_march, floyd_warshall


def corridor(n):
    return NavGraph(np.ones((1, n), dtype=bool)) if n > 0 else None


def open_grid(h, w):
    return NavGraph(np.ones((h, w), dtype=bool))


def quiet_params(**kw):
    base = dict(noise_std=0.0)
    base.update(kw)
    return EnvParams(**base)


def make_state(graph, robot, heading, source_cell, dest=None, params=None):
    """Hand-placed episode, bypassing reset's random placement."""
    st, _ = gw.reset(graph, 0, 0, gw.make_signatures()[0], params or quiet_params())
    st.robot = Pose(robot, heading)
    st.start_robot = st.robot
    dest = dest if dest is not None else source_cell
    path = gw.bfs_shortest_path(graph, source_cell, dest)
    st.source = gw.SourceState(source_cell, dest, path, 0)
    st.start_source_cell = source_cell
    st.prev_manhattan = graph.manhattan(robot, source_cell)
    return st


# ---------------------------------------------------------------- generation

def test_zero_density_all_free():
    g = gw.generate_grid(1, 5, 5, 0.0)
    assert g.traversable.all() and g.traversable.size == 25


def test_dense_small_grid_connected():
    g = gw.generate_grid(1, 3, 3, 0.4)
    assert g.traversable.sum() >= 6
    free = g.free_nodes
    assert all(g.distance(free[0], v) >= 0 for v in free)


def test_generation_deterministic():
    a = gw.generate_grid(42, 9, 7, 0.3)
    b = gw.generate_grid(42, 9, 7, 0.3)
    np.testing.assert_array_equal(a.traversable, b.traversable)


@pytest.mark.parametrize("bad", [-0.1, 0.41, 0.9])
def test_density_rejected(bad):
    with pytest.raises(ValueError):
        gw.generate_grid(0, 5, 5, bad)


def test_tiny_grid_rejected():
    with pytest.raises(ValueError):
        gw.generate_grid(0, 2, 5, 0.1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 10), st.integers(3, 10), st.floats(0, 0.4))
def test_generated_graph_connected_and_symmetric(seed, w, h, density):
    g = gw.generate_grid(seed, w, h, density)
    free = g.free_nodes
    assert len(free) >= 2
    assert np.all(g.distances[np.ix_(free, free)] >= 0)
    for u in free:
        nbrs = g.neighbors(u)
        assert nbrs
        for v in nbrs:
            assert u in g.neighbors(v)


# ---------------------------------------------------------------- shortest paths

def test_corridor_path():
    g = corridor(4)
    assert gw.bfs_shortest_path(g, 0, 3) == [0, 1, 2, 3]
    assert gw.bfs_shortest_path(g, 2, 2) == [2]


def test_bfs_tie_break_north_first():
    g = open_grid(3, 3)
    # centre -> top-left: N then W beats W then N
    assert gw.bfs_shortest_path(g, 4, 0) == [4, 1, 0]


def test_bfs_non_traversable_endpoint():
    g = NavGraph.from_ascii("..#\n...")
    with pytest.raises(ValueError):
        gw.bfs_shortest_path(g, 0, 2)


def test_bfs_unreachable_returns_none():
    g = NavGraph.from_ascii(".#.")
    assert gw.bfs_shortest_path(g, 0, 2) is None


def test_bfs_matches_floyd_warshall_random_grids():
    rng = np.random.default_rng(0)
    for trial in range(10):
        free = rng.random((6, 7)) > 0.3
        g = NavGraph(free)
        fw = floyd_warshall(free)
        for a in g.free_nodes:
            for b in g.free_nodes:
                path = gw.bfs_shortest_path(g, int(a), int(b))
                if fw[a][b] == math.inf:
                    assert path is None
                else:
                    assert len(path) - 1 == fw[a][b]
                    for u, v in zip(path, path[1:]):
                        assert v in g.neighbors(u)


def test_min_action_count():
    g = open_grid(3, 3)
    # facing north at bottom centre, target top centre: two moves
    assert gw.min_action_count(g, 7, 0, 1) == 2
    # facing south: turn twice then two moves
    assert gw.min_action_count(g, 7, 2, 1) == 4
    assert gw.min_action_count(g, 4, 1, 4) == 0


# ---------------------------------------------------------------- reset

def test_reset_two_cell_corridor():
    g = corridor(2)
    st, obs = gw.reset(g, 3, 5, gw.make_signatures()[5])
    assert {st.robot.cell, st.source.cell} == {0, 1}
    assert st.step_count == 0 and not st.done
    assert obs.depth.shape == (16, 16) and obs.audio.shape == (2, 16)


def test_reset_deterministic():
    g = gw.generate_grid(2, 7, 7, 0.2)
    spec = gw.make_signatures()[0]
    a, oa = gw.reset(g, 99, 0, spec)
    b, ob = gw.reset(g, 99, 0, spec)
    assert (a.robot, a.source.cell, a.source.destination) == (b.robot, b.source.cell, b.source.destination)
    np.testing.assert_array_equal(oa.audio, ob.audio)


def test_reset_needs_two_cells():
    g = NavGraph.from_ascii("#.#")
    with pytest.raises(ValueError):
        gw.reset(g, 0, 0, gw.make_signatures()[0])


def test_reset_invariants():
    g = gw.generate_grid(4, 8, 8, 0.25)
    spec = gw.make_signatures()[0]
    for seed in range(50):
        st, _ = gw.reset(g, seed, 0, spec)
        assert st.robot.cell != st.source.cell
        assert st.source.destination != st.source.cell
        assert st.source.planned_path[0] == st.source.cell
        assert st.source.planned_path[-1] == st.source.destination
        assert st.prev_manhattan == g.manhattan(st.robot.cell, st.source.cell)


def test_reset_start_distribution_uniform():
    g = gw.generate_grid(0, 9, 9, 0.15)
    spec = gw.make_signatures()[0]
    n_free = len(g.free_nodes)
    counts = dict.fromkeys(g.free_nodes.tolist(), 0)
    trials = 10_000
    for seed in range(trials):
        st, _ = gw.reset(g, seed, 0, spec, quiet_params())
        counts[st.robot.cell] += 1
    p = 1.0 / n_free
    sigma = math.sqrt(trials * p * (1 - p))
    for c in counts.values():
        assert abs(c - trials * p) <= 3 * sigma + 1


# ---------------------------------------------------------------- source protocol

def test_source_forced_move():
    g = open_grid(3, 3)
    st = make_state(g, 0, 1, 6, dest=2)
    expected = st.source.planned_path[1]
    gw.source_tick(st, draw=0.1)
    assert st.source.cell == expected


def test_source_forced_stay():
    g = open_grid(3, 3)
    st = make_state(g, 0, 1, 6, dest=2)
    gw.source_tick(st, draw=0.3)
    assert st.source.cell == 6


def test_source_at_destination_picks_new_one():
    g = open_grid(4, 4)
    st = make_state(g, 0, 1, 10, dest=10)
    gw.source_tick(st, draw=0.0)
    src = st.source
    assert src.cell in g.neighbors(10)
    assert src.destination != src.cell
    assert src.planned_path[0] == src.cell and src.planned_path[-1] == src.destination
    assert len(src.planned_path) - 1 == g.distance(src.cell, src.destination)


def test_source_move_frequency_and_legality():
    g = gw.generate_grid(3, 9, 9, 0.15)
    st, _ = gw.reset(g, 11, 0, gw.make_signatures()[0])
    moves = 0
    for _ in range(10_000):
        before = st.source.cell
        gw.source_tick(st)
        if st.source.cell != before:
            moves += 1
            assert st.source.cell in g.neighbors(before)
        assert g.distance(st.source.cell, st.source.destination) > 0
        assert len(st.source.planned_path) - 1 == g.distance(st.source.cell, st.source.destination)
    assert 0.28 <= moves / 10_000 <= 0.32


# ---------------------------------------------------------------- step / reward

def test_move_closer_reward():
    g = NavGraph(np.ones((1, 5), dtype=bool))
    st = make_state(g, 0, 1, 4, dest=4, params=quiet_params(move_prob=0.0))
    _, _, r, done, _ = gw.step(st, Action.MOVE_FORWARD)
    assert r == pytest.approx(0.24, abs=1e-12) and not done
    assert st.robot.cell == 1 and st.path_length == 1


def test_catch_reward():
    g = NavGraph(np.ones((1, 3), dtype=bool))
    st = make_state(g, 0, 1, 1, dest=2, params=quiet_params(move_prob=0.0))
    _, _, r, done, info = gw.step(st, Action.MOVE_FORWARD)
    assert r == pytest.approx(10.24, abs=1e-12)
    assert done and st.success and info["success"]
    assert info["summary"].final_distance == 0


def test_turn_penalty_only():
    g = open_grid(3, 3)
    st = make_state(g, 4, 0, 8, params=quiet_params(move_prob=0.0))
    _, _, r, done, _ = gw.step(st, Action.TURN_LEFT)
    assert r == pytest.approx(-0.01, abs=1e-12) and not done
    assert st.robot.heading == 3
    gw.step(st, Action.TURN_RIGHT)
    gw.step(st, Action.TURN_RIGHT)
    assert st.robot.heading == 1


def test_move_into_wall_is_noop():
    g = NavGraph.from_ascii("..\n#.")
    st = make_state(g, 0, 2, 3, params=quiet_params(move_prob=0.0))
    gw.step(st, Action.MOVE_FORWARD)
    assert st.robot.cell == 0 and st.path_length == 0


def test_stop_off_target_fails():
    g = open_grid(3, 3)
    st = make_state(g, 0, 1, 8, params=quiet_params(move_prob=1.0))
    _, _, r, done, info = gw.step(st, Action.STOP)
    assert done and not st.success
    assert st.source.cell == 8  # terminal step: source does not move
    assert r == pytest.approx(-0.01, abs=1e-12)
    with pytest.raises(gw.EpisodeDone):
        gw.step(st, Action.TURN_LEFT)


def test_source_walks_into_robot():
    g = NavGraph(np.ones((1, 3), dtype=bool))
    st = make_state(g, 0, 1, 2, dest=0, params=quiet_params(move_prob=1.0))
    _, _, r, done, _ = gw.step(st, Action.TURN_LEFT)  # robot stays, source 2 -> 1
    assert not done and st.source.cell == 1
    _, _, r, done, _ = gw.step(st, Action.TURN_LEFT)  # source 1 -> 0 onto robot
    assert done and st.success
    assert r == pytest.approx(10.24, abs=1e-12)


def test_max_steps_terminates():
    g = open_grid(3, 3)
    st = make_state(g, 0, 1, 8, params=quiet_params(move_prob=0.0, max_steps=3))
    for _ in range(3):
        _, _, _, done, _ = gw.step(st, Action.TURN_LEFT)
    assert done and not st.success and st.step_count == 3


def _rollout(graph, seed, actions):
    st, obs = gw.reset(graph, seed, 0, gw.make_signatures()[0])
    trace = []
    for a in actions:
        if st.done:
            break
        _, obs, r, done, _ = gw.step(st, a)
        trace.append((st.robot, st.source.cell, r, done, obs.depth.tobytes(), obs.audio.tobytes()))
    return trace


REWARDS = {-0.01, 0.24, 9.99, 10.24}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 500), st.lists(st.integers(0, 3), min_size=1, max_size=80))
def test_step_invariants(seed, actions):
    g = gw.generate_grid(seed % 7, 6, 6, 0.2)
    st, _ = gw.reset(g, seed, 0, gw.make_signatures()[0])
    was_done = False
    for a in actions:
        if st.done:
            was_done = True
            break
        src_before = st.source.cell
        _, _, r, done, _ = gw.step(st, a)
        assert any(abs(r - v) < 1e-12 for v in REWARDS)
        assert st.step_count <= st.params.max_steps
        if st.robot.cell == st.source.cell:
            assert done and st.success
        if st.source.cell != src_before:
            assert st.source.cell in g.neighbors(src_before)
    if was_done:
        assert st.done
    # determinism: identical trajectories on a second run
    assert _rollout(g, seed, actions) == _rollout(g, seed, actions)


def test_summary_fields():
    g = NavGraph(np.ones((1, 4), dtype=bool))
    st = make_state(g, 0, 1, 3, dest=3, params=quiet_params(move_prob=0.0))
    for _ in range(3):
        _, _, _, done, info = gw.step(st, Action.MOVE_FORWARD)
    s = info["summary"]
    assert done and s.success
    assert (s.path_length, s.action_count, s.shortest_path_length, s.shortest_action_count) == (3, 3, 3, 3)
    assert (s.final_distance, s.start_distance) == (0, 3)
    assert s.total_reward == pytest.approx(2 * 0.24 + 10.24)


# ---------------------------------------------------------------- depth

def test_depth_wall_ahead():
    g = NavGraph.from_ascii("###\n#.#\n...")
    d = gw.render_depth(g, Pose(4, 0), (4, 16), 8)
    np.testing.assert_allclose(d, 1.0 / 8)
    assert d.shape == (4, 16)


def test_depth_open_field_clamps():
    g = open_grid(30, 30)
    d = gw.render_depth(g, Pose(g.node(15, 15), 1), (16, 16), 8)
    np.testing.assert_array_equal(d, np.ones((16, 16)))


L_ROOM = """
########
#......#
#.####.#
#.#  #.#
#.#  #.#
#......#
########
""".replace(" ", "#")


@pytest.mark.parametrize("cell_rc,heading", [((1, 1), 1), ((1, 1), 2), ((5, 6), 0), ((5, 3), 3),
                                            ((1, 6), 2), ((3, 1), 0)])
def test_depth_matches_ray_march_oracle(cell_rc, heading):
    g = NavGraph.from_ascii(L_ROOM)
    pose = Pose(g.node(*cell_rc), heading)
    got = gw.render_depth(g, pose, (1, 16), 6)[0]
    want = depth_ray_march(g.traversable, cell_rc[0], cell_rc[1], heading, 16, 6)
    np.testing.assert_allclose(got, want, atol=0)


def test_depth_grid_edge_counts_as_wall():
    g = open_grid(3, 3)
    d = gw.render_depth(g, Pose(g.node(0, 1), 0), (1, 8), 4)
    np.testing.assert_allclose(d, 0.25)


# ---------------------------------------------------------------- audio

def test_audio_colocated_symmetric():
    g = open_grid(3, 3)
    spec = gw.make_signatures()[3]
    a = gw.synthesize_binaural(g, Pose(4, 0), 4, spec, 0.0)
    np.testing.assert_allclose(a[0], 0.51 * spec, atol=1e-15)
    np.testing.assert_allclose(a[1], 0.51 * spec, atol=1e-15)


def test_audio_hard_left_gains():
    assert gw.binaural_gains(0, math.pi / 2) == pytest.approx((1.01, 0.01), abs=1e-15)


def test_audio_gains_at_distance_three():
    # independent evaluation: A = 1/4, sin 30deg = 0.5
    want_l = 0.25 * 1.5 / 2 + 0.01
    want_r = 0.25 * 0.5 / 2 + 0.01
    gl, gr = gw.binaural_gains(3, math.radians(30))
    assert gl == pytest.approx(want_l, abs=1e-15)
    assert gr == pytest.approx(want_r, abs=1e-15)


def test_audio_bearing_sides():
    g = open_grid(5, 5)
    c = g.node(2, 2)
    # facing north: west is left (+90deg), east is right (-90deg)
    assert gw.bearing(g, Pose(c, 0), g.node(2, 0)) == pytest.approx(math.pi / 2)
    assert gw.bearing(g, Pose(c, 0), g.node(2, 4)) == pytest.approx(-math.pi / 2)
    assert gw.bearing(g, Pose(c, 1), g.node(0, 2)) == pytest.approx(math.pi / 2)
    spec = gw.make_signatures()[0]
    a = gw.synthesize_binaural(g, Pose(c, 0), g.node(2, 0), spec, 0.0)
    assert a[0].sum() > a[1].sum()


def test_audio_energy_decreases_with_distance():
    g = NavGraph(np.ones((1, 12), dtype=bool))
    spec = gw.make_signatures()[0]
    energies = [gw.synthesize_binaural(g, Pose(0, 1), t, spec, 0.0).sum() for t in range(12)]
    assert all(a > b for a, b in zip(energies, energies[1:]))


def test_audio_noise_nonnegative():
    g = open_grid(4, 4)
    spec = gw.make_signatures()[0]
    a = gw.synthesize_binaural(g, Pose(0, 1), 15, spec, 0.5, np.random.default_rng(0))
    assert np.all(a >= 0) and np.all(np.isfinite(a))


def test_signatures_unit_norm_and_splits():
    s = gw.make_signatures(0, 16)
    assert s.shape == (102, 16) and np.all(s >= 0)
    np.testing.assert_allclose(np.linalg.norm(s, axis=1), 1.0, atol=1e-9)
    sp = gw.default_splits()
    assert [len(sp[k]) for k in ("train", "val", "test")] == [73, 11, 18]
    assert not set(sp["train"]) & set(sp["test"])


def test_ascii_roundtrip():
    g = gw.generate_grid(5, 6, 4, 0.3)
    txt = g.to_ascii(robot=int(g.free_nodes[0]), source=int(g.free_nodes[1]))
    assert txt.count("R") == 1 and txt.count("S") == 1
    back = NavGraph.from_ascii(g.to_ascii())
    np.testing.assert_array_equal(back.traversable, g.traversable)


def test_state_dict_roundtrip_continues_identically():
    g = gw.generate_grid(1, 7, 7, 0.2)
    spec = gw.make_signatures()[0]
    a, _ = gw.reset(g, 5, 0, spec)
    for act in (0, 1, 0, 2, 0):
        gw.step(a, act)
    b = gw.EpisodeState.from_dict(a.to_dict(), g, spec, a.params)
    for act in (0, 0, 1, 0, 2, 0, 0):
        if a.done:
            break
        ra = gw.step(a, act)
        rb = gw.step(b, act)
        assert ra[2] == rb[2] and a.robot == b.robot and a.source.cell == b.source.cell
        np.testing.assert_array_equal(ra[1].audio, rb[1].audio)
