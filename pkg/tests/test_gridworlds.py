import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clover.gridworlds import (ACTIONS, N_ACTIONS, STAY, ConfigError, ContractError, GameConfig, GameState,
                               GridGame)

UP, DOWN, LEFT, RIGHT = (ACTIONS.index(a) for a in ("up", "down", "left", "right"))


def pp_state(agents, prey, obstacles=(), arrived=None, t=0):
    arrived = arrived if arrived is not None else tuple(a == prey for a in agents)
    return GameState(agents=tuple(agents), obstacles=frozenset(obstacles), prey=prey, arrived=arrived, t=t)


def lj_state(agents, trees, obstacles=()):
    return GameState(agents=tuple(agents), obstacles=frozenset(obstacles), trees=tuple(trees),
                     alive=(True,) * len(trees), observed=(False,) * len(trees))


def test_reset_distinct_cells_and_determinism():
    game = GridGame(GameConfig(game="pp", grid=7, agents=3, obstacles=1))
    s1, o1, g1 = game.reset(np.random.default_rng(9))
    s2, o2, g2 = game.reset(np.random.default_rng(9))
    cells = list(s1.agents) + [s1.prey] + list(s1.obstacles)
    assert len(set(cells)) == 5
    assert s1 == s2 and np.array_equal(o1, o2) and np.array_equal(g1, g2)
    assert not set(s1.agents) & s1.obstacles


def test_reset_capacity_error():
    game = GridGame(GameConfig(game="pp", grid=7, agents=49))
    with pytest.raises(ConfigError):
        game.reset(np.random.default_rng(0))


def test_config_validation():
    for bad in (dict(grid=2), dict(agents=0), dict(k_choppers=0), dict(max_steps=0), dict(game="xx"),
                dict(game="lj", trees=0)):
        with pytest.raises(ConfigError):
            GameConfig(**bad)


def test_all_stay_pp():
    game = GridGame(GameConfig(game="pp", grid=5, agents=2))
    s = pp_state([(0, 0), (4, 4)], (2, 2))
    nxt, _, _, r, done = game.step(s, [STAY, STAY])
    assert nxt.agents == s.agents and r == pytest.approx(-0.1) and not done


def test_blocked_moves():
    game = GridGame(GameConfig(game="pp", grid=5, agents=1))
    s = pp_state([(1, 1)], (4, 4), obstacles={(2, 1)})
    assert game.step(s, [RIGHT])[0].agents == ((1, 1),)
    assert game.step(s, [UP])[0].agents == ((1, 0),)
    corner = pp_state([(0, 0)], (4, 4))
    assert game.step(corner, [LEFT])[0].agents == ((0, 0),)
    assert game.step(corner, [UP])[0].agents == ((0, 0),)


def test_arrival_freeze_and_termination():
    game = GridGame(GameConfig(game="pp", grid=5, agents=2))
    s = pp_state([(1, 2), (4, 4)], (2, 2))
    s, _, _, _, done = game.step(s, [RIGHT, STAY])
    assert s.arrived == (True, False) and not done
    s, _, _, _, _ = game.step(s, [LEFT, LEFT])              # arrived agent ignores actions
    assert s.agents[0] == (2, 2)
    with pytest.raises(ContractError):
        game.step(s, [0, 9])
    with pytest.raises(ContractError):
        game.step(s, [0])


def test_step_cap():
    game = GridGame(GameConfig(game="pp", grid=5, agents=1, max_steps=3))
    s = pp_state([(0, 0)], (4, 4))
    for k in range(3):
        s, _, _, _, done = game.step(s, [STAY])
    assert done and s.t == 3 and not game.is_terminal(s)
    with pytest.raises(ContractError):
        game.step(s, [STAY])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_pp_return_equals_step_penalty_times_length(seed):
    rng = np.random.default_rng(seed)
    game = GridGame(GameConfig(game="pp", grid=5, agents=2, obstacles=1, barrier_length=2, max_steps=60))
    s, _, _ = game.reset(rng)
    total, done = 0.0, False
    while not done:
        s, _, _, r, done = game.step(s, rng.integers(N_ACTIONS, size=2))
        total += r
    assert total == pytest.approx(-0.1 * s.t, abs=1e-9)


def test_lj_two_adjacent_agents_fell_tree():
    game = GridGame(GameConfig(game="lj", grid=5, agents=2, trees=2, k_choppers=2))
    s = lj_state([(1, 2), (3, 1)], [(2, 2), (4, 4)])
    nxt, _, _, r, _ = game.step(s, [STAY, DOWN])           # (3,2) is next to (2,2)
    assert nxt.alive == (False, True)
    assert r == pytest.approx(-0.1 + 0.5 + 0.05)


def test_lj_one_agent_is_not_enough_and_observation_bonus_once():
    game = GridGame(GameConfig(game="lj", grid=5, agents=2, trees=1, k_choppers=2))
    s = lj_state([(1, 2), (4, 4)], [(2, 2)])
    s, _, _, r1, _ = game.step(s, [STAY, STAY])
    s, _, _, r2, _ = game.step(s, [STAY, STAY])
    assert s.alive == (True,) and s.observed == (True,)
    assert r1 == pytest.approx(-0.05) and r2 == pytest.approx(-0.1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_lj_chop_total_when_finished(seed):
    rng = np.random.default_rng(seed)
    cfg = GameConfig(game="lj", grid=4, agents=3, trees=2, k_choppers=2, max_steps=400)
    game = GridGame(cfg)
    s, _, _ = game.reset(rng)
    chop = 0.0
    done = False
    while not done:
        prev = s.alive
        s, _, _, r, done = game.step(s, rng.integers(N_ACTIONS, size=3))
        chop += 0.5 * (sum(prev) - sum(s.alive))
        assert all(not (not a and b) for a, b in zip(prev, s.alive))     # felled stays felled
    if game.is_terminal(s):
        assert chop == pytest.approx(0.5 * cfg.trees)


def test_observation_target_features():
    game = GridGame(GameConfig(game="pp", grid=5, agents=2))
    far = game.observe(pp_state([(0, 0), (4, 4)], (2, 2)), 0)
    assert far[2] == far[3] == far[4] == 0
    on = game.observe(pp_state([(2, 2), (4, 4)], (2, 2)), 0)
    assert (on[2], on[3], on[4]) == (0, 0, 1)
    near = game.observe(pp_state([(1, 1), (4, 4)], (2, 2)), 0)
    assert (near[2], near[3], near[4]) == (1, 1, 1)


def test_observation_layout_and_length():
    cfg = GameConfig(game="lj", grid=5, agents=3, trees=2)
    game = GridGame(cfg)
    s, obs, g = game.reset(np.random.default_rng(0))
    assert obs.shape == (3, game.obs_dim) and g.shape == (game.state_dim,)
    for t in range(10):
        s, obs, g, _, done = game.step(s, [t % 5] * 3)
        assert obs.shape == (3, game.obs_dim) and g.shape == (game.state_dim,)
        if done:
            break
    # agent id one-hot sits after position (2), target (3) and occupancy (9)
    assert np.array_equal(obs[:, 14:17], np.eye(3))


def test_step_is_pure():
    game = GridGame(GameConfig(game="pp", grid=5, agents=2))
    s = pp_state([(0, 0), (4, 4)], (2, 2))
    a = game.step(s, [RIGHT, UP])
    b = game.step(s, [RIGHT, UP])
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def test_radio_obstacles_include_live_trees():
    game = GridGame(GameConfig(game="lj", grid=5, agents=2, trees=1))
    s = lj_state([(0, 0), (4, 4)], [(2, 2)], obstacles={(1, 4)})
    assert game.radio_obstacles(s) == frozenset({(1, 4), (2, 2)})
