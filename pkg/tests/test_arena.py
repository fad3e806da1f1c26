import itertools

import numpy as np
import pytest

from clover.arena import Arena, AugmentedAction, CommGraph, arena_reset, normalize_rss
from clover.channel import ChannelParams
from clover.gridworlds import ContractError, GameConfig, GameState

PP3 = GameConfig(game="pp", grid=5, agents=3, max_steps=50)

# scripted 3-agent episode: game actions and baseline comm bits per step
SCRIPT_GAME = [(1, 2, 3), (4, 0, 1), (2, 2, 0), (0, 3, 4), (3, 1, 2), (1, 4, 0)]
SCRIPT_COMM = [(1, 0, 1), (0, 1, 1), (1, 1, 0), (0, 0, 1), (1, 0, 0), (1, 1, 1)]


def test_normalize_rss_examples():
    assert normalize_rss(-100.0) == 0.0
    assert normalize_rss(-30.0) == 1.0
    assert normalize_rss(-65.0) == pytest.approx(0.5)
    assert normalize_rss(-140.0) == 0.0 and normalize_rss(0.0) == 1.0
    assert normalize_rss(None) == 0.0


def test_reset_is_edgeless_and_deterministic():
    _, obs1, s1, g1 = arena_reset(PP3, ChannelParams(), np.random.default_rng(3))
    _, obs2, s2, g2 = arena_reset(PP3, ChannelParams(), np.random.default_rng(3))
    assert len(g1) == 0 and g1 == g2
    assert np.array_equal(s1, s2)
    for a, b in zip(obs1, obs2):
        assert np.array_equal(a.full, b.full)
        assert a.inbox == () and not a.wireless.any()


def test_comm_graph_contracts():
    with pytest.raises(ContractError):
        CommGraph(3, frozenset({(1, 1)}))
    with pytest.raises(ContractError):
        CommGraph(2, frozenset({(0, 2)}))
    g = CommGraph(3, frozenset({(0, 2), (1, 2), (2, 0)}))
    assert g.neighbors(2) == (0, 1) and g.neighbors(1) == ()
    assert CommGraph.from_adjacency(g.adjacency()) == g


def test_augmented_action_contract():
    with pytest.raises(ContractError):
        AugmentedAction(5, 0)
    with pytest.raises(ContractError):
        AugmentedAction(0, 2)


def test_step_contract_errors():
    arena = Arena(PP3, ChannelParams(), message_dim=4)
    arena.reset(np.random.default_rng(0))
    joint = [AugmentedAction(0, 0)] * 3
    with pytest.raises(ContractError):
        arena.step(joint, np.zeros((3, 5)), np.random.default_rng(0))
    with pytest.raises(ContractError):
        arena.step(joint[:2], np.zeros((3, 4)), np.random.default_rng(0))


def test_silent_step_gives_empty_graph_and_inboxes():
    arena = Arena(PP3, ChannelParams(), message_dim=4)
    arena.reset(np.random.default_rng(0))
    obs, _, _, _, graph, report = arena.step([AugmentedAction(0, 0)] * 3, np.ones((3, 4)),
                                             np.random.default_rng(1))
    assert len(graph) == 0 and report.slot == {}
    assert all(o.inbox == () and not o.wireless.any() for o in obs)


def test_forced_decode_of_adjacent_neighbour():
    params = ChannelParams(sigma=0.0, window=1, p=1.0)
    arena = Arena(GameConfig(game="pp", grid=5, agents=2), params, message_dim=3)
    arena.reset(np.random.default_rng(0))
    arena.state = GameState(agents=((1, 1), (2, 1)), obstacles=frozenset(), prey=(4, 4), arrived=(False, False))
    msg = np.array([[0.5, -0.25, 1.0], [9.0, 9.0, 9.0]])
    obs, _, _, _, graph, _ = arena.step([AugmentedAction(0, 1), AugmentedAction(0, 0)], msg,
                                        np.random.default_rng(2))
    assert graph.edges == frozenset({(0, 1)})
    (sender, m), = obs[1].inbox
    assert sender == 0 and np.array_equal(m, msg[0])
    assert 0 < obs[1].wireless[0] <= 1 and obs[1].wireless[1] == 0


def test_graph_and_inbox_agree_with_report_and_silent_agents_never_send():
    arena = Arena(GameConfig(game="pp", grid=4, agents=4, max_steps=200), ChannelParams(), message_dim=2)
    rng_env, rng_ch, rng_pol = (np.random.default_rng(k) for k in (0, 1, 2))
    arena.reset(rng_env)
    done = False
    while not done:
        comm = rng_pol.integers(2, size=4)
        joint = [AugmentedAction(int(a), int(c)) for a, c in zip(rng_pol.integers(5, size=4), comm)]
        obs, _, _, done, graph, report = arena.step(joint, rng_pol.normal(size=(4, 2)), rng_ch)
        assert graph == CommGraph.from_report(report)
        assert set(report.slot) == {i for i in range(4) if comm[i]}
        for i, o in enumerate(obs):
            assert sorted(s for s, _ in o.inbox) == list(graph.neighbors(i))
            assert all(0 <= w <= 1 for w in o.wireless)
            assert o.wireless[i] == 0


def _run_script(comm_script, message_dim=4):
    arena = Arena(PP3, ChannelParams(), message_dim=message_dim)
    rng_env, rng_ch = np.random.default_rng(11), np.random.default_rng(12)
    obs, s, graph = arena.reset(rng_env)
    record = [(obs, s, graph)]
    for t, (acts, comm) in enumerate(zip(SCRIPT_GAME, comm_script)):
        joint = [AugmentedAction(a, c) for a, c in zip(acts, comm)]
        msgs = np.arange(3 * message_dim, dtype=float).reshape(3, message_dim) / 7.0 + t
        obs, s, _, done, graph, _ = arena.step(joint, msgs, rng_ch)
        record.append((obs, s, graph))
        if done:
            break
    return record


def _obs_equal(a, b, wireless=True):
    for x, y in zip(a, b):
        if not np.array_equal(x.game, y.game):
            return False
        if wireless:
            if not np.array_equal(x.wireless, y.wireless) or len(x.inbox) != len(y.inbox):
                return False
            if any(s1 != s2 or not np.array_equal(m1, m2) for (s1, m1), (s2, m2) in zip(x.inbox, y.inbox)):
                return False
    return True


def test_causal_alignment_exhaustive_single_toggles():
    base = _run_script(SCRIPT_COMM)
    changed = 0
    for t, i in itertools.product(range(len(SCRIPT_COMM)), range(3)):
        comm = [list(c) for c in SCRIPT_COMM]
        comm[t][i] ^= 1
        alt = _run_script([tuple(c) for c in comm])
        # everything observed up to and including the step-t decision is untouched
        for k in range(t + 1):
            assert _obs_equal(base[k][0], alt[k][0])
            assert np.array_equal(base[k][1], alt[k][1]) and base[k][2] == alt[k][2]
        # game side never depends on comm bits
        for k in range(len(base)):
            assert _obs_equal(base[k][0], alt[k][0], wireless=False)
            assert np.array_equal(base[k][1], alt[k][1])
        changed += not _obs_equal(base[t + 1][0], alt[t + 1][0]) or base[t + 1][2] != alt[t + 1][2]
    assert changed > 0          # toggles do reach the next step


def test_step_after_done_rejected():
    arena = Arena(GameConfig(game="pp", grid=5, agents=1, max_steps=1), ChannelParams(), message_dim=2)
    arena.reset(np.random.default_rng(0))
    arena.step([AugmentedAction(0, 0)], np.zeros((1, 2)), np.random.default_rng(0))
    with pytest.raises(ContractError):
        arena.step([AugmentedAction(0, 0)], np.zeros((1, 2)), np.random.default_rng(0))
