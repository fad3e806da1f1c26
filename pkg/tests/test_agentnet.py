import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clover import autodiff as ad
from clover.agentnet import AgentNet, AgentNetConfig, greedy_flat, select_action
from conftest import check_param_grads

SMALL = AgentNetConfig(obs_dim=6, wireless_dim=3, n_actions=5, message_dim=4, hidden=7, branch=5)


def build(cfg=SMALL, seed=0):
    net = AgentNet(cfg)
    store = ad.ParamStore()
    net.init_params(store, np.random.default_rng(seed))
    return net, store


def lookup_encoder(k=4):
    """Encoder weights with one hidden unit per symbol of a one-hot alphabet."""
    net, store = build(AgentNetConfig(obs_dim=2, wireless_dim=2, n_actions=5, message_dim=k, hidden=k, branch=2))
    store.online["agent.enc1.w"].value = np.eye(k)
    store.online["agent.enc1.b"].value = np.zeros((k, 1))
    store.online["agent.enc2.w"].value = np.eye(k)
    store.online["agent.enc2.b"].value = np.zeros((k, 1))
    return net, store.online


def test_lookup_encoder_gives_multiplicities_and_is_injective():
    net, p = lookup_encoder()
    alphabet = list(np.eye(4))
    seen = {}
    for size in range(4):
        for combo in itertools.combinations_with_replacement(range(4), size):
            phi = net.encode_inbox(p, [alphabet[c] for c in combo]).value[:, 0]
            assert np.array_equal(phi, np.bincount(combo, minlength=4).astype(float))
            seen[tuple(phi)] = combo
    assert len(seen) == 35          # 1 + 4 + 10 + 20 multisets, empty one included


def test_encoder_permutation_invariance_bit_exact(rng):
    net, store = build()
    msgs = [rng.normal(size=4) for _ in range(4)]
    pairs = list(enumerate(msgs))
    ref = net.encode_inbox(store.online, pairs).value
    ref_bare = net.encode_inbox(store.online, msgs).value
    for perm in itertools.permutations(range(4)):
        assert np.array_equal(net.encode_inbox(store.online, [pairs[k] for k in perm]).value, ref)
        assert np.array_equal(net.encode_inbox(store.online, [msgs[k] for k in perm]).value, ref_bare)


def test_empty_inbox_and_width_check():
    net, store = build()
    assert not net.encode_inbox(store.online, []).value.any()
    assert net.encode_inbox(store.online, []).shape == (7, 1)
    with pytest.raises(ad.ShapeError):
        net.encode_inbox(store.online, [np.zeros(3)])


def test_fuse_width_and_determinism(rng):
    net, store = build(AgentNetConfig(obs_dim=6, wireless_dim=3, n_actions=5))
    o, w = ad.const(rng.normal(size=(6, 1))), ad.const(rng.random((3, 1)))
    e1, e2 = net.fuse(store.online, o, w), net.fuse(store.online, o, w)
    assert e1.shape == (128, 1) and np.array_equal(e1.value, e2.value)
    with pytest.raises(ad.ShapeError):
        net.fuse(store.online, ad.const(np.zeros((5, 1))), w)


def test_fuse_gradient_matches_finite_differences(rng):
    net, store = build()
    o, w = ad.const(rng.normal(size=(6, 2))), ad.const(rng.random((3, 2)))
    params = {k: store.online[f"agent.{k}.w"] for k in ("fuse_game", "fuse_wireless", "fuse_merge")}
    check_param_grads(lambda: ad.sum_all(net.fuse(store.online, o, w)), params)


def test_q_forward_shapes_and_message_range(rng):
    net, store = build()
    p = store.online
    e, phi, h0 = (ad.const(rng.normal(size=(7, 1))) for _ in range(3))
    h, q, m = net.q_forward(p, e, phi, ad.const(np.zeros((7, 1))))
    h2, q2, m2 = net.q_forward(p, e, phi, ad.const(np.zeros((7, 1))))
    assert q.shape == (5, 2) and m.shape == (4, 1) and h.shape == (7, 1)
    assert np.array_equal(q.value, q2.value) and np.array_equal(m.value, m2.value)
    assert np.all(np.abs(m.value) < 1)
    with pytest.raises(ad.ShapeError):
        net.q_forward(p, ad.const(np.zeros((6, 1))), phi, h0)


def test_q_forward_full_output_gradient(rng):
    net, store = build()
    p = store.online
    e, phi, h0 = (ad.const(rng.normal(size=(7, 1))) for _ in range(3))
    wq, wm, wh = rng.normal(size=(5, 2)), rng.normal(size=(4, 1)), rng.normal(size=(7, 1))

    def loss():
        h, q, m = net.q_forward(p, e, phi, h0)
        return ad.add(ad.sum_all(ad.multiply(q, ad.const(wq))),
                      ad.add(ad.sum_all(ad.multiply(m, ad.const(wm))), ad.sum_all(ad.multiply(h, ad.const(wh)))))

    check_param_grads(loss, dict(p))


def test_five_step_bptt_gradient(rng):
    net, store = build()
    p = store.online
    T, B = 5, 2
    og = [ad.const(rng.normal(size=(6, B))) for _ in range(T)]
    ow = [ad.const(rng.random((3, B))) for _ in range(T)]
    recv = np.array([[0.0, 1.0], [1.0, 0.0]])
    weights = [rng.normal(size=(10, B)) for _ in range(T)]

    def loss():
        h = ad.const(np.zeros((7, B)))
        msgs = ad.const(np.zeros((4, B)))
        total = None
        for t in range(T):
            h, q, msgs = net.step(p, og[t], ow[t], msgs, recv if t else np.zeros((2, 2)), h)
            term = ad.sum_all(ad.multiply(q, ad.const(weights[t])))
            total = term if total is None else ad.add(total, term)
        return total

    check_param_grads(loss, dict(p))


def test_batched_encode_matches_per_agent_inbox(rng):
    net, store = build()
    p = store.online
    msgs = rng.normal(size=(4, 3))
    recv = np.array([[0, 1, 1], [0, 0, 1], [1, 0, 0]], dtype=float)
    batched = net.encode(p, ad.const(msgs), recv).value
    for i in range(3):
        inbox = [(j, msgs[:, j]) for j in range(3) if recv[j, i]]
        assert np.allclose(batched[:, i], net.encode_inbox(p, inbox).value[:, 0], atol=1e-12)


# ----------------------------------------------------------------- selection

def test_greedy_unique_max():
    q = np.zeros((5, 2))
    q[2, 1] = 1.0
    a = select_action(q, 0.0, np.random.default_rng(0))
    assert (a.game, a.comm) == (2, 1)


def test_greedy_tie_break_lowest_flat_index():
    a = select_action(np.full((5, 2), 0.3), 0.0, np.random.default_rng(0))
    assert (a.game, a.comm) == (0, 0)


def test_uniform_exploration_monte_carlo():
    rng = np.random.default_rng(4)
    n = 100_000
    counts = np.zeros(10)
    q = np.arange(10.0).reshape(5, 2)
    for _ in range(n):
        a = select_action(q, 1.0, rng)
        counts[2 * a.game + a.comm] += 1
    sd = np.sqrt(n * 0.1 * 0.9)
    assert np.all(np.abs(counts - n / 10) < 3 * sd)


def test_epsilon_validation_and_silent_mode():
    with pytest.raises(ValueError):
        select_action(np.zeros((5, 2)), 1.5, np.random.default_rng(0))
    q = np.zeros((5, 2))
    q[1, 1] = 5.0
    q[3, 0] = 1.0
    a = select_action(q, 0.0, np.random.default_rng(0), allow_comm=False)
    assert (a.game, a.comm) == (3, 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_greedy_flat_agrees_with_select_action(seed):
    rng = np.random.default_rng(seed)
    q = rng.integers(-2, 3, size=(10, 3)).astype(float)        # plenty of ties
    flat = greedy_flat(q)
    for b in range(3):
        a = select_action(q[:, b].reshape(5, 2), 0.0, rng)
        assert flat[b] == 2 * a.game + a.comm
