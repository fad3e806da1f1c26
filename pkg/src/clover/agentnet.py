"""Shared per-agent network: observation fuser, additive multiset encoder for
received messages, GRU core with an action-value head and a message head.

The batched functions take one column per agent instance. During training a
column is one agent in one episode of the batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .arena import AugmentedAction
from .autodiff import TapeNode


@dataclass(frozen=True)
class AgentNetConfig:
    obs_dim: int
    wireless_dim: int
    n_actions: int
    message_dim: int = 8
    hidden: int = 128          # fuser output, encoder width and GRU state
    branch: int = 64           # width of the game / wireless fuser branches


class AgentNet:
    def __init__(self, config: AgentNetConfig, prefix: str = "agent"):
        self.cfg = config
        self.prefix = prefix

    @property
    def n_outputs(self) -> int:
        return 2 * self.cfg.n_actions

    def _n(self, name: str) -> str:
        return f"{self.prefix}.{name}"

    def init_params(self, store: ad.ParamStore, rng: np.random.Generator) -> None:
        c = self.cfg
        H = c.hidden
        layers = [
            ("fuse_game", c.branch, c.obs_dim),
            ("fuse_wireless", c.branch, c.wireless_dim),
            ("fuse_merge", H, 2 * c.branch),
            ("enc1", H, c.message_dim),
            ("enc2", H, H),
            ("q", self.n_outputs, H),
            ("msg1", H, H),
            ("msg2", c.message_dim, H),
        ]
        for name, rows, cols in layers:
            store.add_weight(self._n(f"{name}.w"), rows, cols, rng)
            store.add_bias(self._n(f"{name}.b"), rows)
        store.add_weight(self._n("gru.wi"), 3 * H, 2 * H, rng)
        store.add_bias(self._n("gru.bi"), 3 * H)
        store.add_weight(self._n("gru.wh"), 3 * H, H, rng)
        store.add_bias(self._n("gru.bh"), 3 * H)

    def _lin(self, x: TapeNode, p, name: str) -> TapeNode:
        return ad.affine(x, p[self._n(f"{name}.w")], p[self._n(f"{name}.b")])

    # ------------------------------------------------------------ pieces
    def fuse(self, p, o_game: TapeNode, o_wireless: TapeNode) -> TapeNode:
        c = self.cfg
        if o_game.shape[0] != c.obs_dim or o_wireless.shape[0] != c.wireless_dim:
            raise ad.ShapeError(f"fuse: expected inputs of height {c.obs_dim} and {c.wireless_dim}")
        g = ad.elu(self._lin(o_game, p, "fuse_game"))
        w = ad.elu(self._lin(o_wireless, p, "fuse_wireless"))
        return ad.elu(self._lin(ad.concat_rows([g, w]), p, "fuse_merge"))

    def embed_messages(self, p, msgs: TapeNode) -> TapeNode:
        return self._lin(ad.elu(self._lin(msgs, p, "enc1")), p, "enc2")

    def encode(self, p, msgs: TapeNode, recv: np.ndarray) -> TapeNode:
        """Sum of embedded messages over each receiver's decoded senders.

        ``msgs`` has one column per potential sender; ``recv[j, i] = 1`` when
        column ``i`` decoded sender column ``j``.
        """
        if not recv.any():
            return ad.const(np.zeros((self.cfg.hidden, recv.shape[1])))
        return ad.matmul(self.embed_messages(p, msgs), ad.const(recv))

    def core(self, p, e: TapeNode, phi: TapeNode, h_prev: TapeNode) -> TapeNode:
        H = self.cfg.hidden
        gi = ad.affine(ad.concat_rows([e, phi]), p[self._n("gru.wi")], p[self._n("gru.bi")])
        gh = ad.affine(h_prev, p[self._n("gru.wh")], p[self._n("gru.bh")])
        r = ad.sigmoid(ad.add(ad.slice_rows(gi, 0, H), ad.slice_rows(gh, 0, H)))
        z = ad.sigmoid(ad.add(ad.slice_rows(gi, H, 2 * H), ad.slice_rows(gh, H, 2 * H)))
        n = ad.tanh(ad.add(ad.slice_rows(gi, 2 * H, 3 * H),
                           ad.multiply(r, ad.slice_rows(gh, 2 * H, 3 * H))))
        # (1 - z) * n + z * h_prev
        return ad.add(n, ad.multiply(z, ad.subtract(h_prev, n)))

    def q_head(self, p, h: TapeNode) -> TapeNode:
        return self._lin(h, p, "q")

    def message_head(self, p, h: TapeNode) -> TapeNode:
        return ad.tanh(self._lin(ad.elu(self._lin(h, p, "msg1")), p, "msg2"))

    def step(self, p, o_game: TapeNode, o_wireless: TapeNode, prev_msgs: TapeNode, recv: np.ndarray,
             h_prev: TapeNode) -> tuple[TapeNode, TapeNode, TapeNode]:
        """One decision step for a batch of agent columns -> (h, q, m)."""
        e = self.fuse(p, o_game, o_wireless)
        phi = self.encode(p, prev_msgs, recv)
        h = self.core(p, e, phi, h_prev)
        return h, self.q_head(p, h), self.message_head(p, h)

    # ------------------------------------------------------------ single-agent API
    def encode_inbox(self, p, inbox: Sequence) -> TapeNode:
        """Encode one agent's multiset of received messages.

        ``inbox`` holds message vectors or ``(sender, message)`` pairs. Addends
        are put into a canonical order first so any permutation of the inbox
        gives bit-identical output.
        """
        items = []
        for item in inbox:
            if isinstance(item, tuple):
                sender, msg = item
            else:
                sender, msg = -1, item
            msg = np.asarray(msg.value if isinstance(msg, TapeNode) else msg, dtype=np.float64).reshape(-1)
            if msg.size != self.cfg.message_dim:
                raise ad.ShapeError(f"message of width {msg.size}, expected {self.cfg.message_dim}")
            items.append((sender, tuple(msg.tolist())))
        if not items:
            return ad.const(np.zeros((self.cfg.hidden, 1)))
        items.sort()
        msgs = ad.const(np.array([m for _, m in items]).T)
        return ad.sum_set(self.embed_messages(p, msgs))

    def q_forward(self, p, e: TapeNode, phi: TapeNode, h_prev: TapeNode):
        """Single agent -> (h, Q as n_actions x 2 node, message column)."""
        h = self.core(p, e, phi, h_prev)
        q = ad.reshape(self.q_head(p, h), self.cfg.n_actions, 2)
        return h, q, self.message_head(p, h)


def select_action(q: np.ndarray, epsilon: float, rng: np.random.Generator,
                  allow_comm: bool = True) -> AugmentedAction:
    """Epsilon-greedy over the flattened (game action, comm bit) table.

    Ties go to the lowest flat index (game-action major). With
    ``allow_comm=False`` only the silent column is eligible.
    """
    q = np.asarray(q)
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    n_a = q.shape[0]
    explore = rng.random() < epsilon
    if allow_comm:
        flat = int(rng.integers(2 * n_a)) if explore else int(np.argmax(q.reshape(-1)))
        return AugmentedAction(flat // 2, flat % 2)
    a = int(rng.integers(n_a)) if explore else int(np.argmax(q[:, 0]))
    return AugmentedAction(a, 0)


def greedy_flat(q_cols: np.ndarray, allow_comm: bool = True) -> np.ndarray:
    """Per-column argmax of a (2A x B) utility block, as flat indices."""
    if allow_comm:
        return np.argmax(q_cols, axis=0)
    return 2 * np.argmax(q_cols[0::2], axis=0)
