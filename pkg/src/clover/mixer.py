"""Value mixers: the communication-graph-conditioned GNN mixer ("clover") and
the VDN / QMIX baselines.

Batched layout: utilities arrive as an ``N x G`` matrix, one column per
group (a time step of one episode). Per-node quantities of the GNN mixer are
stored agent-major: column ``i * G + g`` is agent ``i`` in group ``g``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .arena import CommGraph
from .autodiff import TapeNode

MIXER_KINDS = ("clover", "vdn", "qmix")


@dataclass
class MixerInput:
    """One step: utilities, global state, per-agent observations, graph."""
    q: TapeNode | np.ndarray     # N utilities of the executed actions
    state: np.ndarray            # s
    obs: np.ndarray              # N x (o_T || o_C)
    graph: CommGraph

    def __post_init__(self):
        n = self.graph.n
        q = self.q.value if isinstance(self.q, TapeNode) else np.asarray(self.q)
        if q.size != n or np.asarray(self.obs).shape[0] != n:
            raise ad.ShapeError("MixerInput: Q, obs and graph disagree on N")

    def q_node(self) -> TapeNode:
        if isinstance(self.q, TapeNode):
            return ad.reshape(self.q, self.graph.n, 1)
        return ad.const(np.asarray(self.q, dtype=np.float64).reshape(-1, 1))


def neighbor_weights(adj: np.ndarray) -> np.ndarray:
    """Mean-aggregation coefficients ``c[g, j, i] = A[g, j, i] / |N_i|``."""
    adj = np.asarray(adj, dtype=np.float64)
    deg = adj.sum(axis=1, keepdims=True)
    return np.divide(adj, deg, out=np.zeros_like(adj), where=deg > 0)


class VDNMixer:
    kind = "vdn"

    def __init__(self, n_agents: int, prefix: str = "mixer"):
        self.n_agents = n_agents
        self.prefix = prefix

    def init_params(self, store: ad.ParamStore, rng: np.random.Generator) -> None:
        pass

    def forward(self, p, q: TapeNode, state: np.ndarray, obs: np.ndarray, adj: np.ndarray) -> TapeNode:
        return ad.matmul(ad.ones(1, q.shape[0]), q)

    def mix(self, p, inp: MixerInput) -> TapeNode:
        return mix_vdn(inp.q_node())


def mix_vdn(q: TapeNode) -> TapeNode:
    """Sum of per-agent utilities; ``q`` is N x 1 (or N x G)."""
    return ad.matmul(ad.ones(1, q.shape[0]), q)


class QMixer:
    """Monotone hypernetwork mixer conditioned on the global state only."""
    kind = "qmix"

    def __init__(self, n_agents: int, state_dim: int, embed: int = 32, hyper_hidden: int = 64,
                 prefix: str = "mixer"):
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.embed = embed
        self.hyper_hidden = hyper_hidden
        self.prefix = prefix

    def _n(self, name):
        return f"{self.prefix}.{name}"

    def init_params(self, store: ad.ParamStore, rng: np.random.Generator) -> None:
        S, E, N = self.state_dim, self.embed, self.n_agents
        for name, rows, cols in (("hyper_w1", E * N, S), ("hyper_b1", E, S), ("hyper_w2", E, S),
                                 ("hyper_b2a", self.hyper_hidden, S), ("hyper_b2b", 1, self.hyper_hidden)):
            store.add_weight(self._n(f"{name}.w"), rows, cols, rng)
            store.add_bias(self._n(f"{name}.b"), rows)

    def _lin(self, x, p, name):
        return ad.affine(x, p[self._n(f"{name}.w")], p[self._n(f"{name}.b")])

    def forward(self, p, q: TapeNode, state: np.ndarray, obs=None, adj=None) -> TapeNode:
        s = ad.const(state)
        w1 = ad.abs_(self._lin(s, p, "hyper_w1"))
        hidden = ad.elu(ad.add(ad.batch_matvec(w1, q, self.embed), self._lin(s, p, "hyper_b1")))
        w2 = ad.abs_(self._lin(s, p, "hyper_w2"))
        b2 = self._lin(ad.relu(self._lin(s, p, "hyper_b2a")), p, "hyper_b2b")
        return ad.add(ad.matmul(ad.ones(1, self.embed), ad.multiply(w2, hidden)), b2)

    def mix(self, p, inp: MixerInput) -> TapeNode:
        return mix_qmix(self, p, inp.q_node(), inp.state)


def mix_qmix(mixer: QMixer, p, q: TapeNode, state: np.ndarray) -> TapeNode:
    return mixer.forward(p, q, np.asarray(state, dtype=np.float64).reshape(-1, 1))


class CloverMixer:
    """GNN mixer whose node weights come from a shared (hence permutation-
    equivariant) hypernetwork applied to ``s || o_i``, with messages passed
    along the realized communication graph."""
    kind = "clover"

    def __init__(self, n_agents: int, cond_dim: int, gnn_dim: int = 64, layers: int = 2,
                 hyper_hidden: int = 64, mix_hidden: int = 32, prefix: str = "mixer"):
        self.n_agents = n_agents
        self.cond_dim = cond_dim
        self.d = gnn_dim
        self.layers = layers
        self.hyper_hidden = hyper_hidden
        self.mix_hidden = mix_hidden
        self.prefix = prefix

    def _n(self, name):
        return f"{self.prefix}.{name}"

    def in_width(self, layer: int) -> int:
        return 1 if layer == 1 else self.d

    def init_params(self, store: ad.ParamStore, rng: np.random.Generator) -> None:
        C, Hh, d = self.cond_dim, self.hyper_hidden, self.d
        for l in range(1, self.layers + 1):
            for net, out in (("psi_a", d * self.in_width(l)), ("psi_b", d)):
                store.add_weight(self._n(f"{net}{l}.l1.w"), Hh, C, rng)
                store.add_bias(self._n(f"{net}{l}.l1.b"), Hh)
                store.add_weight(self._n(f"{net}{l}.l2.w"), out, Hh, rng)
                store.add_bias(self._n(f"{net}{l}.l2.b"), out)
        store.add_weight(self._n("out1.w"), self.mix_hidden, d, rng)
        store.add_bias(self._n("out1.b"), self.mix_hidden)
        store.add_weight(self._n("out2.w"), 1, self.mix_hidden, rng)
        store.add_bias(self._n("out2.b"), 1)

    # ------------------------------------------------------------ pieces
    def _hyper(self, p, net: str, layer: int, cond: TapeNode) -> TapeNode:
        pre = f"{net}{layer}"
        h = ad.relu(ad.affine(cond, p[self._n(f"{pre}.l1.w")], p[self._n(f"{pre}.l1.b")]))
        return ad.abs_(ad.affine(h, p[self._n(f"{pre}.l2.w")], p[self._n(f"{pre}.l2.b")]))

    def pehypernet(self, p, cond: TapeNode | np.ndarray, layer: int) -> tuple[TapeNode, TapeNode]:
        """Generated (W, xi) for every column of ``cond``; both are >= 0.

        W comes back flattened row-major, one ``d x in_width`` matrix per column.
        """
        if not isinstance(cond, TapeNode):
            cond = ad.const(np.asarray(cond, dtype=np.float64))
        if cond.shape[0] != self.cond_dim:
            raise ad.ShapeError(f"pehypernet: conditioning width {cond.shape[0]} != {self.cond_dim}")
        return self._hyper(p, "psi_a", layer, cond), self._hyper(p, "psi_b", layer, cond)

    def aggregate(self, z: TapeNode, coef: np.ndarray) -> TapeNode:
        """Neighbor mean for every node; ``coef`` is (G, N, N) as from neighbor_weights."""
        G, N, _ = coef.shape
        width = z.shape[0]
        blocks = [ad.slice_cols(z, j * G, (j + 1) * G) for j in range(N)]
        out = []
        for i in range(N):
            acc = None
            for j in range(N):
                c = coef[:, j, i]
                if j == i or not c.any():
                    continue
                term = ad.multiply(blocks[j], ad.const(np.broadcast_to(c, (width, G))))
                acc = term if acc is None else ad.add(acc, term)
            out.append(acc if acc is not None else ad.const(np.zeros((width, G))))
        return ad.concat_cols(out)

    def gnn_layer(self, z_prev: TapeNode, coef: np.ndarray, w: TapeNode, xi: TapeNode) -> TapeNode:
        """z_i = ELU(W_i z_prev_i + xi_i * mean_{j in N_i} z_prev_j)."""
        width = z_prev.shape[0]
        if width == 1:
            self_term = ad.multiply(w, ad.broadcast_rows(z_prev, self.d))
            agg = ad.broadcast_rows(self.aggregate(z_prev, coef), self.d)
        else:
            self_term = ad.batch_matvec(w, z_prev, self.d)
            agg = self.aggregate(z_prev, coef)
        return ad.elu(ad.add(self_term, ad.multiply(xi, agg)))

    def readout(self, p, v: TapeNode) -> TapeNode:
        h = ad.elu(ad.affine(v, ad.abs_(p[self._n("out1.w")]), p[self._n("out1.b")]))
        return ad.affine(h, ad.abs_(p[self._n("out2.w")]), p[self._n("out2.b")])

    # ------------------------------------------------------------ batched forward
    def forward(self, p, q: TapeNode, state: np.ndarray, obs: np.ndarray, adj: np.ndarray) -> TapeNode:
        """``q``: N x G; ``state``: S x G; ``obs``: (G, N, O); ``adj``: (G, N, N) -> 1 x G."""
        N, G = q.shape
        cond = conditioning(state, obs)
        coef = neighbor_weights(adj)
        z = ad.reshape(q, 1, N * G)
        cond_node = ad.const(cond)
        for layer in range(1, self.layers + 1):
            w, xi = self.pehypernet(p, cond_node, layer)
            z = self.gnn_layer(z, coef, w, xi)
        v = ad.slice_cols(z, 0, G)
        for i in range(1, N):
            v = ad.add(v, ad.slice_cols(z, i * G, (i + 1) * G))
        return self.readout(p, v)

    def mix(self, p, inp: MixerInput) -> TapeNode:
        return mix_clover(self, p, inp)


def conditioning(state: np.ndarray, obs: np.ndarray) -> np.ndarray:
    """Stack ``s || o_i`` agent-major: column ``i * G + g``."""
    G, N, O = obs.shape
    S = state.shape[0]
    out = np.empty((S + O, N * G))
    for i in range(N):
        out[:S, i * G:(i + 1) * G] = state
        out[S:, i * G:(i + 1) * G] = obs[:, i, :].T
    return out


def mix_clover(mixer: CloverMixer, p, inp: MixerInput) -> TapeNode:
    state = np.asarray(inp.state, dtype=np.float64).reshape(-1, 1)
    obs = np.asarray(inp.obs, dtype=np.float64)[None]
    adj = inp.graph.adjacency()[None]
    return mixer.forward(p, inp.q_node(), state, obs, adj)


def build_mixer(kind: str, n_agents: int, state_dim: int, agent_obs_dim: int, gnn_dim: int = 64,
                layers: int = 2, hyper_hidden: int = 64, mix_hidden: int = 32, qmix_embed: int = 32):
    if kind == "clover":
        return CloverMixer(n_agents, state_dim + agent_obs_dim, gnn_dim, layers, hyper_hidden, mix_hidden)
    if kind == "qmix":
        return QMixer(n_agents, state_dim, qmix_embed, hyper_hidden)
    if kind == "vdn":
        return VDNMixer(n_agents)
    raise ValueError(f"unknown mixer kind {kind!r}; choose from {MIXER_KINDS}")
