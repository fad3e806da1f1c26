"""Episode collection, replay through the online network, TD loss with a
target network, and the training loop.

Batched replays lay agent columns out episode-major: column ``b * N + i`` is
agent ``i`` of episode ``b``. Messages travel through the delivery masks that
were recorded during collection, so the channel's randomness is replayed
exactly while message values stay differentiable.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .agentnet import AgentNet, AgentNetConfig, greedy_flat, select_action
from .arena import RSS_CEIL, RSS_FLOOR, Arena, AugmentedAction, CommGraph
from .autodiff import TapeNode
from .channel import ChannelParams
from .gridworlds import ContractError, GameConfig, GridGame, N_ACTIONS
from .mixer import build_mixer

STREAMS = ("env", "channel", "exploration", "init", "replay")


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one run seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(STREAMS, children)}


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.99
    lr: float = 5e-4
    batch_episodes: int = 32
    buffer_capacity: int = 5000
    target_sync_interval: int = 200      # episodes
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_anneal_steps: int = 50_000       # env steps
    total_env_steps: int = 200_000
    train_every: int = 1                 # episodes per gradient update
    grad_clip: float = 10.0
    log_every: int = 10                  # episodes per metrics row
    window: int = 100                    # episodes in the sliding metric window
    no_comm: bool = False
    checkpoint_every: int = 0            # episodes between interim checkpoints; 0 = final only

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        for name in ("batch_episodes", "buffer_capacity", "target_sync_interval", "train_every",
                     "log_every", "window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.total_env_steps < 0 or self.eps_anneal_steps < 0 or self.checkpoint_every < 0:
            raise ValueError("step counts must be non-negative")
        if not 0 <= self.eps_end <= self.eps_start <= 1:
            raise ValueError("need 0 <= eps_end <= eps_start <= 1")

    def epsilon(self, env_steps: int) -> float:
        if env_steps >= self.eps_anneal_steps:
            return self.eps_end
        frac = env_steps / self.eps_anneal_steps
        return self.eps_start + frac * (self.eps_end - self.eps_start)


@dataclass(frozen=True)
class ModelConfig:
    mixer: str = "clover"
    message_dim: int = 8
    hidden: int = 128
    branch: int = 64
    gnn_dim: int = 64
    gnn_layers: int = 2
    hyper_hidden: int = 64
    mix_hidden: int = 32
    qmix_embed: int = 32


@dataclass
class EpisodeTrajectory:
    """Everything needed to replay one episode.

    Per-step arrays have ``T + 1`` entries (the last one is the state reached
    after the final action); action-like arrays have ``T``.
    ``recv[t][j, i] = 1`` iff agent ``i`` decoded agent ``j`` in the round that
    ended step ``t - 1``, i.e. it is the adjacency of the graph at step ``t``.
    """
    obs: np.ndarray          # (T+1, N, obs_dim)
    wireless: np.ndarray     # (T+1, N, N)
    recv: np.ndarray         # (T+1, N, N)
    states: np.ndarray       # (T+1, state_dim)
    actions: np.ndarray      # (T, N) game actions
    comm: np.ndarray         # (T, N) communication bits
    rewards: np.ndarray      # (T,)
    terminated: bool         # task completed (not merely truncated)
    messages: np.ndarray     # (T, N, message_dim) as emitted
    q_values: np.ndarray     # (T, N, 2 * n_actions) seen at collection time
    allow_comm: bool = True
    uid: int = -1            # collection index within a run, used as a cache key

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def n_agents(self) -> int:
        return self.obs.shape[1]

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())

    def graph(self, t: int) -> CommGraph:
        return CommGraph.from_adjacency(self.recv[t])

    def validate(self) -> None:
        T, N = self.length, self.n_agents
        if T < 1:
            raise ContractError("empty trajectory")
        shapes = {"obs": self.obs.shape[0], "wireless": self.wireless.shape[0], "recv": self.recv.shape[0],
                  "states": self.states.shape[0]}
        for name, n in shapes.items():
            if n != T + 1:
                raise ContractError(f"{name} has {n} entries, expected {T + 1}")
        for name in ("actions", "comm", "messages", "q_values"):
            if getattr(self, name).shape[0] != T:
                raise ContractError(f"{name} length differs from the reward sequence")
        if self.recv[0].any():
            raise ContractError("graph at step 0 must be edgeless")
        if self.recv.shape[1:] != (N, N):
            raise ContractError("delivery mask shape mismatch")
        loops = np.diagonal(self.recv, axis1=1, axis2=2).any(axis=1)
        if loops.any():
            raise ContractError(f"self-loop in the graph at step {int(np.argmax(loops))}")
        silent = (self.recv[1:].any(axis=2) & (self.comm == 0)).any(axis=1)
        if silent.any():
            raise ContractError(f"edge from a silent agent in the graph at step {int(np.argmax(silent)) + 1}")


class Learner:
    """Shared agent network plus mixer, with one parameter store."""

    def __init__(self, n_agents: int, obs_dim: int, state_dim: int, model: ModelConfig,
                 rng: np.random.Generator):
        self.n_agents = n_agents
        self.obs_dim = obs_dim
        self.state_dim = state_dim
        self.model = model
        self.agent = AgentNet(AgentNetConfig(obs_dim, n_agents, N_ACTIONS, model.message_dim,
                                             model.hidden, model.branch))
        self.mixer = build_mixer(model.mixer, n_agents, state_dim, obs_dim + n_agents, model.gnn_dim,
                                 model.gnn_layers, model.hyper_hidden, model.mix_hidden, model.qmix_embed)
        self.store = ad.ParamStore()
        self.agent.init_params(self.store, rng)
        self.mixer.init_params(self.store, rng)

    @classmethod
    def for_game(cls, game: GameConfig, model: ModelConfig, rng: np.random.Generator) -> "Learner":
        g = GridGame(game)
        return cls(game.agents, g.obs_dim, g.state_dim, model, rng)


# ----------------------------------------------------------------- collection

def collect_episode(arena: Arena, agent: AgentNet, params: dict[str, TapeNode], epsilon: float,
                    rng_env: np.random.Generator, rng_channel: np.random.Generator,
                    rng_explore: np.random.Generator, allow_comm: bool = True) -> EpisodeTrajectory:
    """Roll one epsilon-greedy episode from a fresh reset."""
    N = arena.n_agents
    H = agent.cfg.hidden
    md = agent.cfg.message_dim
    aug, s, graph = arena.reset(rng_env)
    obs = [np.stack([o.game for o in aug])]
    wireless = [np.stack([o.wireless for o in aug])]
    recv = [graph.adjacency()]
    states = [s]
    actions, comm, rewards, messages, q_values = [], [], [], [], []
    h = ad.const(np.zeros((H, N)))
    prev_m = ad.const(np.zeros((md, N)))
    done = False
    while not done:
        # C-contiguous like the packed replay inputs, so BLAS sums in the same order
        o_game = ad.const(np.ascontiguousarray(obs[-1].T))
        o_wireless = ad.const(np.ascontiguousarray(wireless[-1].T))
        h, q, m = agent.step(params, o_game, o_wireless, prev_m, recv[-1], h)
        joint = [select_action(q.value[:, i].reshape(N_ACTIONS, 2), epsilon, rng_explore, allow_comm)
                 for i in range(N)]
        msg_rows = m.value.T.copy()
        aug, s, reward, done, graph, _ = arena.step(joint, msg_rows, rng_channel)
        actions.append([a.game for a in joint])
        comm.append([a.comm for a in joint])
        rewards.append(reward)
        messages.append(msg_rows)
        q_values.append(q.value.T.copy())
        obs.append(np.stack([o.game for o in aug]))
        wireless.append(np.stack([o.wireless for o in aug]))
        recv.append(graph.adjacency())
        states.append(s)
        prev_m = m
    return EpisodeTrajectory(
        obs=np.array(obs), wireless=np.array(wireless), recv=np.array(recv), states=np.array(states),
        actions=np.array(actions, dtype=np.int64), comm=np.array(comm, dtype=np.int64),
        rewards=np.array(rewards, dtype=np.float64), terminated=arena.success,
        messages=np.array(messages), q_values=np.array(q_values), allow_comm=allow_comm,
    )


# ----------------------------------------------------------------- replay

@dataclass
class _Batch:
    """Padded, column-major views of a list of trajectories."""
    B: int
    N: int
    lengths: np.ndarray
    obs: np.ndarray       # (Tmax+1, obs_dim, B*N)
    wireless: np.ndarray  # (Tmax+1, N, B*N)
    recv: list            # Tmax+1 block-diagonal (B*N, B*N) masks
    flat_actions: np.ndarray  # (Tmax, B*N), -1 where padded

    @property
    def t_max(self) -> int:
        return int(self.lengths.max())


def _pack(batch: Sequence[EpisodeTrajectory]) -> _Batch:
    B = len(batch)
    N = batch[0].n_agents
    lengths = np.array([tr.length for tr in batch])
    T = int(lengths.max())
    d_obs = batch[0].obs.shape[2]
    obs = np.zeros((T + 1, d_obs, B * N))
    wireless = np.zeros((T + 1, N, B * N))
    recv_full = np.zeros((T + 1, B * N, B * N))
    flat = np.full((T, B * N), -1, dtype=np.int64)
    for b, tr in enumerate(batch):
        L = tr.length
        cols = slice(b * N, (b + 1) * N)
        obs[:L + 1, :, cols] = tr.obs.transpose(0, 2, 1)
        wireless[:L + 1, :, cols] = tr.wireless.transpose(0, 2, 1)
        recv_full[:L + 1, cols, cols] = tr.recv
        flat[:L, cols] = tr.actions * 2 + tr.comm
    return _Batch(B, N, lengths, obs, wireless, list(recv_full), flat)


def unroll(agent: AgentNet, params, packed: _Batch, steps: int, horizon: int = 0
           ) -> tuple[list[TapeNode], list[TapeNode]]:
    """Run the recurrent agent for ``steps`` steps -> per-step (Q, message) nodes.

    Episodes must be sorted by decreasing length. At step ``t`` only episodes
    with ``length + horizon > t`` stay on the tape, so node widths shrink as
    episodes end.
    """
    N = packed.N
    width = packed.B * N
    h = ad.const(np.zeros((agent.cfg.hidden, width)))
    m = ad.const(np.zeros((agent.cfg.message_dim, width)))
    qs, ms = [], []
    for t in range(steps):
        k = int(np.sum(packed.lengths + horizon > t)) * N
        if k < width:
            h, m, width = ad.slice_cols(h, 0, k), ad.slice_cols(m, 0, k), k
        h, q, m = agent.step(params, ad.const(packed.obs[t][:, :k]), ad.const(packed.wireless[t][:, :k]), m,
                             packed.recv[t][:k, :k], h)
        qs.append(q)
        ms.append(m)
    return qs, ms


def _groups(packed: _Batch) -> tuple[np.ndarray, np.ndarray]:
    """Valid (episode, step) pairs, episode-major."""
    bs, ts = [], []
    for b, L in enumerate(packed.lengths):
        bs.extend([b] * int(L))
        ts.extend(range(int(L)))
    return np.array(bs, dtype=np.int64), np.array(ts, dtype=np.int64)


def _mixer_inputs(batch: Sequence[EpisodeTrajectory], bs: np.ndarray, ts: np.ndarray):
    states = np.stack([batch[b].states[t] for b, t in zip(bs, ts)], axis=1)
    obs = np.stack([np.concatenate([batch[b].obs[t], batch[b].wireless[t]], axis=1) for b, t in zip(bs, ts)])
    adj = np.stack([batch[b].recv[t] for b, t in zip(bs, ts)])
    return states, obs, adj


def chosen_utilities(qs: Sequence[TapeNode], packed: _Batch, bs: np.ndarray, ts: np.ndarray) -> TapeNode:
    """Executed-action utilities as an N x G node, one column per valid (episode, step)."""
    n_out = qs[0].shape[0]
    rows, offsets = [], [0]
    for t, q in enumerate(qs):
        width = q.shape[1]
        acts = packed.flat_actions[t][:width]
        mask = np.zeros((n_out, width))
        valid = acts >= 0
        mask[acts[valid], np.nonzero(valid)[0]] = 1.0
        rows.append(ad.matmul(ad.ones(1, n_out), ad.multiply(q, ad.const(mask))))
        offsets.append(offsets[-1] + width)
    flat = ad.concat_cols(rows)
    base = np.asarray(offsets)[ts] + bs * packed.N
    return ad.concat_rows([ad.gather_cols(flat, base + i) for i in range(packed.N)])


def replay_forward(agent: AgentNet, mixer, params, traj: EpisodeTrajectory):
    """Replay one episode through ``params`` with its recorded delivery masks.

    Returns (Q_tot node 1 x T, per-step Q nodes, per-step message nodes,
    greedy flat actions per step).
    """
    traj.validate()
    packed = _pack([traj])
    qs, ms = unroll(agent, params, packed, traj.length)
    bs, ts = _groups(packed)
    chosen = chosen_utilities(qs, packed, bs, ts)
    states, obs, adj = _mixer_inputs([traj], bs, ts)
    q_tot = mixer.forward(params, chosen, states, obs, adj)
    greedy = [greedy_flat(q.value, traj.allow_comm) for q in qs]
    return q_tot, qs, ms, greedy


def td_targets(agent: AgentNet, mixer, target_params, batch: Sequence[EpisodeTrajectory],
               gamma: float) -> list[np.ndarray]:
    """Per-episode target vectors y (constants, aligned with ``batch``)."""
    order = sorted(range(len(batch)), key=lambda k: -batch[k].length)
    batch = [batch[k] for k in order]
    packed = _pack(batch)
    bs, ts = _groups(packed)
    qs, _ = unroll(agent, target_params, packed, packed.t_max + 1, horizon=1)
    N = packed.N
    q_next = np.empty((N, len(bs)))
    for g, (b, t) in enumerate(zip(bs, ts)):
        block = qs[t + 1].value[:, b * N:(b + 1) * N]
        a_star = greedy_flat(block, batch[b].allow_comm)
        q_next[:, g] = block[a_star, np.arange(N)]
    states, obs, adj = _mixer_inputs(batch, bs, ts + 1)
    bootstrap = mixer.forward(target_params, ad.const(q_next), states, obs, adj).value.reshape(-1)
    out: list = [None] * len(batch)
    start = 0
    for b, tr in enumerate(batch):
        L = tr.length
        boot = bootstrap[start:start + L].copy()
        if tr.terminated:
            boot[-1] = 0.0
        out[order[b]] = tr.rewards + gamma * boot
        start += L
    return out


def batch_td_loss(agent: AgentNet, mixer, params, target_params, batch: Sequence[EpisodeTrajectory],
                  gamma: float, targets: Sequence[np.ndarray] | None = None) -> TapeNode:
    """Mean over episodes of the summed squared TD error.

    ``targets`` may supply precomputed y vectors aligned with ``batch``.
    """
    for tr in batch:
        tr.validate()
    if targets is None:
        targets = td_targets(agent, mixer, target_params, batch, gamma)
    order = sorted(range(len(batch)), key=lambda k: -batch[k].length)
    ordered = [batch[k] for k in order]
    y = np.concatenate([targets[k] for k in order])
    packed = _pack(ordered)
    qs, _ = unroll(agent, params, packed, packed.t_max)
    bs, ts = _groups(packed)
    chosen = chosen_utilities(qs, packed, bs, ts)
    states, obs, adj = _mixer_inputs(ordered, bs, ts)
    q_tot = mixer.forward(params, chosen, states, obs, adj)
    err = ad.subtract(ad.const(y.reshape(1, -1)), q_tot)
    return ad.scale(ad.sum_all(ad.square(err)), 1.0 / len(batch))


def td_loss(agent: AgentNet, mixer, params, target_params, traj: EpisodeTrajectory, gamma: float) -> TapeNode:
    return batch_td_loss(agent, mixer, params, target_params, [traj], gamma)


# ----------------------------------------------------------------- buffer

class ReplayBuffer:
    """FIFO episode store with uniform sampling without replacement."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def add(self, traj: EpisodeTrajectory) -> None:
        self._items.append(traj)

    def sample(self, k: int, rng: np.random.Generator) -> list[EpisodeTrajectory]:
        idx = rng.choice(len(self._items), size=min(k, len(self._items)), replace=False)
        return [self._items[i] for i in sorted(idx)]

    def __iter__(self):
        return iter(self._items)


# ----------------------------------------------------------------- training loop

METRIC_COLUMNS = ("env_steps", "episodes", "seed", "mean_steps_to_termination", "mean_return",
                  "mean_comm_prob", "epsilon", "loss")


@dataclass
class MetricsRow:
    env_steps: int
    episodes: int
    seed: int
    mean_steps_to_termination: float
    mean_return: float
    mean_comm_prob: float
    epsilon: float
    loss: float

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, c) for c in METRIC_COLUMNS)


@dataclass
class Trainer:
    game: GameConfig
    channel: ChannelParams
    train: TrainerConfig
    model: ModelConfig
    seed: int = 0
    rss_floor: float = RSS_FLOOR
    rss_ceil: float = RSS_CEIL
    streams: dict = field(init=False)
    learner: Learner = field(init=False)
    arena: Arena = field(init=False)
    buffer: ReplayBuffer = field(init=False)

    def __post_init__(self):
        self.streams = make_streams(self.seed)
        self.learner = Learner.for_game(self.game, self.model, self.streams["init"])
        self.arena = Arena(self.game, self.channel, self.model.message_dim, self.rss_floor, self.rss_ceil)
        self.buffer = ReplayBuffer(self.train.buffer_capacity)
        self.env_steps = 0
        self.episodes = 0
        self.lengths: deque = deque(maxlen=self.train.window)
        self.returns: deque = deque(maxlen=self.train.window)
        self.comm_rates: deque = deque(maxlen=self.train.window)
        self._targets: dict[int, np.ndarray] = {}

    @property
    def store(self) -> ad.ParamStore:
        return self.learner.store

    def collect(self, epsilon: float) -> EpisodeTrajectory:
        s = self.streams
        return collect_episode(self.arena, self.learner.agent, self.store.frozen("online"), epsilon,
                               s["env"], s["channel"], s["exploration"], not self.train.no_comm)

    def update(self) -> float:
        cfg = self.train
        batch = self.buffer.sample(cfg.batch_episodes, self.streams["replay"])
        lr = self.learner
        target_params = self.store.frozen("target")
        # targets only depend on theta', which is constant between syncs
        known = {tr.uid: self._targets[tr.uid] for tr in batch if tr.uid >= 0 and tr.uid in self._targets}
        stale = [tr for tr in batch if tr.uid not in known]
        fresh = td_targets(lr.agent, lr.mixer, target_params, stale, cfg.gamma) if stale else []
        targets = []
        it = iter(fresh)
        for tr in batch:
            if tr.uid in known:
                targets.append(known[tr.uid])
            else:
                y = next(it)
                targets.append(y)
                if tr.uid >= 0:
                    self._targets[tr.uid] = y
        loss = batch_td_loss(lr.agent, lr.mixer, self.store.online, target_params, batch, cfg.gamma, targets)
        ad.backward(loss)
        self.store.clip_grad_norm(cfg.grad_clip)
        ad.adam_step(self.store, cfg.lr)
        return float(loss.value[0, 0])

    def _row(self, eps: float, losses: list[float]) -> MetricsRow:
        return MetricsRow(self.env_steps, self.episodes, self.seed,
                          float(np.mean(self.lengths)), float(np.mean(self.returns)),
                          float(np.mean(self.comm_rates)), eps,
                          float(np.mean(losses)) if losses else float("nan"))

    def run(self) -> Iterator[MetricsRow]:
        cfg = self.train
        losses: list[float] = []
        logged_at = 0
        while self.env_steps < cfg.total_env_steps:
            eps = cfg.epsilon(self.env_steps)
            traj = self.collect(eps)
            traj.uid = self.episodes
            self.buffer.add(traj)
            self.env_steps += traj.length
            self.episodes += 1
            self.lengths.append(traj.length)
            self.returns.append(traj.episode_return)
            self.comm_rates.append(float(traj.comm.mean()))
            if self.episodes % cfg.train_every == 0 and len(self.buffer) >= cfg.batch_episodes:
                losses.append(self.update())
            if self.episodes % cfg.target_sync_interval == 0:
                self.store.sync_target()
                self._targets.clear()
            elif len(self._targets) > 2 * cfg.buffer_capacity:
                live = {tr.uid for tr in self.buffer}
                self._targets = {k: v for k, v in self._targets.items() if k in live}
            if self.episodes % cfg.log_every == 0:
                yield self._row(eps, losses)
                losses = []
                logged_at = self.episodes
        if self.episodes and logged_at != self.episodes:
            yield self._row(cfg.epsilon(self.env_steps), losses)


def train_run(game: GameConfig, channel: ChannelParams, train: TrainerConfig, model: ModelConfig,
              seed: int = 0) -> tuple[Trainer, list[MetricsRow]]:
    trainer = Trainer(game, channel, train, model, seed)
    rows = list(trainer.run())
    return trainer, rows


def random_policy_baseline(game: GameConfig, episodes: int, rng: np.random.Generator) -> float:
    """Mean episode length under uniformly random game actions.

    Communication cannot change the game dynamics, so no channel is simulated.
    """
    env = GridGame(game)
    total = 0
    for _ in range(episodes):
        state, _, _ = env.reset(rng)
        done = False
        while not done:
            state, _, _, _, done = env.step(state, rng.integers(N_ACTIONS, size=game.agents))
        total += state.t
    return total / episodes


def greedy_joint(q_cols: np.ndarray, allow_comm: bool = True) -> list[AugmentedAction]:
    return [AugmentedAction(int(f) // 2, int(f) % 2) for f in greedy_flat(q_cols, allow_comm)]
