"""The augmented game: a grid game coupled to the wireless channel.

Messages chosen at step ``t`` are delivered at the end of that step and are
only visible to agents at step ``t + 1``. The realized delivery pattern of the
previous round is therefore fully known before anything at step ``t`` is
computed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .channel import ChannelParams, DeliveryReport, deliver_round
from .gridworlds import ContractError, GameConfig, GameState, GridGame, N_ACTIONS

RSS_FLOOR = -100.0
RSS_CEIL = -30.0


def normalize_rss(rss_dbm: float | None, floor: float = RSS_FLOOR, ceil: float = RSS_CEIL) -> float:
    if rss_dbm is None:
        return 0.0
    return float(min(max((rss_dbm - floor) / (ceil - floor), 0.0), 1.0))


@dataclass(frozen=True)
class CommGraph:
    n: int
    edges: frozenset  # of (sender, receiver)

    def __post_init__(self):
        for j, i in self.edges:
            if j == i:
                raise ContractError(f"self-loop on agent {i}")
            if not (0 <= j < self.n and 0 <= i < self.n):
                raise ContractError(f"edge {(j, i)} outside {self.n} agents")

    @classmethod
    def empty(cls, n: int) -> "CommGraph":
        return cls(n, frozenset())

    @classmethod
    def from_report(cls, report: DeliveryReport) -> "CommGraph":
        return cls(report.n_agents, frozenset(report.edges()))

    @classmethod
    def from_adjacency(cls, adj: np.ndarray) -> "CommGraph":
        js, is_ = np.nonzero(adj)
        return cls(adj.shape[0], frozenset(zip(js.tolist(), is_.tolist())))

    def neighbors(self, i: int) -> tuple[int, ...]:
        return tuple(sorted(j for j, r in self.edges if r == i))

    def adjacency(self) -> np.ndarray:
        """``A[j, i] = 1`` iff ``j -> i``."""
        out = np.zeros((self.n, self.n))
        for j, i in self.edges:
            out[j, i] = 1.0
        return out

    def relabel(self, perm: Sequence[int]) -> "CommGraph":
        """Agent ``k`` becomes agent ``perm[k]``."""
        return CommGraph(self.n, frozenset((perm[j], perm[i]) for j, i in self.edges))

    def __len__(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class AugmentedAction:
    game: int
    comm: int

    def __post_init__(self):
        if not 0 <= self.game < N_ACTIONS:
            raise ContractError(f"invalid game action {self.game}")
        if self.comm not in (0, 1):
            raise ContractError(f"communication action must be 0 or 1, got {self.comm}")


@dataclass(frozen=True)
class AugmentedObservation:
    game: np.ndarray                     # o_T
    wireless: np.ndarray                 # o_C, normalized RSS per potential sender
    inbox: tuple[tuple[int, np.ndarray], ...]

    @property
    def full(self) -> np.ndarray:
        return np.concatenate([self.game, self.wireless])


class Arena:
    def __init__(self, game_config: GameConfig, channel_params: ChannelParams, message_dim: int = 8,
                 rss_floor: float = RSS_FLOOR, rss_ceil: float = RSS_CEIL):
        self.game = GridGame(game_config)
        self.channel = channel_params
        self.message_dim = message_dim
        self.rss_floor = rss_floor
        self.rss_ceil = rss_ceil
        self.n_agents = game_config.agents
        self.state: GameState | None = None
        self.done = True
        self.graph = CommGraph.empty(self.n_agents)
        self.last_report = DeliveryReport.empty(self.n_agents)

    @property
    def obs_dim(self) -> int:
        return self.game.obs_dim

    @property
    def wireless_dim(self) -> int:
        return self.n_agents

    def _assemble(self, game_obs: np.ndarray, report: DeliveryReport) -> list[AugmentedObservation]:
        out = []
        for i in range(self.n_agents):
            wireless = np.zeros(self.n_agents)
            for r in report.received[i]:
                wireless[r.sender] = normalize_rss(r.rss_dbm, self.rss_floor, self.rss_ceil)
            inbox = tuple((r.sender, r.message) for r in report.received[i])
            out.append(AugmentedObservation(game_obs[i], wireless, inbox))
        return out

    def reset(self, rng: np.random.Generator):
        self.state, game_obs, s = self.game.reset(rng)
        self.done = False
        self.last_report = DeliveryReport.empty(self.n_agents)
        self.graph = CommGraph.empty(self.n_agents)
        return self._assemble(game_obs, self.last_report), s, self.graph

    def step(self, joint: Sequence[AugmentedAction], messages: np.ndarray, rng: np.random.Generator):
        if self.done or self.state is None:
            raise ContractError("arena step on a finished episode")
        if len(joint) != self.n_agents:
            raise ContractError(f"expected {self.n_agents} actions")
        messages = np.asarray(messages, dtype=np.float64)
        if messages.shape != (self.n_agents, self.message_dim):
            raise ContractError(f"messages must be {self.n_agents}x{self.message_dim}, got {messages.shape}")
        self.state, game_obs, s, reward, done = self.game.step(self.state, [a.game for a in joint])
        transmissions = {i: messages[i].copy() for i, a in enumerate(joint) if a.comm == 1}
        report = deliver_round(transmissions, self.state.agents, self.game.radio_obstacles(self.state),
                               self.channel, rng)
        self.last_report = report
        self.graph = CommGraph.from_report(report)
        self.done = done
        return self._assemble(game_obs, report), s, reward, done, self.graph, report

    @property
    def success(self) -> bool:
        return self.state is not None and self.game.is_terminal(self.state)


def arena_reset(game_config: GameConfig, channel_params: ChannelParams, rng: np.random.Generator,
                message_dim: int = 8) -> tuple[Arena, list[AugmentedObservation], np.ndarray, CommGraph]:
    arena = Arena(game_config, channel_params, message_dim)
    obs, s, graph = arena.reset(rng)
    return arena, obs, s, graph
