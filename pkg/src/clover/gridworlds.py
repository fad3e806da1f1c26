"""Cooperative grid games: Predator-Prey (search for a stationary prey) and
Lumberjacks (trees need ``k`` agents next to them to fall).

Coordinates are ``(x, y)`` cells with ``y`` growing downwards. ``step`` is a
pure function of ``(state, actions)``; randomness is only used by ``reset``.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace

import numpy as np

Cell = tuple[int, int]

ACTIONS = ("up", "down", "left", "right", "stay")
MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0), (0, 0))
N_ACTIONS = len(ACTIONS)
STAY = 4


class ConfigError(ValueError):
    pass


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class GameConfig:
    game: str = "pp"              # "pp" or "lj"
    grid: int = 7
    agents: int = 3
    obstacles: int = 0            # number of straight barriers
    barrier_length: int = 1
    trees: int = 3
    k_choppers: int = 2
    max_steps: int = 100
    obs_radius: int = 1
    step_penalty: float = -0.1
    observe_reward: float = 0.05
    chop_reward: float = 0.5

    def __post_init__(self):
        if self.game not in ("pp", "lj"):
            raise ConfigError(f"unknown game {self.game!r}")
        if self.grid < 3:
            raise ConfigError("grid must be at least 3")
        if not 1 <= self.agents <= self.grid ** 2:
            raise ConfigError("agents must be between 1 and grid**2")
        if self.k_choppers < 1 or self.max_steps < 1:
            raise ConfigError("k_choppers and max_steps must be >= 1")
        if self.obstacles < 0 or self.trees < 0 or self.obs_radius < 0:
            raise ConfigError("counts must be non-negative")
        if self.obstacles and not 1 <= self.barrier_length <= self.grid:
            raise ConfigError("barrier_length must fit inside the grid")
        if self.game == "lj" and self.trees < 1:
            raise ConfigError("lumberjacks needs at least one tree")

    @property
    def n_targets(self) -> int:
        return 1 if self.game == "pp" else self.trees


@dataclass(frozen=True)
class GameState:
    agents: tuple[Cell, ...]
    obstacles: frozenset
    prey: Cell | None = None
    trees: tuple[Cell, ...] = ()
    alive: tuple[bool, ...] = ()
    observed: tuple[bool, ...] = ()
    arrived: tuple[bool, ...] = ()
    t: int = 0


class GridGame:
    """Environment contract shared by both games."""

    def __init__(self, config: GameConfig):
        self.config = config
        self.n_agents = config.agents
        self.n_actions = N_ACTIONS
        n = config.agents
        self.obs_dim = 2 + 3 + 9 + n + (config.trees if config.game == "lj" else 0)
        self.state_dim = 2 * n + (2 if config.game == "pp" else 4 * config.trees)

    # ------------------------------------------------------------ reset
    def reset(self, rng: np.random.Generator) -> tuple[GameState, np.ndarray, np.ndarray]:
        cfg = self.config
        g = cfg.grid
        needed = cfg.agents + cfg.n_targets + cfg.obstacles * cfg.barrier_length
        if needed > g * g:
            raise ConfigError(f"{needed} occupied cells requested on a {g}x{g} grid")
        for _ in range(100):
            obstacles = self._place_barriers(rng)
            free = [(x, y) for y in range(g) for x in range(g) if (x, y) not in obstacles]
            if len(free) < cfg.agents + cfg.n_targets:
                continue
            if self._connected(free, obstacles):
                break
        else:
            raise ConfigError("could not place barriers leaving a connected free space")
        picks = rng.choice(len(free), size=cfg.agents + cfg.n_targets, replace=False)
        cells = [free[k] for k in picks]
        agents = tuple(cells[:cfg.agents])
        targets = tuple(cells[cfg.agents:])
        if cfg.game == "pp":
            state = GameState(agents=agents, obstacles=obstacles, prey=targets[0],
                              arrived=tuple(a == targets[0] for a in agents))
        else:
            state = GameState(agents=agents, obstacles=obstacles, trees=targets,
                              alive=(True,) * cfg.trees, observed=(False,) * cfg.trees)
        return state, self.observations(state), self.global_state(state)

    def _place_barriers(self, rng: np.random.Generator) -> frozenset:
        cfg = self.config
        g, ell = cfg.grid, cfg.barrier_length
        cells: set[Cell] = set()
        for _ in range(cfg.obstacles):
            horizontal = bool(rng.integers(2))
            fixed = int(rng.integers(g))
            start = int(rng.integers(g - ell + 1))
            for k in range(ell):
                cells.add((start + k, fixed) if horizontal else (fixed, start + k))
        return frozenset(cells)

    @staticmethod
    def _connected(free: list[Cell], obstacles: frozenset) -> bool:
        if not free:
            return False
        free_set = set(free)
        seen = {free[0]}
        queue = deque([free[0]])
        while queue:
            x, y = queue.popleft()
            for dx, dy in MOVES[:4]:
                nxt = (x + dx, y + dy)
                if nxt in free_set and nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        return len(seen) == len(free_set)

    # ------------------------------------------------------------ dynamics
    def _move(self, cell: Cell, action: int, obstacles: frozenset) -> Cell:
        dx, dy = MOVES[action]
        nx, ny = cell[0] + dx, cell[1] + dy
        g = self.config.grid
        if not (0 <= nx < g and 0 <= ny < g) or (nx, ny) in obstacles:
            return cell
        return (nx, ny)

    def is_terminal(self, state: GameState) -> bool:
        """Task completed (as opposed to hitting the step cap)."""
        if self.config.game == "pp":
            return all(state.arrived)
        return not any(state.alive)

    def step(self, state: GameState, actions) -> tuple[GameState, np.ndarray, np.ndarray, float, bool]:
        cfg = self.config
        actions = [int(a) for a in actions]
        if len(actions) != cfg.agents:
            raise ContractError(f"expected {cfg.agents} actions, got {len(actions)}")
        for a in actions:
            if not 0 <= a < N_ACTIONS:
                raise ContractError(f"invalid action id {a}")
        if self.is_terminal(state) or state.t >= cfg.max_steps:
            raise ContractError("step called on a finished episode")

        if cfg.game == "pp":
            agents = tuple(
                pos if done else self._move(pos, a, state.obstacles)
                for pos, a, done in zip(state.agents, actions, state.arrived)
            )
            arrived = tuple(done or pos == state.prey for pos, done in zip(agents, state.arrived))
            reward = cfg.step_penalty
            nxt = replace(state, agents=agents, arrived=arrived, t=state.t + 1)
        else:
            agents = tuple(self._move(pos, a, state.obstacles) for pos, a in zip(state.agents, actions))
            reward = cfg.step_penalty
            alive = list(state.alive)
            observed = list(state.observed)
            for k, tree in enumerate(state.trees):
                if not alive[k]:
                    continue
                near = sum(abs(p[0] - tree[0]) + abs(p[1] - tree[1]) <= 1 for p in agents)
                if near >= cfg.k_choppers:
                    alive[k] = False
                    reward += cfg.chop_reward
            for k, tree in enumerate(state.trees):
                if observed[k]:
                    continue
                if any(self._chebyshev(p, tree) <= cfg.obs_radius for p in agents):
                    observed[k] = True
                    reward += cfg.observe_reward
            nxt = replace(state, agents=agents, alive=tuple(alive), observed=tuple(observed),
                          t=state.t + 1)
        done = self.is_terminal(nxt) or nxt.t >= cfg.max_steps
        return nxt, self.observations(nxt), self.global_state(nxt), reward, done

    # ------------------------------------------------------------ observations
    @staticmethod
    def _chebyshev(a: Cell, b: Cell) -> int:
        return max(abs(a[0] - b[0]), abs(a[1] - b[1]))

    def target_of(self, state: GameState, agent: int) -> Cell | None:
        """Visible prey / nearest visible live tree for ``agent``, if any."""
        cfg = self.config
        pos = state.agents[agent]
        if cfg.game == "pp":
            cands = [state.prey]
        else:
            cands = [t for t, live in zip(state.trees, state.alive) if live]
        best = None
        for c in cands:
            d = self._chebyshev(pos, c)
            if d <= cfg.obs_radius and (best is None or d < best[0]):
                best = (d, c)
        return None if best is None else best[1]

    def observe(self, state: GameState, agent: int) -> np.ndarray:
        cfg = self.config
        g, r = cfg.grid, max(cfg.obs_radius, 1)
        x, y = state.agents[agent]
        out = np.zeros(self.obs_dim)
        out[0], out[1] = x / (g - 1), y / (g - 1)
        target = self.target_of(state, agent)
        if target is not None:
            out[2] = (target[0] - x) / r
            out[3] = (target[1] - y) / r
            out[4] = 1.0
        k = 5
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                cx, cy = x + dx, y + dy
                blocked = not (0 <= cx < g and 0 <= cy < g) or (cx, cy) in state.obstacles
                out[k] = float(blocked)
                k += 1
        out[k + agent] = 1.0
        k += cfg.agents
        if cfg.game == "lj":
            out[k:k + cfg.trees] = state.alive
        return out

    def observations(self, state: GameState) -> np.ndarray:
        """Per-agent observations stacked as rows (N x obs_dim)."""
        return np.stack([self.observe(state, i) for i in range(self.n_agents)])

    def global_state(self, state: GameState) -> np.ndarray:
        g1 = self.config.grid - 1
        parts = [c / g1 for pos in state.agents for c in pos]
        if self.config.game == "pp":
            parts += [state.prey[0] / g1, state.prey[1] / g1]
        else:
            for tree, live, seen in zip(state.trees, state.alive, state.observed):
                parts += [tree[0] / g1, tree[1] / g1, float(live), float(seen)]
        return np.asarray(parts, dtype=np.float64)

    def radio_obstacles(self, state: GameState) -> frozenset:
        """Cells attenuating radio links: barriers plus standing trees."""
        if self.config.game == "lj":
            return state.obstacles | frozenset(t for t, live in zip(state.trees, state.alive) if live)
        return state.obstacles
