"""Wireless broadcast medium: log-distance path loss with log-normal shadowing,
per-obstacle attenuation, slotted p-CSMA contention and SINR decoding.

Powers are carried in dBm; sums of powers are taken in milliwatts.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

Cell = tuple[int, int]


@dataclass(frozen=True)
class ChannelParams:
    tx_power: float = 20.0        # P_t, dBm
    k_ref: float = 30.0           # reference-distance loss, dB
    eta: float = 2.5              # path-loss exponent
    d0: float = 1.0               # reference distance, m
    sigma: float = 2.0            # shadowing std-dev, dB
    delta0: float = 4.5           # attenuation per obstacle cell crossed, dB
    noise_floor: float = -95.0    # N0, dBm
    theta_f: float = -78.0        # carrier-sense threshold, dBm
    theta_r: float = 15.0         # SINR threshold, dB
    p: float = 0.3                # transmit probability after an idle sense
    window: int = 15              # back-off window W, slots
    slots: int = 15               # slots per decision epoch S
    cell_size: float = 10.0       # metres per grid cell

    def __post_init__(self):
        if self.d0 <= 0:
            raise ValueError("d0 must be positive")
        if not 0 < self.p <= 1:
            raise ValueError("p must lie in (0, 1]")
        if self.window < 1 or self.slots < 1:
            raise ValueError("window and slots must be >= 1")
        if self.sigma < 0 or self.delta0 < 0:
            raise ValueError("sigma and delta0 must be non-negative")
        if self.theta_f <= self.noise_floor:
            raise ValueError("carrier-sense threshold must exceed the noise floor")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")


class Outcome(enum.Enum):
    DECODED = "decoded"
    DETECTED = "detected_not_decoded"
    MISSED = "missed"


@dataclass(frozen=True)
class Reception:
    sender: int
    message: np.ndarray
    rss_dbm: float


@dataclass
class DeliveryReport:
    n_agents: int
    received: list[list[Reception]]
    slot: dict[int, int | None] = field(default_factory=dict)   # sender -> slot, None if dropped

    @classmethod
    def empty(cls, n_agents: int) -> "DeliveryReport":
        return cls(n_agents, [[] for _ in range(n_agents)], {})

    @property
    def transmitted(self) -> list[int]:
        return sorted(j for j, s in self.slot.items() if s is not None)

    @property
    def dropped(self) -> list[int]:
        return sorted(j for j, s in self.slot.items() if s is None)

    def edges(self) -> list[tuple[int, int]]:
        """Directed (sender, receiver) pairs that decoded this round."""
        return sorted((r.sender, i) for i, lst in enumerate(self.received) for r in lst)

    def mask(self) -> np.ndarray:
        """``mask[j, i] == 1`` iff receiver ``i`` decoded sender ``j``."""
        out = np.zeros((self.n_agents, self.n_agents))
        for j, i in self.edges():
            out[j, i] = 1.0
        return out


def dbm_to_mw(x):
    return 10.0 ** (x / 10.0)


def mw_to_dbm(x: float) -> float:
    return 10.0 * math.log10(x) if x > 0 else -math.inf


def mean_received_power(params: ChannelParams, distance_m: float, obstacles_crossed: int = 0) -> float:
    d = max(float(distance_m), params.d0)
    return (params.tx_power - params.k_ref - 10.0 * params.eta * math.log10(d / params.d0)
            - obstacles_crossed * params.delta0)


def received_power(params: ChannelParams, distance_m: float, obstacles_crossed: int,
                   rng: np.random.Generator) -> float:
    """Received power in dBm with a fresh shadowing draw. Distances below d0 are clamped."""
    psi = rng.normal(0.0, params.sigma) if params.sigma > 0 else 0.0
    return mean_received_power(params, distance_m, obstacles_crossed) + psi


def decode(signal_dbm: float, interference_dbm: Iterable[float], params: ChannelParams) -> Outcome:
    if signal_dbm < params.theta_f:
        return Outcome.MISSED
    interference = float(sum(dbm_to_mw(x) for x in interference_dbm))
    threshold = 10.0 ** (params.theta_r / 10.0)
    if dbm_to_mw(signal_dbm) >= threshold * (interference + dbm_to_mw(params.noise_floor)):
        return Outcome.DECODED
    return Outcome.DETECTED


# ----------------------------------------------------------------- geometry

@lru_cache(maxsize=65536)
def _crossed(a: Cell, b: Cell, obstacles: frozenset) -> int:
    if a == b or not obstacles:
        return 0
    (x0, y0), (x1, y1) = a, b
    px, py = x0 + 0.5, y0 + 0.5
    dx, dy = x1 - x0, y1 - y0
    count = 0
    for cell in obstacles:
        if cell == a or cell == b:
            continue
        cx, cy = cell
        if not (min(x0, x1) <= cx <= max(x0, x1) and min(y0, y1) <= cy <= max(y0, y1)):
            continue
        # Liang-Barsky clip of the segment against the closed unit square
        lo, hi = 0.0, 1.0
        hit = True
        for p_, q_ in ((-dx, px - cx), (dx, cx + 1 - px), (-dy, py - cy), (dy, cy + 1 - py)):
            if p_ == 0:
                if q_ < 0:
                    hit = False
                    break
                continue
            t = q_ / p_
            if p_ < 0:
                lo = max(lo, t)
            else:
                hi = min(hi, t)
            if lo > hi:
                hit = False
                break
        if hit and lo < 1.0 and hi > 0.0:
            count += 1
    return count


def obstacles_crossed(a: Cell, b: Cell, obstacles: Iterable[Cell]) -> int:
    """Obstacle cells whose square meets the open segment between cell centres.

    The two endpoint cells never count.
    """
    obs = obstacles if isinstance(obstacles, frozenset) else frozenset(obstacles)
    return _crossed(tuple(a), tuple(b), obs)


def link_power(params: ChannelParams, a: Cell, b: Cell, obstacles: frozenset,
               rng: np.random.Generator) -> float:
    dist = params.cell_size * math.hypot(a[0] - b[0], a[1] - b[1])
    return received_power(params, dist, obstacles_crossed(a, b, obstacles), rng)


# ----------------------------------------------------------------- medium access

def contend_slots(intents: Iterable[int], positions: Sequence[Cell], obstacles: Iterable[Cell],
                  params: ChannelParams, rng: np.random.Generator) -> dict[int, int | None]:
    """Slotted p-CSMA for one decision epoch.

    Returns sender -> slot index, or None when the sender never got on air.
    """
    senders = sorted(set(intents))
    if not senders:
        return {}
    obs = frozenset(obstacles)
    W = params.window
    counter = {j: int(rng.integers(W)) for j in senders}
    schedule: dict[int, int | None] = {j: None for j in senders}
    pending = list(senders)
    for slot in range(params.slots):
        on_air: list[int] = []
        still = []
        for j in pending:
            if counter[j] > 0:
                counter[j] -= 1
                still.append(j)
                continue
            energy = 0.0
            for k in on_air:
                energy += 10.0 ** (link_power(params, positions[k], positions[j], obs, rng) / 10.0)
            if energy > 0.0 and mw_to_dbm(energy) >= params.theta_f:
                counter[j] = int(rng.integers(W))
                still.append(j)
                continue
            if rng.random() < params.p:
                schedule[j] = slot
                on_air.append(j)
            else:
                counter[j] = int(rng.integers(W))
                still.append(j)
        pending = still
        if not pending:
            break
    return schedule


def receive(schedule: Mapping[int, int | None], messages: Mapping[int, np.ndarray],
            positions: Sequence[Cell], obstacles: Iterable[Cell], params: ChannelParams,
            rng: np.random.Generator) -> DeliveryReport:
    """Resolve SINR decoding for a fixed slot schedule."""
    n = len(positions)
    obs = frozenset(obstacles)
    report = DeliveryReport(n, [[] for _ in range(n)], dict(schedule))
    by_slot: dict[int, list[int]] = {}
    for j, s in sorted(schedule.items()):
        if s is not None:
            by_slot.setdefault(s, []).append(j)
    for slot in sorted(by_slot):
        tx = by_slot[slot]
        tx_set = set(tx)
        for i in range(n):
            if i in tx_set:
                continue  # half-duplex: a radio on air cannot listen
            powers = {j: link_power(params, positions[j], positions[i], obs, rng) for j in tx if j != i}
            for j, sig in powers.items():
                others = [pw for k, pw in powers.items() if k != j]
                if decode(sig, others, params) is Outcome.DECODED:
                    report.received[i].append(Reception(j, messages[j], sig))
    for lst in report.received:
        lst.sort(key=lambda r: r.sender)
    return report


def deliver_round(transmissions: Mapping[int, np.ndarray], positions: Sequence[Cell],
                  obstacles: Iterable[Cell], params: ChannelParams,
                  rng: np.random.Generator) -> DeliveryReport:
    """Contend, transmit and decode one epoch of broadcasts.

    ``transmissions`` maps sender id to its message vector; messages are passed
    through unmodified.
    """
    obs = frozenset(obstacles)
    schedule = contend_slots(transmissions.keys(), positions, obs, params, rng)
    return receive(schedule, transmissions, positions, obs, params, rng)
