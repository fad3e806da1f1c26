"""Experiment plumbing: per-seed training runs with CSV metrics and
checkpoints, greedy evaluation, message analysis and channel calibration."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .arena import Arena
from .channel import ChannelParams, decode, Outcome, received_power
from .config import ExperimentConfig, dump_config, parse_config
from .trainer import METRIC_COLUMNS, Learner, MetricsRow, Trainer, collect_episode, make_streams

log = logging.getLogger(__name__)

EVAL_COLUMNS = ("episode", "steps", "return", "comm_prob", "success")


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_metrics(path, rows: Sequence[MetricsRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([_fmt(v) for v in row.as_tuple()])


def read_metrics(path) -> list[dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]


# ----------------------------------------------------------------- training

@dataclass
class SeedResult:
    seed: int
    metrics_path: Path
    checkpoint_path: Path
    rows: list[MetricsRow]
    trainer: Trainer


def run_seed(cfg: ExperimentConfig, seed: int, out_dir) -> SeedResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg.game, cfg.channel, cfg.train, cfg.model, seed, cfg.rss_floor, cfg.rss_ceil)
    metrics_path = out / f"metrics_seed{seed}.csv"
    ckpt_path = out / f"checkpoint_seed{seed}.npz"
    every = cfg.train.checkpoint_every
    next_ckpt = every
    rows = []
    start = time.perf_counter()
    for row in trainer.run():
        rows.append(row)
        log.info("seed %d: %d steps, %d episodes, mean steps %.2f, return %.3f", seed, row.env_steps,
                 row.episodes, row.mean_steps_to_termination, row.mean_return)
        if every and trainer.episodes >= next_ckpt:       # checked at metric rows
            save_checkpoint(trainer, cfg, ckpt_path)
            next_ckpt = (trainer.episodes // every + 1) * every
    write_metrics(metrics_path, rows)
    save_checkpoint(trainer, cfg, ckpt_path, wall_seconds=time.perf_counter() - start)
    return SeedResult(seed, metrics_path, ckpt_path, rows, trainer)


def save_checkpoint(trainer: Trainer, cfg: ExperimentConfig, path, wall_seconds: float | None = None) -> None:
    meta = {"config": dump_config(replace(cfg, seeds=(trainer.seed,))), "seed": str(trainer.seed),
            "env_steps": str(trainer.env_steps), "episodes": str(trainer.episodes)}
    if wall_seconds is not None:          # timing lives here, never in the metrics CSV
        meta["wall_seconds"] = repr(wall_seconds)
    trainer.store.save(path, meta)


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> list[SeedResult]:
    """One independent training run per configured seed."""
    out = Path(out_dir if out_dir is not None else cfg.out)
    return [run_seed(cfg, seed, out) for seed in cfg.seeds]


# ----------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    rows: list[tuple]                 # one per episode, EVAL_COLUMNS order
    comm_curve: list[float]           # mean a_C at each step index over episodes still running
    termination_steps: dict[int, int]
    mean_return: float
    std_return: float
    mean_comm_prob: float
    messages: list[dict]              # raw message log

    @property
    def success_rate(self) -> float:
        return float(np.mean([r[4] for r in self.rows])) if self.rows else 0.0


def load_checkpoint(path) -> tuple[ExperimentConfig, Learner, dict]:
    store, meta = ad.ParamStore.load(path)
    if "config" not in meta:
        raise ValueError(f"{path}: checkpoint has no embedded config")
    cfg = parse_config(meta["config"], f"{path}#config")
    learner = Learner.for_game(cfg.game, cfg.model, np.random.default_rng(0))
    if sorted(learner.store.names()) != sorted(store.names()):
        raise ValueError(f"{path}: parameter names do not match the embedded config")
    for name in store.names():
        if store.online[name].shape != learner.store.online[name].shape:
            raise ValueError(f"{path}: shape mismatch for {name}")
    learner.store = store
    return cfg, learner, meta


def _event_tags(game: str, obs_row: np.ndarray, seen_before: bool) -> list[str]:
    if obs_row[4] <= 0:
        return []
    if game == "pp":
        return ["prey-observed"] if seen_before else ["prey-first-observed", "prey-observed"]
    return ["tree-observed"]


def eval_policy(checkpoint, n_episodes: int, forced_silent: bool = False, seed: int = 0,
                config: ExperimentConfig | None = None) -> EvalReport:
    """Greedy rollouts of a saved policy."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be positive")
    saved_cfg, learner, _ = load_checkpoint(checkpoint)
    cfg = config or saved_cfg
    streams = make_streams(seed)
    arena = Arena(cfg.game, cfg.channel, cfg.model.message_dim, cfg.rss_floor, cfg.rss_ceil)
    params = learner.store.frozen("online")
    allow = not (forced_silent or cfg.train.no_comm)
    rows, returns, comm_rates, messages = [], [], [], []
    step_sum: list[float] = []
    step_cnt: list[int] = []
    terminations: dict[int, int] = {}
    for ep in range(n_episodes):
        tr = collect_episode(arena, learner.agent, params, 0.0, streams["env"], streams["channel"],
                             streams["exploration"], allow)
        rate = float(tr.comm.mean())
        rows.append((ep, tr.length, tr.episode_return, rate, bool(tr.terminated)))
        returns.append(tr.episode_return)
        comm_rates.append(rate)
        terminations[tr.length] = terminations.get(tr.length, 0) + 1
        seen = [False] * tr.n_agents
        for t in range(tr.length):
            if t == len(step_sum):
                step_sum.append(0.0)
                step_cnt.append(0)
            step_sum[t] += float(tr.comm[t].mean())
            step_cnt[t] += 1
            for i in range(tr.n_agents):
                tags = _event_tags(cfg.game.game, tr.obs[t, i], seen[i])
                if tags:
                    seen[i] = True
                messages.append({"episode": ep, "step": t, "agent": i, "sent": int(tr.comm[t, i]),
                                 "tags": tags, "message": tr.messages[t, i].copy()})
    return EvalReport(rows, [s / c for s, c in zip(step_sum, step_cnt)], dict(sorted(terminations.items())),
                      float(np.mean(returns)), float(np.std(returns)), float(np.mean(comm_rates)), messages)


def write_eval(report: EvalReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for row in report.rows:
            w.writerow([_fmt(v) for v in row])


def write_message_log(report: EvalReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        dim = len(report.messages[0]["message"]) if report.messages else 0
        w.writerow(["episode", "step", "agent", "sent", "tags"] + [f"m{k}" for k in range(dim)])
        for m in report.messages:
            w.writerow([m["episode"], m["step"], m["agent"], m["sent"], ";".join(m["tags"])]
                       + [_fmt(v) for v in m["message"]])


def read_message_log(path) -> list[dict]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            keys = sorted((k for k in r if k.startswith("m") and k[1:].isdigit()), key=lambda k: int(k[1:]))
            out.append({"episode": int(r["episode"]), "step": int(r["step"]), "agent": int(r["agent"]),
                        "sent": int(r["sent"]), "tags": [t for t in r["tags"].split(";") if t],
                        "message": np.array([float(r[k]) for k in keys])})
    return out


def positive_listening_gain(checkpoint, n_episodes: int, seed: int = 0) -> tuple[float, EvalReport, EvalReport]:
    """Mean return with communication minus mean return under forced silence."""
    with_comm = eval_policy(checkpoint, n_episodes, forced_silent=False, seed=seed)
    silent = eval_policy(checkpoint, n_episodes, forced_silent=True, seed=seed)
    return with_comm.mean_return - silent.mean_return, with_comm, silent


# ----------------------------------------------------------------- message analysis

@dataclass
class ConsistencyReport:
    matrix: np.ndarray
    labels: list
    intra_mean: float
    inter_mean: float
    group_means: dict
    zero_norm: int          # vectors with zero norm (their similarities are 0)


def cosine_matrix(vectors: np.ndarray) -> tuple[np.ndarray, int]:
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    zero = norms == 0
    unit = np.divide(v, norms[:, None], out=np.zeros_like(v), where=~zero[:, None])
    return unit @ unit.T, int(zero.sum())


def speaker_consistency(messages: np.ndarray, labels: Sequence) -> ConsistencyReport:
    messages = np.asarray(messages, dtype=np.float64)
    labels = list(labels)
    if messages.ndim != 2 or len(labels) != messages.shape[0]:
        raise ValueError("need one label per message vector")
    groups = sorted(set(labels), key=str)
    for g in groups:
        if labels.count(g) < 2:
            raise ValueError(f"group {g!r} has fewer than 2 messages")
    sim, zero = cosine_matrix(messages)
    if zero:
        log.warning("%d zero-norm message vectors; their similarities are set to 0", zero)
    lab = np.array([groups.index(x) for x in labels])
    same = lab[:, None] == lab[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    group_means = {}
    for k, g in enumerate(groups):
        sel = (lab[:, None] == k) & (lab[None, :] == k) & off
        group_means[g] = float(sim[sel].mean())
    inter = sim[~same]
    return ConsistencyReport(sim, labels, float(sim[same & off].mean()),
                             float(inter.mean()) if inter.size else math.nan, group_means, zero)


def sample_event_messages(log_entries: list[dict], per_group: int = 10, seed: int = 0,
                          event: str | None = None) -> tuple[np.ndarray, list[str]]:
    """Pick ``per_group`` sent messages emitted at an event and as many emitted otherwise."""
    sent = [m for m in log_entries if m["sent"]]
    if event is None:
        event = "prey-first-observed" if any("prey-first-observed" in m["tags"] for m in sent) else "tree-observed"
    hits = [m for m in sent if event in m["tags"]]
    rest = [m for m in sent if not m["tags"]]
    rng = np.random.default_rng(seed)
    pick = []
    for group, pool in ((event, hits), ("other", rest)):
        if len(pool) < 2:
            raise ValueError(f"not enough {group} messages in the log ({len(pool)})")
        idx = sorted(rng.choice(len(pool), size=min(per_group, len(pool)), replace=False))
        pick += [(group, pool[k]["message"]) for k in idx]
    return np.array([m for _, m in pick]), [g for g, _ in pick]


# ----------------------------------------------------------------- calibration

CALIBRATION_COLUMNS = ("distance_cells", "obstacles", "prr", "trials")


@dataclass
class CalibrationResult:
    rows: list[tuple[float, int, float, int]]
    corner_prr: float
    in_band: bool


def link_prr(params: ChannelParams, distance_cells: float, obstacles: int, trials: int,
             rng: np.random.Generator) -> float:
    """Fraction of lone transmissions decoded across a link (no interference)."""
    dist = distance_cells * params.cell_size
    ok = 0
    for _ in range(trials):
        sig = received_power(params, dist, obstacles, rng)
        ok += decode(sig, (), params) is Outcome.DECODED
    return ok / trials


def calibrate_channel(cfg: ExperimentConfig, trials: int | None = None, max_obstacles: int = 3,
                      seed: int = 0, band: tuple[float, float] = (0.40, 0.95)) -> CalibrationResult:
    """Monte-Carlo PRR sweep over straight-line distances, the grid diagonal,
    and obstacle counts."""
    trials = trials or cfg.calibrate_trials
    rng = np.random.default_rng(seed)
    g = cfg.game.grid
    corner = (g - 1) * math.sqrt(2.0)
    distances = [float(d) for d in range(1, g)] + [corner]
    rows = []
    for k in range(max_obstacles + 1):
        for d in distances:
            rows.append((d, k, link_prr(cfg.channel, d, k, trials, rng), trials))
    corner_prr = next(r[2] for r in rows if r[0] == corner and r[1] == 0)
    in_band = band[0] <= corner_prr <= band[1]
    if not in_band:
        log.warning("corner-to-corner PRR %.3f outside [%.2f, %.2f]", corner_prr, *band)
    return CalibrationResult(rows, corner_prr, in_band)


def write_calibration(result: CalibrationResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CALIBRATION_COLUMNS)
        for d, k, prr, n in result.rows:
            w.writerow([_fmt(d), k, _fmt(prr), n])
