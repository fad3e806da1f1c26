"""Experiment configuration: flat ``key = value`` lines with ``#`` comments
and dotted namespaces, e.g. ``channel.p = 0.3`` or ``game.grid = 5``."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .arena import RSS_CEIL, RSS_FLOOR
from .channel import ChannelParams
from .gridworlds import ConfigError, GameConfig
from .mixer import MIXER_KINDS
from .trainer import ModelConfig, TrainerConfig


class ConfigParseError(ConfigError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)
        self.line = line


@dataclass(frozen=True)
class ExperimentConfig:
    game: GameConfig = field(default_factory=GameConfig)
    channel: ChannelParams = field(default_factory=ChannelParams)
    train: TrainerConfig = field(default_factory=TrainerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    rss_floor: float = RSS_FLOOR
    rss_ceil: float = RSS_CEIL
    seeds: tuple[int, ...] = (0,)
    out: str = "runs"
    calibrate_trials: int = 10_000


# namespace -> (ExperimentConfig attribute, {config key: dataclass field})
_SECTIONS = {
    "game": ("game", {f.name: f.name for f in dataclasses.fields(GameConfig)}),
    "channel": ("channel", {f.name: f.name for f in dataclasses.fields(ChannelParams)}),
    "train": ("train", {f.name: f.name for f in dataclasses.fields(TrainerConfig)}),
    "agent": ("model", {"hidden": "hidden", "branch": "branch"}),
    "mixer": ("model", {"kind": "mixer", "gnn_dim": "gnn_dim", "layers": "gnn_layers",
                        "hyper_hidden": "hyper_hidden", "mix_hidden": "mix_hidden", "qmix_embed": "qmix_embed"}),
    "arena": (None, {"message_dim": "message_dim", "rss_floor": "rss_floor", "rss_ceil": "rss_ceil"}),
    "calibrate": (None, {"trials": "calibrate_trials"}),
}
_TOP = {"seeds", "out"}


def known_keys() -> list[str]:
    keys = sorted(_TOP)
    for ns, (_, fields) in _SECTIONS.items():
        keys += [f"{ns}.{k}" for k in fields]
    return keys


def _convert(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ValueError(f"{key}: cannot read {raw!r} as {type(like).__name__}") from None
    return raw


def _lines(text: str):
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if body:
            yield lineno, body


def parse_config(text: str, source: str = "<config>",
                 overrides: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Parse config text; ``overrides`` (key -> raw value) win over the file."""
    entries: dict[str, tuple[str, int | None]] = {}
    for lineno, body in _lines(text):
        if "=" not in body:
            raise ConfigParseError(f"expected 'key = value', got {body!r}", lineno, source)
        key, raw = (s.strip() for s in body.split("=", 1))
        if key in entries:
            raise ConfigParseError(f"duplicate key {key!r}", lineno, source)
        entries[key] = (raw, lineno)
    for key, raw in (overrides or {}).items():
        entries[key] = (str(raw), None)

    defaults = ExperimentConfig()
    sub: dict[str, dict] = {"game": {}, "channel": {}, "train": {}, "model": {}}
    top: dict = {}
    for key, (raw, lineno) in entries.items():
        try:
            if key in _TOP:
                if key == "seeds":
                    seeds = tuple(int(s) for s in raw.replace(",", " ").split())
                    if not seeds:
                        raise ValueError("seeds: at least one seed required")
                    top["seeds"] = seeds
                else:
                    top["out"] = raw
                continue
            ns, _, name = key.partition(".")
            if ns not in _SECTIONS or name not in _SECTIONS[ns][1]:
                raise ConfigParseError(f"unknown key {key!r}", lineno, source)
            attr, fields = _SECTIONS[ns]
            target = fields[name]
            if attr is None:
                if target == "message_dim":
                    sub["model"]["message_dim"] = _convert(raw, defaults.model.message_dim, key)
                else:
                    top[target] = _convert(raw, getattr(defaults, target), key)
            else:
                sub[attr][target] = _convert(raw, getattr(getattr(defaults, attr), target), key)
        except ConfigParseError:
            raise
        except ValueError as exc:
            raise ConfigParseError(str(exc), lineno, source) from None

    kind = sub["model"].get("mixer", defaults.model.mixer)
    if kind not in MIXER_KINDS:
        raise ConfigParseError(f"mixer.kind must be one of {MIXER_KINDS}, got {kind!r}",
                               entries.get("mixer.kind", ("", None))[1], source)
    try:
        return ExperimentConfig(
            game=GameConfig(**sub["game"]),
            channel=ChannelParams(**sub["channel"]),
            train=TrainerConfig(**sub["train"]),
            model=ModelConfig(**sub["model"]),
            **top,
        )
    except ValueError as exc:
        raise ConfigParseError(str(exc), None, source) from None


def load_config(path, overrides: Mapping[str, str] | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigParseError(f"cannot read config: {exc.strerror}", None, str(path)) from None
    return parse_config(text, str(path), overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; parsing it back yields an equal config."""
    lines = [f"seeds = {', '.join(map(str, cfg.seeds))}", f"out = {cfg.out}"]
    for ns, (attr, fields) in _SECTIONS.items():
        for key, name in fields.items():
            if attr is not None:
                value = getattr(getattr(cfg, attr), name)
            elif name == "message_dim":
                value = cfg.model.message_dim
            else:
                value = getattr(cfg, name)
            lines.append(f"{ns}.{key} = {value!r}" if isinstance(value, float) else f"{ns}.{key} = {value}")
    return "\n".join(lines) + "\n"
