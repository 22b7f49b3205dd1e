"""Run configuration: INI-style file with one section per module, strict
key checking, and CLI overrides.

Sections: [run] (global seed), [sim] (episode physics plus dataset sizes),
[train] (optimization), [paths] (artifact locations).  Unknown sections or
keys are rejected by name; values are converted to the declared field type
or rejected with the expected type in the message.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .sim import EpisodeConfig
from .train import TrainConfig


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    episodes: int = 24
    holdout_episodes: int = 8
    sim: EpisodeConfig = field(default_factory=EpisodeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset_dir: str = "data"
    checkpoint_dir: str = "runs"
    report_dir: str = "reports"

    def __post_init__(self):
        if self.episodes < 1 or self.holdout_episodes < 0:
            raise ConfigError("episode counts must be positive")


_RUN_KEYS = {"seed": int}
_DATASET_KEYS = {"episodes": int, "holdout_episodes": int}
_PATH_KEYS = {"dataset_dir": str, "checkpoint_dir": str, "report_dir": str}
_SIM_KEYS = {f.name: f.type for f in fields(EpisodeConfig)}
_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}

_SECTIONS = {
    "run": {**_RUN_KEYS},
    "sim": {**_SIM_KEYS, **_DATASET_KEYS},
    "train": {**_TRAIN_KEYS},
    "paths": {**_PATH_KEYS},
}

_TYPE_NAMES = {int: "int", float: "float", str: "str", bool: "bool"}


def _resolve_type(tp):
    if isinstance(tp, str):
        return {"int": int, "float": float, "str": str, "bool": bool}.get(tp, str)
    return tp


def _convert(section: str, key: str, raw: str):
    tp = _resolve_type(_SECTIONS[section][key])
    text = raw.strip()
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        return text
    except ValueError:
        name = _TYPE_NAMES.get(tp, getattr(tp, "__name__", str(tp)))
        raise ConfigError(
            f"type mismatch for {section}.{key}: expected {name}, got {raw!r}") from None


def _check_key(section: str, key: str):
    if section not in _SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in _SECTIONS[section]:
        raise ConfigError(f"unknown config key {section}.{key}")


def parse_config(path=None, overrides=(), seed=None) -> RunConfig:
    """Build a RunConfig from an optional INI file plus CLI overrides.

    Precedence: defaults < file < --set overrides < --seed/--out flags.
    The seed flag also drives sim and train seeds unless those are pinned
    explicitly in the file or an override.
    """
    values: dict[tuple, object] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read_string(path.read_text())
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                _check_key(section, key)
                values[(section, key)] = _convert(section, key, raw)

    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        target, raw = item.split("=", 1)
        section, key = target.split(".", 1)
        _check_key(section, key)
        values[(section, key)] = _convert(section, key, raw)

    if seed is not None:
        values[("run", "seed")] = int(seed)
        values.setdefault(("sim", "seed"), int(seed))
        values.setdefault(("train", "seed"), int(seed))

    run_seed = values.get(("run", "seed"), 0)
    sim_kwargs = {k: v for (s, k), v in values.items() if s == "sim" and k in _SIM_KEYS}
    train_kwargs = {k: v for (s, k), v in values.items() if s == "train"}
    try:
        cfg = RunConfig(
            seed=run_seed,
            episodes=values.get(("sim", "episodes"), 24),
            holdout_episodes=values.get(("sim", "holdout_episodes"), 8),
            sim=EpisodeConfig(**sim_kwargs),
            train=TrainConfig(**train_kwargs),
            dataset_dir=values.get(("paths", "dataset_dir"), "data"),
            checkpoint_dir=values.get(("paths", "checkpoint_dir"), "runs"),
            report_dir=values.get(("paths", "report_dir"), "reports"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if ("sim", "seed") not in values:
        cfg.sim = replace(cfg.sim, seed=cfg.seed)
    if ("train", "seed") not in values:
        cfg.train = dataclasses.replace(cfg.train, seed=cfg.seed)
    return cfg


def render_resolved(cfg: RunConfig) -> str:
    """Fully resolved configuration as INI text, for run logs and echoing."""
    parser = configparser.ConfigParser()
    parser["run"] = {"seed": str(cfg.seed)}
    sim_items = dataclasses.asdict(cfg.sim)
    parser["sim"] = {k: str(v) for k, v in sim_items.items()}
    parser["sim"]["episodes"] = str(cfg.episodes)
    parser["sim"]["holdout_episodes"] = str(cfg.holdout_episodes)
    parser["train"] = {k: str(v) for k, v in dataclasses.asdict(cfg.train).items()}
    parser["paths"] = {
        "dataset_dir": cfg.dataset_dir,
        "checkpoint_dir": cfg.checkpoint_dir,
        "report_dir": cfg.report_dir,
    }
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.ini"
    path.write_text(render_resolved(cfg))
    return path
