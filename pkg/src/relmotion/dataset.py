"""Versioned on-disk episode storage.

One ``.npz`` file per episode plus a ``manifest.json`` listing the files
and the generating config.  Arrays round-trip losslessly; the format
version is checked on read and corruption surfaces as DatasetError.
"""
from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

from .sim import (CollisionEvent, Episode, EpisodeConfig,
                  episode_config_from_json, episode_config_to_json)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


class DatasetError(Exception):
    pass


def write_episode(episode: Episode, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ev = episode.events
    np.savez_compressed(
        path,
        format_version=np.int64(FORMAT_VERSION),
        config_json=np.bytes_(episode_config_to_json(episode.config).encode()),
        frames=episode.frames,
        pos=episode.pos,
        vel=episode.vel,
        deform=episode.deform,
        frozen=episode.frozen,
        since_collision=episode.since_collision,
        radius=episode.radius,
        mass=episode.mass,
        gt_masks=episode.gt_masks,
        event_frames=np.array([e.frame for e in ev], dtype=np.int64),
        event_normals=(np.stack([e.normal for e in ev]) if ev else np.zeros((0, 2))),
        event_p_pre=(np.stack([e.momentum_pre for e in ev]) if ev else np.zeros((0, 2, 2))),
        event_p_post=(np.stack([e.momentum_post for e in ev]) if ev else np.zeros((0, 2, 2))),
    )


def read_episode(path) -> Episode:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"episode file not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            version = int(data["format_version"])
            if version != FORMAT_VERSION:
                raise DatasetError(
                    f"unsupported episode format version {version} (expected {FORMAT_VERSION})")
            cfg = episode_config_from_json(bytes(data["config_json"]).decode())
            events = [
                CollisionEvent(int(f), n, pre, post)
                for f, n, pre, post in zip(data["event_frames"], data["event_normals"],
                                           data["event_p_pre"], data["event_p_post"])
            ]
            return Episode(
                frames=data["frames"], pos=data["pos"], vel=data["vel"],
                deform=data["deform"], frozen=data["frozen"],
                since_collision=data["since_collision"], radius=data["radius"],
                mass=data["mass"], gt_masks=data["gt_masks"],
                events=events, config=cfg,
            )
    except DatasetError:
        raise
    except (zipfile.BadZipFile, OSError, ValueError, KeyError, EOFError) as exc:
        raise DatasetError(f"corrupt or unreadable episode file {path}: {exc}") from exc


def write_dataset(episodes, path) -> None:
    """Write episodes plus a manifest into a directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = []
    for i, ep in enumerate(episodes):
        name = f"episode_{i:05d}.npz"
        write_episode(ep, path / name)
        names.append(name)
    manifest = {
        "format_version": FORMAT_VERSION,
        "episodes": names,
        "config": json.loads(episode_config_to_json(episodes[0].config)) if episodes else None,
    }
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_manifest(path) -> dict:
    path = Path(path)
    mf = path / MANIFEST_NAME
    if not mf.exists():
        raise DatasetError(f"no {MANIFEST_NAME} in {path}")
    try:
        manifest = json.loads(mf.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest in {path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetError(
            f"unsupported dataset format version {version} (expected {FORMAT_VERSION})")
    return manifest


def read_dataset(path) -> list[Episode]:
    path = Path(path)
    manifest = read_manifest(path)
    return [read_episode(path / name) for name in manifest["episodes"]]


def episodes_equal(a: Episode, b: Episode) -> bool:
    arrays = ["frames", "pos", "vel", "deform", "frozen", "since_collision",
              "radius", "mass", "gt_masks"]
    if any(not np.array_equal(getattr(a, k), getattr(b, k)) for k in arrays):
        return False
    if a.config != b.config or len(a.events) != len(b.events):
        return False
    for ea, eb in zip(a.events, b.events):
        if ea.frame != eb.frame:
            return False
        if not (np.array_equal(ea.normal, eb.normal)
                and np.array_equal(ea.momentum_pre, eb.momentum_pre)
                and np.array_equal(ea.momentum_post, eb.momentum_post)):
            return False
    return True
