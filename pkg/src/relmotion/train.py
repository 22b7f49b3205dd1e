"""Two-phase training with curriculum scheduling and deterministic resume.

Phase 1 trains the segmentation network, the per-slot transform encoder
and the latent homomorphism map end to end on next-frame prediction; the
algebraic losses switch on at the curriculum threshold.  Phase 2 freezes
everything learned and fits only the scalar relation projection on
relative-transform latents.

Batch composition and synthetic transform sampling are pure functions of
(seed, step), so resuming from a checkpoint reproduces the loss log of an
uninterrupted run bit for bit on the same platform.  Checkpoints are
serialized through numpy + pickle so identical state produces identical
bytes.
"""
from __future__ import annotations

import hashlib
import json
import pickle
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from . import homo as hm
from . import segnet as sn
from . import transform as tr

CKPT_VERSION = 1


class NumericalError(RuntimeError):
    """A loss term became non-finite; carries the offending term name."""


class CheckpointError(Exception):
    pass


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 3e-4
    lam_div: float = 0.1
    lam_bin: float = 0.1
    lam_area: float = 0.05
    lam_homo: float = 1.0
    lam_var: float = 0.1
    curriculum_threshold: int = -1      # -1: 30% of steps
    num_slots: int = 3
    latent_dim: int = 8
    m_var: float = 0.5
    # the cap must exceed the true background fraction of the scenes, or the
    # optimizer splits the background across slots and merges the objects
    a_max: float = 0.95
    l_max: float = 1.0
    unet_base: int = 32
    phi_width: int = 32
    seed: int = 0
    checkpoint_every: int = 1000
    phase2_steps: int = 2000
    phase2_lr: float = 3e-3
    dataset_path: str = ""

    def __post_init__(self):
        for name in ("lam_div", "lam_bin", "lam_area", "lam_homo", "lam_var"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.curriculum_threshold == -1:
            self.curriculum_threshold = int(round(0.3 * self.steps))
        if self.curriculum_threshold > self.steps:
            raise ValueError("curriculum_threshold must not exceed steps")


@dataclass
class Models:
    segnet: sn.MaskNet
    phi: tr.PhiEncoder
    rho: hm.RhoNet
    proj: hm.ScalarProj
    hw: tuple

    def named(self):
        return {"segnet": self.segnet, "phi": self.phi, "rho": self.rho, "proj": self.proj}

    def parameters(self):
        for m in self.named().values():
            yield from m.parameters()

    def train(self):
        for m in self.named().values():
            m.train()
        return self

    def eval(self):
        for m in self.named().values():
            m.eval()
        return self


def build_models(cfg: TrainConfig, hw) -> Models:
    torch.manual_seed(cfg.seed)
    segnet = sn.MaskNet(hw, num_slots=cfg.num_slots, base=cfg.unet_base)
    phi = tr.PhiEncoder(hw, l_max=cfg.l_max, width=cfg.phi_width)
    rho = hm.RhoNet(latent_dim=cfg.latent_dim)
    proj = hm.ScalarProj(latent_dim=cfg.latent_dim)
    return Models(segnet, phi, rho, proj, tuple(hw))


# ---------------------------------------------------------------------------
# data access
# ---------------------------------------------------------------------------

class FramePairs:
    """All consecutive (x_t, x_next) pairs of a list of episodes, in memory."""

    def __init__(self, episodes):
        if not episodes:
            raise ValueError("need at least one episode")
        self.frames = torch.from_numpy(
            np.concatenate([ep.frames for ep in episodes], axis=0))
        idx_t, idx_next = [], []
        offset = 0
        for ep in episodes:
            t = len(ep)
            idx_t.extend(range(offset, offset + t - 1))
            idx_next.extend(range(offset + 1, offset + t))
            offset += t
        self.idx_t = np.array(idx_t)
        self.idx_next = np.array(idx_next)
        self.hw = tuple(self.frames.shape[-2:])

    def __len__(self):
        return len(self.idx_t)

    def batch(self, indices):
        sel = np.asarray(indices)
        return self.frames[self.idx_t[sel]], self.frames[self.idx_next[sel]]


def step_rng(seed: int, step: int, stream: int = 0) -> np.random.Generator:
    """Stateless per-step RNG: a pure function of (seed, step, stream)."""
    return np.random.default_rng(np.random.SeedSequence([seed, stream, step]))


def sample_synthetic_params(rng, n, l_max, t_max=3.0, identity_frac=0.1) -> torch.Tensor:
    """Random in-range transforms for homomorphism pairs.

    Log scales stay within l_max/2 so any pairwise composition is in range;
    a fraction of exact identity elements anchors rho(e) to zero.
    """
    ls = rng.uniform(-l_max / 2, l_max / 2, size=(n, 2))
    t = rng.uniform(-t_max, t_max, size=(n, 2))
    g = np.concatenate([ls, t], axis=1)
    n_id = int(round(identity_frac * n))
    if n_id:
        g[rng.choice(n, size=n_id, replace=False)] = 0.0
    return torch.tensor(g, dtype=torch.float32)


# ---------------------------------------------------------------------------
# loss assembly
# ---------------------------------------------------------------------------

def slot_transforms(models: Models, x_t: torch.Tensor, x_next: torch.Tensor,
                    masks: torch.Tensor | None = None):
    """Masks and per-slot transform estimates for a batch of frame pairs."""
    if masks is None:
        masks = models.segnet(x_t)
    b, k = masks.shape[:2]
    c, h, w = x_t.shape[1:]
    slot_imgs = (x_t.unsqueeze(1) * masks.unsqueeze(2)).reshape(b * k, c, h, w)
    nxt = x_next.unsqueeze(1).expand(-1, k, -1, -1, -1).reshape(b * k, c, h, w)
    g = models.phi(slot_imgs, nxt).reshape(b, k, 4)
    return masks, g


def total_loss(models: Models, x_t: torch.Tensor, x_next: torch.Tensor,
               step: int, cfg: TrainConfig):
    """Full curriculum-gated objective.

    Returns (loss tensor, breakdown dict).  Breakdown entries are the
    weighted float64 contributions of each term plus their exact sum under
    "total"; the algebraic terms are exactly zero below the curriculum
    threshold.  Raises NumericalError naming the first non-finite term.
    """
    masks, g = slot_transforms(models, x_t, x_next)
    x_pred = sn.compose_prediction(x_t, masks, g)
    l_pred = sn.pred_recon_loss(x_pred, x_next)
    l_div, l_bin, l_area, _ = sn.seg_losses(
        masks, cfg.lam_div, cfg.lam_bin, cfg.lam_area, cfg.a_max)

    loss = (l_pred + cfg.lam_div * l_div + cfg.lam_bin * l_bin
            + cfg.lam_area * l_area)
    gated = step >= cfg.curriculum_threshold
    if gated:
        rng = step_rng(cfg.seed, step, stream=1)
        # algebraic constraints shape rho only; without the detach their
        # gradients reach the masks through the encoder and collapse the
        # segmentation by erasing transform diversity
        g_obs = g.reshape(-1, 4).detach()
        g_syn = sample_synthetic_params(rng, len(g_obs), cfg.l_max).to(g_obs.dtype)
        pool = torch.cat([g_obs, g_syn], dim=0)
        perm = torch.from_numpy(rng.permutation(len(pool)))
        half = len(pool) // 2
        g1, g2 = pool[perm[:half]], pool[perm[half:2 * half]]
        l_homo = hm.loss_homo(models.rho, g1, g2)
        l_var = hm.loss_var(models.rho(pool), cfg.m_var)
        loss = loss + cfg.lam_homo * l_homo + cfg.lam_var * l_var

    breakdown = {
        "pred_recon": float(l_pred.item()),
        "div": cfg.lam_div * float(l_div.item()),
        "bin": cfg.lam_bin * float(l_bin.item()),
        "area": cfg.lam_area * float(l_area.item()),
        "homo": cfg.lam_homo * float(l_homo.item()) if gated else 0.0,
        "var": cfg.lam_var * float(l_var.item()) if gated else 0.0,
    }
    for name, value in breakdown.items():
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss term: {name}")
    breakdown["total"] = float(sum(breakdown.values()))
    return loss, breakdown


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _to_numpy_tree(obj):
    if isinstance(obj, torch.Tensor):
        return {"__tensor__": True, "data": obj.detach().cpu().numpy().copy()}
    if isinstance(obj, dict):
        return {k: _to_numpy_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        out = [_to_numpy_tree(v) for v in obj]
        return out if isinstance(obj, list) else tuple(out)
    return obj


def _from_numpy_tree(obj):
    if isinstance(obj, dict):
        if obj.get("__tensor__") is True:
            return torch.from_numpy(obj["data"].copy())
        return {k: _from_numpy_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        out = [_from_numpy_tree(v) for v in obj]
        return out if isinstance(obj, list) else tuple(out)
    return obj


def checkpoint_state(models: Models, optimizer, step: int, cfg: TrainConfig,
                     phase: int = 1) -> dict:
    return {
        "format_version": CKPT_VERSION,
        "phase": phase,
        "step": step,
        "config": asdict(cfg),
        "hw": list(models.hw),
        "models": {name: _to_numpy_tree(m.state_dict()) for name, m in models.named().items()},
        "optimizer": _to_numpy_tree(optimizer.state_dict()) if optimizer is not None else None,
        "torch_rng": torch.get_rng_state().numpy().copy(),
    }


def save_checkpoint(state: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(pickle.dumps(state, protocol=4))


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        state = pickle.loads(path.read_bytes())
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    version = state.get("format_version")
    if version != CKPT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    return state


def restore_models(state: dict) -> tuple[Models, TrainConfig]:
    cfg = TrainConfig(**state["config"])
    models = build_models(cfg, tuple(state["hw"]))
    for name, m in models.named().items():
        m.load_state_dict(_from_numpy_tree(state["models"][name]))
    return models, cfg


def params_digest(*modules) -> str:
    """SHA-256 over parameter bytes, in state-dict order."""
    h = hashlib.sha256()
    for m in modules:
        for key, value in m.state_dict().items():
            h.update(key.encode())
            h.update(value.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _append_log(path, record):
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")


def train_phase1(cfg: TrainConfig, episodes, out_dir, resume_from=None,
                 log_name="loss_log.jsonl") -> dict:
    """Run phase-1 optimization; returns the final checkpoint state.

    Writes one JSONL loss record per step and periodic checkpoints into
    out_dir.  Deterministic given (cfg, seed, platform); resuming from a
    checkpoint reproduces the remaining loss log exactly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = FramePairs(episodes)

    if resume_from is not None:
        state = resume_from if isinstance(resume_from, dict) else load_checkpoint(resume_from)
        models, loaded_cfg = restore_models(state)
        if asdict(loaded_cfg) != asdict(cfg):
            raise CheckpointError("resume config differs from checkpoint config")
        optimizer = torch.optim.Adam(models.parameters(), lr=cfg.lr)
        optimizer.load_state_dict(_from_numpy_tree(state["optimizer"]))
        start = state["step"]
    else:
        models = build_models(cfg, pairs.hw)
        optimizer = torch.optim.Adam(models.parameters(), lr=cfg.lr)
        start = 0

    models.train()
    log_path = out_dir / log_name
    state = None
    for step in range(start, cfg.steps):
        t0 = time.perf_counter()
        idx = step_rng(cfg.seed, step).integers(0, len(pairs), cfg.batch_size)
        x_t, x_next = pairs.batch(idx)
        loss, breakdown = total_loss(models, x_t, x_next, step, cfg)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        record = {"step": step, **breakdown, "wall_time": time.perf_counter() - t0}
        _append_log(log_path, record)
        done = step + 1
        if done % cfg.checkpoint_every == 0 or done == cfg.steps:
            state = checkpoint_state(models, optimizer, done, cfg, phase=1)
            save_checkpoint(state, out_dir / f"checkpoint_{done:07d}.pkl")
            save_checkpoint(state, out_dir / "checkpoint_latest.pkl")
    if state is None:
        state = checkpoint_state(models, optimizer, cfg.steps, cfg, phase=1)
        save_checkpoint(state, out_dir / "checkpoint_latest.pkl")
    return state


def static_baseline(episodes) -> float:
    """Mean ||x_next - x_t||^2 of the dataset: the no-motion predictor."""
    pairs = FramePairs(episodes)
    total, count = 0.0, 0
    for lo in range(0, len(pairs), 256):
        sel = np.arange(lo, min(lo + 256, len(pairs)))
        x_t, x_next = pairs.batch(sel)
        total += float(((x_next - x_t) ** 2).mean(dim=(1, 2, 3)).sum())
        count += len(sel)
    return total / count


def slot_order_by_area(models: Models, pairs: FramePairs, sample_size=256, seed=0):
    """Dataset-level slot roles: background = largest mean mask area, then
    the two object slots ranked by area.  Ground truth is never consulted."""
    rng = np.random.default_rng(seed)
    sel = rng.choice(len(pairs), size=min(sample_size, len(pairs)), replace=False)
    x_t, _ = pairs.batch(sel)
    with torch.no_grad():
        masks = models.segnet(x_t)
    area = masks.mean(dim=(0, 2, 3)).numpy()
    order = np.argsort(-area)
    background = int(order[0])
    slot_a, slot_b = int(order[1]), int(order[2])
    return background, slot_a, slot_b


def relative_latents(models: Models, pairs: FramePairs, batch=128):
    """h_rel = rho(g_a^{-1} o g_b) over every frame pair, plus the raw
    relative transforms.  Computed under no_grad with frozen models."""
    bg, slot_a, slot_b = slot_order_by_area(models, pairs)
    hs, gs = [], []
    with torch.no_grad():
        for lo in range(0, len(pairs), batch):
            sel = np.arange(lo, min(lo + batch, len(pairs)))
            x_t, x_next = pairs.batch(sel)
            _, g = slot_transforms(models, x_t, x_next)
            g_rel = hm.rel_param(g[:, slot_a], g[:, slot_b])
            hs.append(models.rho(g_rel))
            gs.append(g_rel)
    return torch.cat(hs), torch.cat(gs)


def train_phase2_relational(cfg: TrainConfig, ckpt, episodes, out_dir,
                            log_name="loss_log_phase2.jsonl") -> dict:
    """Fit the scalar relation projection on frozen phase-1 representations.

    Only proj parameters receive updates; a digest of the frozen modules is
    checked before and after.  Returns the phase-2 checkpoint state with
    "frozen_digest" recorded.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = ckpt if isinstance(ckpt, dict) else load_checkpoint(ckpt)
    if state.get("phase") != 1:
        raise CheckpointError("phase-2 training requires a phase-1 checkpoint")
    models, _ = restore_models(state)
    models.eval()
    for name in ("segnet", "phi", "rho"):
        models.named()[name].requires_grad_(False)
    digest_before = params_digest(models.segnet, models.phi, models.rho)

    pairs = FramePairs(episodes)
    h_rel, _ = relative_latents(models, pairs)

    torch.manual_seed(cfg.seed + 1)
    optimizer = torch.optim.Adam(models.proj.parameters(), lr=cfg.phase2_lr)
    log_path = out_dir / log_name
    n = len(h_rel)
    for step in range(cfg.phase2_steps):
        t0 = time.perf_counter()
        rng = step_rng(cfg.seed, step, stream=2)
        i = rng.integers(0, n, cfg.batch_size)
        j = rng.integers(0, n, cfg.batch_size)
        h1, h2 = h_rel[i], h_rel[j]
        l_homo_s = hm.loss_homo_scalar(models.proj, h1, h2)
        l_var_s = hm.loss_var_scalar(models.proj(h1), cfg.m_var)
        loss = l_homo_s + cfg.lam_var * l_var_s
        if not torch.isfinite(loss):
            raise NumericalError("non-finite loss term: phase2")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        _append_log(log_path, {
            "step": step,
            "homo_scalar": float(l_homo_s.item()),
            "var_scalar": cfg.lam_var * float(l_var_s.item()),
            "total": float(l_homo_s.item()) + cfg.lam_var * float(l_var_s.item()),
            "wall_time": time.perf_counter() - t0,
        })

    digest_after = params_digest(models.segnet, models.phi, models.rho)
    if digest_before != digest_after:
        raise RuntimeError("frozen parameters changed during phase-2 training")
    state2 = checkpoint_state(models, optimizer, cfg.phase2_steps, cfg, phase=2)
    state2["frozen_digest"] = digest_after
    save_checkpoint(state2, out_dir / "checkpoint_relational.pkl")
    return state2


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def grad_check(loss_fn, parameters, eps: float = 1e-6, max_coords: int = 20,
               seed: int = 0) -> float:
    """Central finite differences vs autograd on a random coordinate subsample.

    loss_fn is a zero-argument callable re-evaluating the loss from the
    current parameter values.  Returns the max relative error.  Run in
    double precision; eps must be positive.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = [p for p in parameters if p.requires_grad]
    if not params:
        raise ValueError("no parameters require grad")
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        n = p.numel()
        count = min(max_coords, n)
        coords = rng.choice(n, size=count, replace=False)
        flat = p.data.view(-1)
        for c in coords:
            c = int(c)
            orig = flat[c].item()
            flat[c] = orig + eps
            f_plus = float(loss_fn().detach())
            flat[c] = orig - eps
            f_minus = float(loss_fn().detach())
            flat[c] = orig
            fd = (f_plus - f_minus) / (2 * eps)
            an = 0.0 if g is None else float(g.view(-1)[c])
            err = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
            worst = max(worst, err)
    return worst
