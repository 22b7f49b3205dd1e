"""Quantitative evaluation against simulator ground truth.

Segmentation quality is scored with a foreground-restricted adjusted Rand
index and best-matched IoU, failure modes with a degeneracy rate, and the
relation axis with Spearman rank correlation between the learned scalar
and the ground-truth change in inter-agent distance.  PCA of the relative
latents supplies the 2D visualization data.

The ARI and Spearman implementations are exact and are cross-checked in
the tests against brute-force pair-counting / O(n^2) rank oracles.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from itertools import permutations
from pathlib import Path

import numpy as np
import torch

from . import homo as hm
from . import train as tn
from .sim import Episode

SCHEMA_VERSION = 1


def harden(pred_masks: np.ndarray) -> np.ndarray:
    """Per-pixel argmax slot labels from soft masks (K, H, W) -> (H, W)."""
    return np.asarray(pred_masks).argmax(axis=0)


def _gt_labels(gt_masks: np.ndarray):
    """Foreground pixel selector and object labels; doubly-owned pixels go
    to the lower object index."""
    gt = np.asarray(gt_masks).astype(bool)
    fg = gt.any(axis=0)
    labels = np.zeros(gt.shape[1:], dtype=int)
    for i in range(gt.shape[0] - 1, -1, -1):
        labels[gt[i]] = i
    return fg, labels


def ari_from_labels(a: np.ndarray, b: np.ndarray) -> float:
    """Adjusted Rand index between two label vectors via the contingency table."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    n = len(a)
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((len(ua), len(ub)), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_ij = comb2(table).sum()
    sum_a = comb2(table.sum(axis=1)).sum()
    sum_b = comb2(table.sum(axis=0)).sum()
    total = comb2(n)
    expected = sum_a * sum_b / total if total > 0 else 0.0
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        return 1.0  # both clusterings trivial; perfect agreement by convention
    return float((sum_ij - expected) / (max_index - expected))


def foreground_ari(pred_masks: np.ndarray, gt_masks: np.ndarray) -> float | None:
    """ARI between hardened slots and ground-truth objects over foreground
    pixels only; None when the frame has no foreground."""
    if pred_masks.shape[-2:] != gt_masks.shape[-2:]:
        raise ValueError("resolution mismatch between prediction and ground truth")
    fg, labels = _gt_labels(gt_masks)
    if not fg.any():
        return None
    pred = harden(pred_masks)
    return ari_from_labels(labels[fg], pred[fg])


def matched_iou(pred_masks: np.ndarray, gt_masks: np.ndarray):
    """Best assignment of slots to ground-truth objects maximizing total IoU.

    Exhaustive over slot permutations (K <= 4 in practice).  Returns
    (per-object IoU array, tuple of matched slot indices).
    """
    pred = harden(pred_masks)
    k = pred_masks.shape[0]
    gt = np.asarray(gt_masks).astype(bool)
    n_obj = gt.shape[0]
    iou = np.zeros((n_obj, k))
    for i in range(n_obj):
        for j in range(k):
            pj = pred == j
            inter = (gt[i] & pj).sum()
            union = (gt[i] | pj).sum()
            iou[i, j] = inter / union if union else 0.0
    best, best_perm = -1.0, None
    for perm in permutations(range(k), n_obj):
        score = sum(iou[i, j] for i, j in enumerate(perm))
        if score > best:
            best, best_perm = score, perm
    return np.array([iou[i, j] for i, j in enumerate(best_perm)]), best_perm


def frame_is_degenerate(pred_masks: np.ndarray, gt_masks: np.ndarray) -> bool:
    """True when one slot holds at least half the pixels of two or more
    distinct objects (the boundary case counts as degenerate)."""
    pred = harden(pred_masks)
    gt = np.asarray(gt_masks).astype(bool)
    k = pred_masks.shape[0]
    for j in range(k):
        owned = 0
        pj = pred == j
        for i in range(gt.shape[0]):
            size = gt[i].sum()
            if size and (gt[i] & pj).sum() >= 0.5 * size:
                owned += 1
        if owned >= 2:
            return True
    return False


def degeneracy_rate(pred_seq, gt_seq) -> float:
    flags = [frame_is_degenerate(p, g) for p, g in zip(pred_seq, gt_seq)]
    return float(np.mean(flags)) if flags else 0.0


def homo_residual(rho, pair_sampler, n_pairs: int = 512) -> float:
    """Mean homomorphism residual over held-out pairs from pair_sampler,
    a callable n -> (g1, g2)."""
    g1, g2 = pair_sampler(n_pairs)
    with torch.no_grad():
        return float(hm.loss_homo(rho, g1, g2).item())


def _ranks(x: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing their mean rank."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def relation_monotonicity(s_values, delta_dist) -> float | None:
    """Spearman rank correlation between the relation scalar and the
    ground-truth distance change; None for constant inputs."""
    s = np.asarray(s_values, dtype=float)
    d = np.asarray(delta_dist, dtype=float)
    if len(s) != len(d):
        raise ValueError("paired samples required")
    if len(s) < 10:
        raise ValueError("need at least 10 paired samples")
    if np.all(s == s[0]) or np.all(d == d[0]):
        return None
    rs, rd = _ranks(s), _ranks(d)
    rs = rs - rs.mean()
    rd = rd - rd.mean()
    return float((rs @ rd) / np.sqrt((rs @ rs) * (rd @ rd)))


def pca2(vectors: np.ndarray):
    """Top-2 principal components with a deterministic sign convention.

    Returns (coords (n, 2), explained-variance ratios (2,), axes (2, k)).
    Axes are eigenvectors of the covariance sorted by descending eigenvalue,
    each flipped so its first non-negligible component is positive.
    """
    x = np.asarray(vectors, dtype=float)
    if x.ndim != 2 or x.shape[0] < 3 or x.shape[1] < 2:
        raise ValueError("need at least 3 vectors of dimension >= 2")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    if eigvals[0] <= 1e-15:
        raise ValueError("rank-0 data: no variance to decompose")
    axes = eigvecs[:, order[:2]].T.copy()
    for i in range(2):
        nz = np.nonzero(np.abs(axes[i]) > 1e-12)[0]
        if len(nz) and axes[i, nz[0]] < 0:
            axes[i] = -axes[i]
    coords = centered @ axes.T
    ratios = eigvals[:2] / eigvals.sum()
    return coords, ratios, axes


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    schema_version: int = SCHEMA_VERSION
    checkpoint_id: str = ""
    config: dict = field(default_factory=dict)
    ari_per_episode: list = field(default_factory=list)
    ari_mean: float | None = None
    iou_per_object: list = field(default_factory=list)
    degeneracy_rate: float | None = None
    homo_residual: float | None = None
    rho_identity_norm: float | None = None
    spearman: float | None = None
    sign_accuracy: float | None = None
    pca_coords: list | None = None
    pca_explained: list | None = None
    scalar_values: list | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, payload: str) -> "MetricsReport":
        return cls(**json.loads(payload))


def evaluate_checkpoint(models, episodes: list[Episode], max_frames_per_episode=None):
    """Segmentation and relation metrics of a model bundle on held-out episodes."""
    report = MetricsReport()
    aris, iou_sum = [], np.zeros(2)
    iou_count = 0
    degen_flags = []
    all_h, all_s, all_dd = [], [], []
    models.eval()
    pairs = tn.FramePairs(episodes)
    h_rel, _ = tn.relative_latents(models, pairs)
    with torch.no_grad():
        s_all = models.proj(h_rel).numpy()
    # frame-pair index bookkeeping mirrors FramePairs construction
    cursor = 0
    for ep in episodes:
        frames = torch.from_numpy(ep.frames)
        t_use = len(ep) if max_frames_per_episode is None else min(len(ep), max_frames_per_episode)
        with torch.no_grad():
            masks = models.segnet(frames[:t_use]).numpy()
        ep_aris = []
        for t in range(t_use):
            a = foreground_ari(masks[t], ep.gt_masks[t])
            if a is not None:
                ep_aris.append(a)
            degen_flags.append(frame_is_degenerate(masks[t], ep.gt_masks[t]))
            iou, _ = matched_iou(masks[t], ep.gt_masks[t])
            iou_sum += iou
            iou_count += 1
        if ep_aris:
            aris.append(float(np.mean(ep_aris)))
        d = np.linalg.norm(ep.pos[:, 1] - ep.pos[:, 0], axis=1)
        dd = d[1:] - d[:-1]
        n_pairs_ep = len(ep) - 1
        all_h.append(h_rel[cursor:cursor + n_pairs_ep].numpy())
        all_s.append(s_all[cursor:cursor + n_pairs_ep])
        all_dd.append(dd)
        cursor += n_pairs_ep

    report.ari_per_episode = aris
    report.ari_mean = float(np.mean(aris)) if aris else None
    report.iou_per_object = [float(v) for v in iou_sum / max(iou_count, 1)]
    report.degeneracy_rate = float(np.mean(degen_flags))

    def held_out_sampler(n, _seed=98765):
        rng = np.random.default_rng(_seed)
        g1 = tn.sample_synthetic_params(rng, n, l_max=1.0)
        g2 = tn.sample_synthetic_params(rng, n, l_max=1.0)
        return g1, g2

    report.homo_residual = homo_residual(models.rho, held_out_sampler)
    with torch.no_grad():
        report.rho_identity_norm = float(models.rho(torch.zeros(1, 4)).norm().item())

    s = np.concatenate(all_s)
    dd = np.concatenate(all_dd)
    report.spearman = relation_monotonicity(s, dd) if len(s) >= 10 else None
    moving = np.abs(dd) > 1e-9
    if moving.any() and report.spearman is not None:
        agree = np.sign(s[moving]) == np.sign(dd[moving])
        acc = float(np.mean(agree))
        report.sign_accuracy = max(acc, 1.0 - acc)  # axis orientation is arbitrary
    h_cat = np.concatenate(all_h)
    try:
        coords, ratios, _ = pca2(h_cat)
        report.pca_coords = coords.round(6).tolist()
        report.pca_explained = ratios.round(6).tolist()
    except ValueError:
        pass
    report.scalar_values = s.round(6).tolist()
    return report


def emit_report(report: MetricsReport, out_dir, viz=None) -> list[Path]:
    """Write metrics.json plus plot images; returns the written paths.

    viz, when given, is a dict with "frames" (N, 3, H, W), "pred_masks"
    (N, K, H, W) and optional "gt_masks" used for the mask-overlay strip.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"report directory not writable: {out_dir}: {exc}") from exc

    written = []
    metrics_path = out_dir / "metrics.json"
    metrics_path.write_text(report.to_json())
    written.append(metrics_path)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if report.pca_coords is not None and report.scalar_values is not None:
        coords = np.asarray(report.pca_coords)
        s = np.asarray(report.scalar_values)
        fig, ax = plt.subplots(figsize=(6, 5))
        sc = ax.scatter(coords[:, 0], coords[:, 1], c=s, cmap="coolwarm", s=12)
        fig.colorbar(sc, ax=ax, label="relation scalar s")
        evr = report.pca_explained or [float("nan")] * 2
        ax.set_xlabel(f"PC1 ({evr[0]:.0%} var)")
        ax.set_ylabel(f"PC2 ({evr[1]:.0%} var)")
        ax.set_title("relative-motion latents, colored by relation scalar")
        path = out_dir / "pca_scatter.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

    if viz is not None:
        frames = np.asarray(viz["frames"])
        pred = np.asarray(viz["pred_masks"])
        n = frames.shape[0]
        rows = 2 + (1 if "gt_masks" in viz else 0)
        fig, axes = plt.subplots(rows, n, figsize=(1.6 * n, 1.7 * rows))
        axes = np.atleast_2d(axes)
        slot_colors = np.array([[0.9, 0.2, 0.2], [0.2, 0.5, 0.95], [0.2, 0.85, 0.3],
                                [0.95, 0.8, 0.2]])
        for i in range(n):
            axes[0, i].imshow(frames[i].transpose(1, 2, 0))
            hard = pred[i].argmax(axis=0)
            axes[1, i].imshow(slot_colors[hard % len(slot_colors)])
            if rows == 3:
                gt = np.asarray(viz["gt_masks"][i])
                canvas = np.zeros((*gt.shape[1:], 3))
                for k in range(gt.shape[0]):
                    canvas[gt[k]] = slot_colors[k]
                axes[2, i].imshow(canvas)
            for r in range(rows):
                axes[r, i].set_axis_off()
        for r, label in zip(range(rows), ["frame", "slots", "ground truth"]):
            axes[r, 0].set_title(label, loc="left", fontsize=8)
        path = out_dir / "mask_strips.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    return written
