"""Command-line entry point.

Subcommands mirror the two-phase experimental protocol:

    generate   build a dataset of simulated episodes (train + holdout split)
    train      phase-1 optimization (segmentation + transforms + latents)
    train-rel  phase-2 relational training on a frozen phase-1 checkpoint
    eval       metrics report and plots on held-out episodes
    viz        render dataset / prediction strips without computing metrics

Exit codes: 0 success, 2 config error, 3 missing input artifact,
4 numerical failure.  Every run writes its fully resolved config beside
its outputs.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relmotion",
        description="Simulated chaser/evader scenes: unsupervised segmentation "
                    "and relational motion learning.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in [
        ("generate", "generate a simulated dataset"),
        ("train", "run phase-1 training"),
        ("train-rel", "run phase-2 relational training"),
        ("eval", "evaluate a checkpoint on held-out episodes"),
        ("viz", "render episode and mask visualizations"),
    ]:
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", type=str, default=None, help="INI config file")
        p.add_argument("--seed", type=int, default=None, help="global seed override")
        p.add_argument("--out", type=str, default=None,
                       help="output directory override for this command")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    return parser


def _episode_seeds(base: int, count: int) -> list[int]:
    return [base * 100_003 + i for i in range(count)]


def cmd_generate(cfg, out_dir) -> int:
    from . import dataset as ds
    from . import sim

    root = Path(out_dir or cfg.dataset_dir)
    seeds = _episode_seeds(cfg.seed, cfg.episodes + cfg.holdout_episodes)
    episodes = [sim.generate_episode(replace(cfg.sim, seed=s)) for s in seeds]
    ds.write_dataset(episodes[:cfg.episodes], root / "train")
    if cfg.holdout_episodes:
        ds.write_dataset(episodes[cfg.episodes:], root / "holdout")
    from .config import write_resolved
    write_resolved(cfg, root)
    events = sum(len(ep.events) for ep in episodes)
    print(f"wrote {cfg.episodes} train + {cfg.holdout_episodes} holdout episodes "
          f"({events} collision events) to {root}")
    return EXIT_OK


def _load_split(cfg, split: str):
    from . import dataset as ds
    path = Path(cfg.dataset_dir) / split
    return ds.read_dataset(path)


def cmd_train(cfg, out_dir) -> int:
    from . import train as tn
    from .config import write_resolved

    episodes = _load_split(cfg, "train")
    run_dir = Path(out_dir or cfg.checkpoint_dir)
    write_resolved(cfg, run_dir)
    state = tn.train_phase1(cfg.train, episodes, run_dir)
    print(f"phase-1 training finished at step {state['step']}; "
          f"checkpoints in {run_dir}")
    return EXIT_OK


def cmd_train_rel(cfg, out_dir) -> int:
    from . import train as tn
    from .config import write_resolved

    episodes = _load_split(cfg, "train")
    ckpt_path = Path(cfg.checkpoint_dir) / "checkpoint_latest.pkl"
    state = tn.load_checkpoint(ckpt_path)
    run_dir = Path(out_dir or cfg.checkpoint_dir)
    write_resolved(cfg, run_dir)
    state2 = tn.train_phase2_relational(cfg.train, state, episodes, run_dir)
    print(f"phase-2 relational training finished; frozen digest "
          f"{state2['frozen_digest'][:12]}; checkpoint in {run_dir}")
    return EXIT_OK


def _load_eval_models(cfg):
    from . import train as tn
    ckpt_dir = Path(cfg.checkpoint_dir)
    rel = ckpt_dir / "checkpoint_relational.pkl"
    path = rel if rel.exists() else ckpt_dir / "checkpoint_latest.pkl"
    state = tn.load_checkpoint(path)
    models, _ = tn.restore_models(state)
    return models.eval(), path


def cmd_eval(cfg, out_dir) -> int:
    import torch

    from . import metrics as mt
    from .config import write_resolved

    episodes = _load_split(cfg, "holdout")
    models, ckpt_path = _load_eval_models(cfg)
    report = mt.evaluate_checkpoint(models, episodes)
    report.checkpoint_id = str(ckpt_path)
    report.config = {"seed": cfg.seed}
    ep = episodes[0]
    picks = np.linspace(0, len(ep) - 1, num=min(8, len(ep)), dtype=int)
    with torch.no_grad():
        pred = models.segnet(torch.from_numpy(ep.frames[picks])).numpy()
    viz = {"frames": ep.frames[picks], "pred_masks": pred, "gt_masks": ep.gt_masks[picks]}
    report_dir = Path(out_dir or cfg.report_dir)
    written = mt.emit_report(report, report_dir, viz=viz)
    write_resolved(cfg, report_dir)
    spear = "n/a" if report.spearman is None else f"{report.spearman:+.3f}"
    print(f"ari_mean={report.ari_mean} degeneracy={report.degeneracy_rate:.3f} "
          f"spearman={spear} homo_residual={report.homo_residual:.4g}")
    print("wrote " + ", ".join(str(p) for p in written))
    return EXIT_OK


def cmd_viz(cfg, out_dir) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .config import write_resolved

    episodes = _load_split(cfg, "holdout")
    ep = episodes[0]
    picks = np.linspace(0, len(ep) - 1, num=min(10, len(ep)), dtype=int)
    report_dir = Path(out_dir or cfg.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, len(picks), figsize=(1.6 * len(picks), 1.8))
    for ax, t in zip(np.atleast_1d(axes), picks):
        ax.imshow(ep.frames[t].transpose(1, 2, 0))
        ax.set_title(f"t={t}", fontsize=7)
        ax.set_axis_off()
    path = report_dir / "episode_strip.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    write_resolved(cfg, report_dir)
    print(f"wrote {path}")
    return EXIT_OK


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "train-rel": cmd_train_rel,
    "eval": cmd_eval,
    "viz": cmd_viz,
}


def main(argv=None) -> int:
    from . import dataset as ds
    from . import train as tn
    from .config import ConfigError, parse_config, render_resolved

    args = _build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, overrides=args.overrides, seed=args.seed)
        print(render_resolved(cfg), end="")
        return _COMMANDS[args.command](cfg, args.out)
    except (ConfigError, ValueError) as exc:
        print(f"error(config): {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ds.DatasetError, tn.CheckpointError) as exc:
        print(f"error(missing-artifact): {exc}", file=sys.stderr)
        return EXIT_MISSING
    except tn.NumericalError as exc:
        print(f"error(numerical): {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
