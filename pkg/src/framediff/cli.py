"""Command line entry point: gen-data, train, sample, eval, ablate, inspect-curriculum.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .curriculum import CurriculumScheduler
from .dfgn import fit_reference
from .masks import TASKS, condense_to, make_condition_mask
from .metrics import smoothness
from .spritegen import (DatasetError, generate_dataset, read_dataset, read_pnm,
                        tokens_from_names, write_dataset, write_pnm)
from .training import (EVAL_HEADER, LogRow, Trainer, eval_items, eval_loss, evaluate, generate, load_model,
                       log_from_csv, log_to_csv, rows_to_csv, split_clips)

log = logging.getLogger("framediff")


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed).validate()
    return cfg


def _out(args) -> Path:
    if not args.out:
        raise UsageError("--out DIR is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    manifest, clips = generate_dataset(cfg.count, cfg.sprite_config(), cfg.seed)
    out = _out(args)
    write_dataset(manifest, clips, out)
    (out / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
    print((out / "manifest.tsv").read_text(encoding="utf-8"), end="")
    return 0


def _dataset_split(data_dir, cfg: RunConfig):
    _, clips = read_dataset(data_dir)
    return split_clips(clips, cfg.holdout)


def cmd_train(args) -> int:
    out = _out(args)
    if args.resume:
        _, ckpt_cfg = load_model(args.resume)
        train, _ = _dataset_split(args.data, ckpt_cfg)
        trainer = Trainer.resume(args.resume, train)
        previous = out / "train_log.csv"
        if previous.exists():
            trainer.log = [r for r in log_from_csv(previous.read_text(encoding="utf-8"))
                           if r.step < trainer.step_index]
    else:
        cfg = _config(args)
        train, _ = _dataset_split(args.data, cfg)
        trainer = Trainer(cfg, train)
    (out / "config.txt").write_text(trainer.cfg.dumps(), encoding="utf-8")
    trainer.run(until=args.steps, checkpoint_dir=out / "checkpoints")
    trainer.save(out / "final.ckpt")
    (out / "train_log.csv").write_text(log_to_csv(trainer.log), encoding="utf-8")
    last = trainer.log[-1] if trainer.log else None
    if last is not None:
        print(f"trained {trainer.step_index} steps; last loss {last.loss:.6f}; "
              f"resampled lengths {trainer.resampled}")
    return 0


def _guidance(args, cfg: RunConfig, n_frames: int):
    """Frames, caption tokens and optional reference image for ``sample``."""
    clip = None
    if args.data and args.clip_id:
        manifest, clips = read_dataset(args.data)
        ids = [r.clip_id for r in manifest.records]
        if args.clip_id not in ids:
            raise UsageError(f"clip id {args.clip_id!r} not in {args.data}")
        clip = clips[ids.index(args.clip_id)]
    caption = tokens_from_names(args.caption.split(",")) if args.caption else (
        list(clip.caption) if clip is not None else None)
    if args.task in ("IPT", "PDT"):
        if clip is None:
            raise UsageError(f"{args.task} needs --data and --clip-id for the guidance clip")
        if clip.frame_count < n_frames:
            raise UsageError(f"clip {args.clip_id} has {clip.frame_count} frames; {n_frames} needed")
        clip, _ = condense_to(clip, n_frames, np.random.default_rng(cfg.seed))
        return clip.frames, caption, None
    if caption is None:
        raise UsageError("GRT needs --caption or --data/--clip-id")
    if args.reference:
        reference = read_pnm(args.reference)
    elif clip is not None:
        reference = clip.frames[0]
    else:
        raise UsageError("GRT needs a reference frame (--reference or --data/--clip-id)")
    frames = np.zeros((n_frames, cfg.height, cfg.width, cfg.channels))
    if reference.shape[2] != cfg.channels:
        raise UsageError(f"reference has {reference.shape[2]} channels, model expects {cfg.channels}")
    frames[0] = fit_reference(reference, cfg.height, cfg.width)
    return frames, caption, None


def cmd_sample(args) -> int:
    params, cfg = load_model(args.checkpoint)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.task not in TASKS:
        raise UsageError(f"task must be one of {TASKS}")
    if not 3 <= args.frames <= cfg.n_max:
        raise UsageError(f"--frames must lie in [3, {cfg.n_max}] for this checkpoint, got {args.frames}")
    frames, caption, reference = _guidance(args, cfg, args.frames)
    rng = np.random.default_rng(cfg.seed)
    cmask = make_condition_mask(args.task, len(frames), rng)
    clip = generate(params, cfg, args.task, frames, caption, rng, cmask=cmask, reference=reference)
    out = _out(args)
    for i, frame in enumerate(clip):
        write_pnm(out / f"sample_{i:03d}.pnm", frame)
    keep = "".join("1" if k else "0" for k in cmask.keep)
    line = "\t".join(["sample", str(len(clip)), args.task, ",".join(str(t) for t in caption), keep, "sample"])
    with open(out / "manifest.tsv", "a", encoding="utf-8") as fh:
        fh.write(line + "\n")
    print(line)
    return 0


def cmd_eval(args) -> int:
    params, cfg = load_model(args.checkpoint)
    _, heldout = _dataset_split(args.data, cfg)
    seed = cfg.seed if args.seed is None else args.seed
    rows = evaluate(params, cfg, heldout, seed=seed)
    text = rows_to_csv(EVAL_HEADER, rows)
    if args.out:
        (_out(args) / "eval.csv").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


ABLATE_HEADER = ("temporal", "strategy", "eval_loss", "toy_fvd", "smoothness", "seeds")


def run_cell(cfg: RunConfig, train, heldout, items):
    trainer = Trainer(cfg, train)
    trainer.run()
    loss = eval_loss(trainer.params, cfg, items)
    rows = evaluate(trainer.params, cfg, heldout, seed=0)
    fvd = next(v for m, t, v, *_ in rows if m == "toy_fvd" and t == "GRT")
    smooth = smoothness([r.loss for r in trainer.log], cfg.smooth_window)
    return loss, fvd, smooth


def ablate(cfg: RunConfig, seeds=(0, 1, 2), temporals=("sti", "conv3d"), strategies=("none", "lcl", "dcl")):
    """Median (eval_loss, toy_fvd, smoothness) per (temporal, strategy) cell over ``seeds``."""
    _, clips = generate_dataset(cfg.count, cfg.sprite_config(), cfg.seed)
    train, heldout = split_clips(clips, cfg.holdout)
    items = eval_items(heldout, cfg)
    table = []
    for temporal in temporals:
        for strategy in strategies:
            runs = []
            for s in seeds:
                cell_cfg = replace(cfg, temporal=temporal, strategy=strategy, seed=int(s)).validate()
                runs.append(run_cell(cell_cfg, train, heldout, items))
                log.info("ablate %s/%s seed %d: %s", temporal, strategy, s, runs[-1])
            med = np.median(np.array(runs), axis=0)
            table.append((temporal, strategy, float(med[0]), float(med[1]), float(med[2]),
                          " ".join(str(s) for s in seeds), runs))
    return table


def cmd_ablate(args) -> int:
    cfg = _config(args)
    seeds = tuple(cfg.seed + i for i in range(args.seeds))
    table = ablate(cfg, seeds)
    text = rows_to_csv(ABLATE_HEADER, [row[:6] for row in table])
    if args.out:
        (_out(args) / "ablate.csv").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def synthetic_loss(step: int, total: int, task: str, n: int, rng) -> float:
    """Stand-in loss for curriculum inspection: decays with training, grows with difficulty."""
    difficulty = TASKS.index(task) + np.log(n)
    return float(0.5 * np.exp(-4.0 * step / total) + 0.05 * difficulty + 0.02 * rng.standard_normal())


def curriculum_trace(cfg: RunConfig) -> list[LogRow]:
    sched = CurriculumScheduler(cfg.strategy, cfg.steps, cfg.n_min, cfg.n_max, lam=cfg.lam, kp=cfg.kp,
                                ki=cfg.ki, kd=cfg.kd, delta=None if cfg.delta < 0 else cfg.delta,
                                task_entropy=(cfg.h_ipt, cfg.h_pdt, cfg.h_grt))
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for step in range(cfg.steps):
        plan = sched.plan(rng)
        loss = synthetic_loss(step, cfg.steps, plan.task, plan.n, rng)
        dev, p_star = sched.observe(loss)
        rows.append(LogRow(step, plan.task, plan.n, loss, dev, p_star, plan.static_h, plan.adaptive_h,
                           plan.raw_h, plan.realized_h))
    return rows


INSPECT_COLUMNS = ("step", "loss", "loss_dev", "p_star", "h_static", "h_adaptive", "h_raw", "h_realized",
                   "task", "n")


def cmd_inspect_curriculum(args) -> int:
    if args.log:
        rows = log_from_csv(Path(args.log).read_text(encoding="utf-8"))
    else:
        rows = curriculum_trace(_config(args))
    text = rows_to_csv(INSPECT_COLUMNS, [tuple(getattr(r, c) for c in INSPECT_COLUMNS) for r in rows])
    if args.out:
        (_out(args) / "curriculum.csv").write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="framediff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", help="flat key = value configuration file")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", required=out_required, help="output directory")
        return p

    p = common(sub.add_parser("gen-data", help="write a procedural sprite dataset"), out_required=True)
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train", help="train a denoiser"), out_required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--steps", type=int, help="stop after this many total steps")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("sample", help="sample a clip from a checkpoint"), out_required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--data")
    p.add_argument("--clip-id")
    p.add_argument("--caption", help="comma-separated token names, e.g. RED,CIRCLE,BOUNCE")
    p.add_argument("--reference", help="reference frame as a binary pixmap")
    p.add_argument("--frames", type=int, default=8)
    p.set_defaults(func=cmd_sample)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint on the held-out split"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("ablate", help="temporal layer x curriculum strategy sweep"))
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("inspect-curriculum", help="dump a curriculum trace as CSV"))
    p.add_argument("--log", help="train_log.csv to re-dump instead of simulating")
    p.set_defaults(func=cmd_inspect_curriculum)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DatasetError, ValueError, OSError, RuntimeError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
