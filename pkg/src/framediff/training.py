"""Training loop, evaluation protocol and the scikit-learn style estimator."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import numcore as nc
from .config import RunConfig
from .curriculum import CurriculumScheduler
from .dfgn import (augment_text, denoise, embed_text, init_params, pack_guidance, read_checkpoint,
                   write_checkpoint)
from .diffusion import DiffusionSchedule, ddim_sample, forward_noise, masked_loss
from .masks import TASKS, ConditionMask, condense_to, make_condition_mask
from .metrics import FeatureSpec, psnr, toy_fvd
from .spritegen import MASK_TOKEN, SpriteClip
from .validation import check_rng

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "task", "n", "loss", "loss_dev", "p_star", "h_static", "h_adaptive", "h_raw",
               "h_realized")


@dataclass
class LogRow:
    step: int
    task: str
    n: int
    loss: float
    loss_dev: float
    p_star: float
    h_static: float
    h_adaptive: float
    h_raw: float
    h_realized: float


def log_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([getattr(r, c) if not isinstance(getattr(r, c), float) else repr(getattr(r, c))
                    for c in LOG_COLUMNS])
    return buf.getvalue()


def log_from_csv(text: str) -> list[LogRow]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append(LogRow(int(rec["step"]), rec["task"], int(rec["n"]),
                           *(float(rec[c]) for c in LOG_COLUMNS[3:])))
    return rows


def split_clips(clips, holdout: float):
    """Deterministic split by position: the trailing ``holdout`` fraction is held out."""
    n_train = len(clips) - int(round(holdout * len(clips)))
    return list(clips[:n_train]), list(clips[n_train:])


def text_tokens(clip: SpriteClip, cmask: ConditionMask, p: float, rng) -> np.ndarray:
    if not cmask.text_active:
        return np.full(len(clip.caption), MASK_TOKEN)
    return augment_text(clip.caption, p, rng) if p > 0 else np.asarray(clip.caption)


class Trainer:
    """Owns every piece of mutable training state; one call to :meth:`step` is one SGD update."""

    def __init__(self, cfg: RunConfig, clips):
        self.cfg = cfg.validate()
        self.clips = list(clips)
        if not self.clips:
            raise ValueError("training needs at least one clip")
        self.model_cfg = cfg.denoiser_config()
        self.sched = DiffusionSchedule.linear(cfg.t_max, cfg.beta_start, cfg.beta_end)
        seeds = np.random.SeedSequence(cfg.seed).spawn(2)
        self.params = init_params(self.model_cfg, np.random.default_rng(seeds[0]))
        self.rng = np.random.default_rng(seeds[1])
        self.curriculum = CurriculumScheduler(
            cfg.strategy, cfg.steps, cfg.n_min, cfg.n_max, lam=cfg.lam, kp=cfg.kp, ki=cfg.ki, kd=cfg.kd,
            delta=None if cfg.delta < 0 else cfg.delta, task_entropy=(cfg.h_ipt, cfg.h_pdt, cfg.h_grt))
        self.log: list[LogRow] = []
        self.resampled = 0
        lengths = np.array([c.frame_count for c in self.clips])
        self._by_min_length = {n: np.flatnonzero(lengths >= n) for n in range(cfg.n_min, cfg.n_max + 1)}

    @property
    def step_index(self) -> int:
        return self.curriculum.state.step

    def _draw_clip(self, n: int):
        pool = self._by_min_length.get(n)
        while pool is None or pool.size == 0:
            n -= 1
            if n < 3:
                raise ValueError("no clip has at least 3 frames")
            pool = self._by_min_length.get(n, np.flatnonzero([c.frame_count >= n for c in self.clips]))
        return self.clips[int(pool[self.rng.integers(pool.size)])], n

    def loss_and_grads(self, clip: SpriteClip, cmask: ConditionMask, tokens, t: int, eps):
        noisy = forward_noise(clip.frames, t, eps, self.sched)
        with nc.Tape() as tape:
            pack = pack_guidance(noisy.x_t, clip.frames, cmask, t, embed_text(tokens, self.params))
            loss = masked_loss(denoise(pack, self.params, self.model_cfg), eps, np.ones(clip.frame_count))
        return loss.item(), nc.backward(tape, loss, self.params)

    def step(self) -> LogRow:
        cfg = self.cfg
        plan = self.curriculum.plan(self.rng)
        total, grads = 0.0, None
        n_used = plan.n
        for _ in range(cfg.batch_size):
            clip, n_used = self._draw_clip(plan.n)
            if n_used != plan.n:
                self.resampled += 1
                log.info("step %d: no clip with %d frames, using N=%d", plan.step, plan.n, n_used)
            clip, _ = condense_to(clip, n_used, self.rng)
            cmask = make_condition_mask(plan.task, clip.frame_count, self.rng)
            tokens = text_tokens(clip, cmask, cfg.text_mask_p, self.rng)
            t = int(self.rng.integers(1, cfg.t_max + 1))
            eps = self.rng.standard_normal(clip.frames.shape)
            value, g = self.loss_and_grads(clip, cmask, tokens, t, eps)
            total += value
            grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
        loss = total / cfg.batch_size
        lr = cfg.lr / cfg.batch_size
        self.params = type(self.params)(
            (k, nc.Tensor(p.data - lr * grads[k], requires_grad=True, name=k)) for k, p in self.params.items())
        dev, p_star = self.curriculum.observe(loss)
        row = LogRow(plan.step, plan.task, n_used, loss, dev, p_star, plan.static_h, plan.adaptive_h,
                     plan.raw_h, plan.realized_h)
        self.log.append(row)
        return row

    def run(self, until: int | None = None, checkpoint_dir=None) -> list[LogRow]:
        until = self.cfg.steps if until is None else min(until, self.cfg.steps)
        every = self.cfg.checkpoint_every
        while self.step_index < until:
            self.step()
            if checkpoint_dir is not None and every and self.step_index % every == 0:
                self.save(Path(checkpoint_dir) / f"step{self.step_index:06d}.ckpt")
        return self.log

    # ---------------------------------------------------------- persistence

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        extra = {
            "run_config": asdict(self.cfg),
            "curriculum": self.curriculum.state.snapshot(),
            "rng": self.rng.bit_generator.state,
            "resampled": self.resampled,
        }
        write_checkpoint(path, self.params, self.cfg.hash(), extra)
        return path

    @classmethod
    def resume(cls, path, clips) -> "Trainer":
        params, header = read_checkpoint(path)
        cfg = RunConfig(**header["extra"]["run_config"]).validate()
        if cfg.hash() != header["config_hash"]:
            raise ValueError(f"{path}: config hash mismatch")
        tr = cls(cfg, clips)
        tr.params = params
        tr.curriculum.state.restore(header["extra"]["curriculum"])
        tr.rng.bit_generator.state = header["extra"]["rng"]
        tr.resampled = header["extra"]["resampled"]
        return tr


def load_model(path):
    """Parameters and run config from a checkpoint (for sampling and evaluation)."""
    params, header = read_checkpoint(path)
    cfg = RunConfig(**header["extra"]["run_config"]).validate()
    return params, cfg


# ------------------------------------------------------------------ sampling

def generate(params, cfg: RunConfig, task: str, frames, caption, seed, cmask: ConditionMask | None = None,
             reference=None) -> np.ndarray:
    """Sample a clip shaped like ``frames`` under ``task``; kept frames are pinned."""
    model_cfg = cfg.denoiser_config()
    sched = DiffusionSchedule.linear(cfg.t_max, cfg.beta_start, cfg.beta_end)
    rng = check_rng(seed)
    frames = np.asarray(frames, dtype=np.float64)
    if cmask is None:
        cmask = make_condition_mask(task, len(frames), rng)
    tokens = np.asarray(caption, dtype=np.int64) if cmask.text_active else np.full(len(caption), MASK_TOKEN)
    temb = embed_text(tokens, params)

    def predict(x_t, t):
        return denoise(pack_guidance(x_t, frames, cmask, t, temb, reference), params, model_cfg).data

    known = frames if reference is None else np.concatenate([np.asarray(reference)[None], frames[1:]])
    return ddim_sample(predict, frames.shape, sched, cfg.ddim_steps, rng, known=known, keep=cmask.keep)


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalItem:
    clip: SpriteClip
    cmask: ConditionMask
    t: int
    eps: np.ndarray


def eval_items(clips, cfg: RunConfig, seed: int = 12345) -> list[EvalItem]:
    """Fixed held-out probes: each clip (condensed to n_max) under every task at fixed t and noise."""
    rng = np.random.default_rng(seed)
    items = []
    for clip in list(clips)[: cfg.eval_clips]:
        clip, _ = condense_to(clip, cfg.n_max, rng)
        for task in TASKS:
            cmask = make_condition_mask(task, clip.frame_count, rng)
            for _ in range(cfg.eval_noise_draws):
                t = int(rng.integers(1, cfg.t_max + 1))
                items.append(EvalItem(clip, cmask, t, rng.standard_normal(clip.frames.shape)))
    return items


def eval_loss(params, cfg: RunConfig, items, per_task: bool = False):
    model_cfg = cfg.denoiser_config()
    sched = DiffusionSchedule.linear(cfg.t_max, cfg.beta_start, cfg.beta_end)
    sums = {t: [0.0, 0] for t in TASKS}
    for it in items:
        noisy = forward_noise(it.clip.frames, it.t, it.eps, sched)
        tokens = text_tokens(it.clip, it.cmask, 0.0, None)
        pack = pack_guidance(noisy.x_t, it.clip.frames, it.cmask, it.t, embed_text(tokens, params))
        value = masked_loss(denoise(pack, params, model_cfg), it.eps, np.ones(it.clip.frame_count)).item()
        sums[it.cmask.task][0] += value
        sums[it.cmask.task][1] += 1
    if per_task:
        return {t: (s / c if c else math.nan) for t, (s, c) in sums.items()}
    total = sum(s for s, _ in sums.values())
    count = sum(c for _, c in sums.values())
    return total / count


def reference_set(clips, cfg: RunConfig, seed: int = 999) -> list[SpriteClip]:
    """Held-out clips with at least ``eval_frames`` frames, condensed to exactly that many."""
    rng = np.random.default_rng(seed)
    out = []
    for clip in clips:
        if clip.frame_count >= cfg.eval_frames:
            out.append(condense_to(clip, cfg.eval_frames, rng)[0])
        if len(out) >= cfg.eval_clips:
            break
    return out


def evaluate(params, cfg: RunConfig, heldout, seed: int = 0, feature_dim: int = 16):
    """Rows (metric, task, value, n_generated, n_reference, seed) for toy_fvd, psnr and eval_loss."""
    refs = reference_set(heldout, cfg)
    need = feature_dim + 1
    if len(refs) < need:
        raise ValueError(f"held-out split has {len(refs)} clips with >= {cfg.eval_frames} frames; "
                         f"need at least {need} for the Gaussian fit")
    spec = FeatureSpec.create(refs[0].frames.size, feature_dim, seed=seed)
    losses = eval_loss(params, cfg, eval_items(heldout, cfg), per_task=True)
    rows = []
    for ti, task in enumerate(TASKS):
        mask_rng = np.random.default_rng([seed, ti])
        generated, scores = [], []
        for i, clip in enumerate(refs):
            cmask = make_condition_mask(task, clip.frame_count, mask_rng)
            out = generate(params, cfg, task, clip.frames, clip.caption, np.random.default_rng([seed, ti, i]),
                           cmask=cmask)
            generated.append(out)
            scores.append(psnr(out, clip.frames))
        fvd = toy_fvd(generated, [c.frames for c in refs], spec)
        finite = [s for s in scores if math.isfinite(s)]
        rows.append(("toy_fvd", task, fvd, len(generated), len(refs), seed))
        rows.append(("psnr", task, float(np.mean(finite)) if finite else math.inf, len(generated), len(refs), seed))
        rows.append(("eval_loss", task, losses[task], len(generated), len(refs), seed))
    return rows


def rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


EVAL_HEADER = ("metric", "task", "value", "n_generated", "n_reference", "seed")


# ----------------------------------------------------------------- estimator

class FrameDiffusion(BaseEstimator):
    """Masked multi-task frame diffusion model with a curriculum-driven training loop.

    Hyperparameters mirror :class:`RunConfig`; ``fit`` takes a list of
    :class:`SpriteClip`, ``sample`` draws a clip for one task and ``score``
    returns the negative held-out eval loss (higher is better).
    """

    def __init__(self, d=32, gamma=2, j=3, heads=1, blocks=2, temporal="sti", strategy="dcl", lam=0.7,
                 kp=1.0, ki=0.05, kd=0.25, lr=1e-3, steps=2000, t_max=200, ddim_steps=25,
                 n_min=3, n_max=12, random_state=0):
        self.d = d
        self.gamma = gamma
        self.j = j
        self.heads = heads
        self.blocks = blocks
        self.temporal = temporal
        self.strategy = strategy
        self.lam = lam
        self.kp = kp
        self.ki = ki
        self.kd = kd
        self.lr = lr
        self.steps = steps
        self.t_max = t_max
        self.ddim_steps = ddim_steps
        self.n_min = n_min
        self.n_max = n_max
        self.random_state = random_state

    def _run_config(self, clips) -> RunConfig:
        h, w, c = clips[0].frames.shape[1:]
        params = self.get_params()
        seed = params.pop("random_state")
        return RunConfig(height=h, width=w, channels=c, seed=int(seed or 0), ddim_steps=self.ddim_steps,
                         eval_frames=min(RunConfig.eval_frames, self.n_max),
                         **{k: v for k, v in params.items() if k != "ddim_steps"}).validate()

    def fit(self, X, y=None):
        clips = list(X)
        if not clips or not all(isinstance(c, SpriteClip) for c in clips):
            raise TypeError("fit expects a non-empty sequence of SpriteClip")
        self.config_ = self._run_config(clips)
        trainer = Trainer(self.config_, clips)
        trainer.run()
        self.params_ = trainer.params
        self.log_ = trainer.log
        self.loss_curve_ = [r.loss for r in trainer.log]
        return self

    def sample(self, task, frames, caption, random_state=None, cmask=None):
        check_is_fitted(self, "params_")
        return generate(self.params_, self.config_, task, frames, caption, check_rng(random_state), cmask=cmask)

    def score(self, X, y=None):
        check_is_fitted(self, "params_")
        return -eval_loss(self.params_, self.config_, eval_items(list(X), self.config_))
