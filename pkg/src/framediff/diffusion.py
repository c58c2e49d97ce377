"""Forward noising, the frame-masked noise-prediction loss, and a deterministic DDIM sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numcore as nc
from .validation import check_rng


@dataclass(frozen=True)
class DiffusionSchedule:
    """Cumulative signal coefficients alpha_bar[0..T_max] with alpha_bar[0] = 1.

    The linear beta ramp is rescaled by 1000 / T_max so short schedules still
    end close to pure noise.
    """

    alpha_bar: np.ndarray

    @classmethod
    def linear(cls, steps: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> "DiffusionSchedule":
        if steps < 1:
            raise ValueError("diffusion needs at least one step")
        if not 0 < beta_start <= beta_end:
            raise ValueError(f"bad beta range [{beta_start}, {beta_end}]")
        scale = 1000.0 / steps
        betas = np.linspace(beta_start * scale, min(beta_end * scale, 0.999), steps)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(alpha_bar)

    @property
    def steps(self) -> int:
        return len(self.alpha_bar) - 1

    def __getitem__(self, t) -> float:
        return float(self.alpha_bar[t])


@dataclass(frozen=True)
class NoisySample:
    x_t: np.ndarray
    t: int
    eps: np.ndarray


def forward_noise(x, t: int, eps, sched: DiffusionSchedule) -> NoisySample:
    x, eps = np.asarray(x, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError(f"forward_noise: x {x.shape} and noise {eps.shape} differ")
    if not 0 <= t <= sched.steps:
        raise ValueError(f"forward_noise: t={t} outside [0, {sched.steps}]")
    ab = sched[t]
    return NoisySample(np.sqrt(ab) * x + np.sqrt(1.0 - ab) * eps, t, eps)


def masked_loss(eps_hat, eps, loss_mask) -> nc.Tensor:
    """Mean squared error over the elements of frames whose loss weight is 1."""
    eps_hat = nc.as_tensor(eps_hat)
    eps = np.asarray(eps, dtype=np.float64)
    w = np.asarray(getattr(loss_mask, "weight", loss_mask), dtype=np.float64)
    if eps_hat.shape != eps.shape:
        raise ValueError(f"masked_loss: prediction {eps_hat.shape} vs target {eps.shape}")
    if w.shape != (eps.shape[0],):
        raise ValueError(f"masked_loss: mask length {w.shape} vs {eps.shape[0]} frames")
    active = float(w.sum())
    if active <= 0:
        raise ValueError("masked_loss: loss mask has no active frames")
    diff = nc.sub(eps_hat, eps)
    plane = w.reshape((-1,) + (1,) * (eps.ndim - 1))
    sq = nc.mul(nc.mul(diff, diff), plane)
    per_frame = int(np.prod(eps.shape[1:]))
    return nc.scale(nc.sum(sq), 1.0 / (active * per_frame))


def ddim_timesteps(steps: int, n_steps: int) -> np.ndarray:
    """Evenly spaced decreasing sub-schedule from ``steps`` down to 0 (n_steps transitions)."""
    if not 1 <= n_steps <= steps:
        raise ValueError(f"DDIM needs 1 <= n_steps <= {steps}, got {n_steps}")
    return np.unique(np.rint(np.linspace(0, steps, n_steps + 1)).astype(int))[::-1]


def ddim_sample(denoiser: Callable, shape, sched: DiffusionSchedule, n_steps: int, rng=None, *,
                x_init=None, known=None, keep=None) -> np.ndarray:
    """Deterministic DDIM (eta = 0).

    ``denoiser(x_t, t)`` returns the predicted noise.  When ``known`` and a
    boolean ``keep`` over frames are given, kept frames are re-noised to the
    current level after every step and copied exactly into the output.
    """
    rng = check_rng(rng)
    ts = ddim_timesteps(sched.steps, n_steps)
    x = rng.standard_normal(shape) if x_init is None else np.array(x_init, dtype=np.float64)
    pin_noise = None
    if known is not None:
        known = np.asarray(known, dtype=np.float64)
        keep = np.asarray(keep, dtype=bool)
        pin_noise = rng.standard_normal(shape)
        ab = sched[ts[0]]
        x[keep] = np.sqrt(ab) * known[keep] + np.sqrt(1 - ab) * pin_noise[keep]
    for i, (t, t_next) in enumerate(zip(ts[:-1], ts[1:])):
        eps_hat = np.asarray(denoiser(x, int(t)), dtype=np.float64)
        if not np.all(np.isfinite(eps_hat)):
            raise nc.NonFiniteError(f"ddim_sample: non-finite prediction at step {i} (t={t})")
        ab, ab_next = sched[t], sched[t_next]
        x0 = (x - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
        x = np.sqrt(ab_next) * x0 + np.sqrt(1.0 - ab_next) * eps_hat
        if pin_noise is not None:
            x[keep] = np.sqrt(ab_next) * known[keep] + np.sqrt(1 - ab_next) * pin_noise[keep]
    out = np.clip(x, 0.0, 1.0)
    if known is not None:
        out[keep] = known[keep]
    return out
