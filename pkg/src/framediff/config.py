"""Run configuration: flat ``key = value`` files, ``#`` comments, unknown keys rejected."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .curriculum import STRATEGIES
from .dfgn import TEMPORAL_LAYERS, DenoiserConfig
from .spritegen import SpriteConfig


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    # dataset
    height: int = 8
    width: int = 8
    channels: int = 1
    n_min: int = 3
    n_max: int = 12
    tail: float = 2.0
    count: int = 1000
    holdout: float = 0.3
    # model
    d: int = 32
    gamma: int = 2
    j: int = 3
    heads: int = 1
    blocks: int = 2
    temporal: str = "sti"
    pos_embedding: bool = True
    # diffusion
    t_max: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ddim_steps: int = 25
    # curriculum
    strategy: str = "dcl"
    lam: float = 0.7
    kp: float = 1.0
    ki: float = 0.05
    kd: float = 0.25
    delta: float = -1.0  # negative: 0.2 * entropy span of the grid
    h_ipt: float = 1.0
    h_pdt: float = 2.0
    h_grt: float = 3.0
    # optimisation
    lr: float = 1e-3
    steps: int = 2000
    batch_size: int = 1
    text_mask_p: float = 0.1
    checkpoint_every: int = 500
    # evaluation
    eval_frames: int = 8
    eval_clips: int = 40
    eval_noise_draws: int = 2
    smooth_window: int = 50
    seed: int = 0

    def validate(self) -> "RunConfig":
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(key, msg)

        try:
            self.sprite_config().validate()
        except ValueError as e:
            raise ConfigError("height/width/channels/n_min/n_max/tail", str(e)) from None
        need(self.count >= 0, "count", "must be >= 0")
        need(0.0 <= self.holdout < 1.0, "holdout", "must lie in [0, 1)")
        need(self.temporal in TEMPORAL_LAYERS, "temporal", f"must be one of {TEMPORAL_LAYERS}")
        try:
            self.denoiser_config().validate()
        except ValueError as e:
            raise ConfigError("d/gamma/j/heads", str(e)) from None
        need(self.height % self.gamma == 0 and self.width % self.gamma == 0, "gamma", "must divide height and width")
        need(self.blocks >= 1, "blocks", "must be >= 1")
        need(self.t_max >= 1, "t_max", "must be >= 1")
        need(0.0 < self.beta_start <= self.beta_end < 1.0, "beta_start", "need 0 < beta_start <= beta_end < 1")
        need(1 <= self.ddim_steps <= self.t_max, "ddim_steps", "must lie in [1, t_max]")
        need(self.strategy in STRATEGIES, "strategy", f"must be one of {STRATEGIES}")
        need(0.0 < self.lam <= 1.0, "lam", "must lie in (0, 1]")
        for key in ("kp", "ki", "kd"):
            need(getattr(self, key) >= 0, key, "PID gains must be non-negative")
        need(self.h_ipt < self.h_pdt < self.h_grt, "h_ipt", "need h_ipt < h_pdt < h_grt")
        need(self.lr > 0, "lr", "must be > 0")
        need(self.steps >= 1, "steps", "must be >= 1")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(0.0 <= self.text_mask_p <= 1.0, "text_mask_p", "must lie in [0, 1]")
        need(self.checkpoint_every >= 0, "checkpoint_every", "must be >= 0")
        need(3 <= self.eval_frames <= self.n_max, "eval_frames", "must lie in [3, n_max]")
        need(self.eval_clips >= 1, "eval_clips", "must be >= 1")
        need(self.eval_noise_draws >= 1, "eval_noise_draws", "must be >= 1")
        need(self.smooth_window >= 2, "smooth_window", "must be >= 2")
        need(self.seed >= 0, "seed", "must be >= 0")
        return self

    def sprite_config(self) -> SpriteConfig:
        return SpriteConfig(self.height, self.width, self.channels, self.n_min, self.n_max, self.tail)

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(channels=self.channels, d=self.d, gamma=self.gamma, j=self.j, heads=self.heads,
                              blocks=self.blocks, temporal=self.temporal, max_frames=self.n_max,
                              pos_embedding=self.pos_embedding)

    def hash(self) -> str:
        items = sorted(asdict(self).items())
        blob = "\n".join(f"{k}={v!r}" for k, v in items).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes).validate()

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in asdict(self).items())


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(key: str, text: str):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        return text
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {kind}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(key, "unknown configuration key")
        values[key] = _coerce(key, value)
    return replace(base or RunConfig(), **values).validate()


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    return parse_config(Path(path).read_text(encoding="utf-8"))
