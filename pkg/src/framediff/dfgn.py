"""Toy discrete-frame noise predictor with spatial-temporal interaction blocks.

Network: input projection -> + timestep and text embeddings -> temporal
blocks -> output projection.  Each STI block mixes two branches,

* semantic: avg-pool by ``gamma``, add a frame-index embedding, self-attention
  over every (frame, region) token, nearest upsample back;
* detail: a 1-D convolution along the channel axis at every site;

normalizes both and fuses them with a zero-initialised linear layer added
residually, so a fresh block is the identity.  ``temporal="conv3d"`` swaps
in a 3x3x3 convolution block with the same norm/fuse/residual wrapping.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .masks import ConditionMask, apply_masks
from .spritegen import MASK_TOKEN, VOCAB_SIZE
from .validation import check_rng

TEMPORAL_LAYERS = ("sti", "conv3d")


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 1
    d: int = 32
    gamma: int = 2
    j: int = 3
    heads: int = 1
    blocks: int = 2
    temporal: str = "sti"
    vocab: int = VOCAB_SIZE
    max_frames: int = 24
    pos_embedding: bool = True

    def validate(self) -> "DenoiserConfig":
        if self.gamma not in (1, 2, 4):
            raise ValueError(f"gamma must be 1, 2 or 4, got {self.gamma}")
        if self.j < 1 or self.j % 2 == 0:
            raise ValueError(f"channel-conv window j must be odd, got {self.j}")
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.temporal not in TEMPORAL_LAYERS:
            raise ValueError(f"temporal layer must be one of {TEMPORAL_LAYERS}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        return self

    @property
    def in_channels(self) -> int:
        return 3 * self.channels + 1

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


Params = "OrderedDict[str, nc.Tensor]"


def init_params(cfg: DenoiserConfig, rng=None) -> Params:
    cfg.validate()
    rng = check_rng(rng)
    d = cfg.d
    shapes = param_shapes(cfg)
    params = OrderedDict()
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("block") and name.split(".")[1] == "fuse":
            value = np.zeros(shape)
        elif leaf == "g":
            value = np.ones(shape)
        elif leaf == "b":
            value = np.zeros(shape)
        elif leaf == "table":
            value = rng.standard_normal(shape)
        elif leaf == "pos":
            value = 0.1 * rng.standard_normal(shape)
        elif leaf == "conv":
            value = rng.standard_normal(shape) / math.sqrt(cfg.j)
        elif leaf == "kernel":
            value = rng.standard_normal(shape) / math.sqrt(27 * d)
        else:
            value = rng.standard_normal(shape) / math.sqrt(shape[0])
        params[name] = nc.Tensor(value, requires_grad=True, name=name)
    return params


def param_shapes(cfg: DenoiserConfig) -> "OrderedDict[str, tuple]":
    d = cfg.d
    s = OrderedDict()
    s["in_proj.w"] = (cfg.in_channels, d)
    s["in_proj.b"] = (d,)
    s["time.w"] = (d, d)
    s["time.b"] = (d,)
    s["text.table"] = (cfg.vocab, d)
    s["text.w"] = (d, d)
    s["text.b"] = (d,)
    for i in range(cfg.blocks):
        p = f"block{i}."
        if cfg.temporal == "sti":
            s[p + "pos"] = (cfg.max_frames, d)
            for m in ("wq", "wk", "wv", "wo"):
                s[p + m] = (d, d)
            s[p + "conv"] = (cfg.j,)
            s[p + "ln_a.g"] = (d,)
            s[p + "ln_a.b"] = (d,)
            s[p + "ln_b.g"] = (d,)
            s[p + "ln_b.b"] = (d,)
            s[p + "fuse.w"] = (2 * d, d)
        else:
            s[p + "kernel"] = (3, 3, 3, d, d)
            s[p + "ln.g"] = (d,)
            s[p + "ln.b"] = (d,)
            s[p + "fuse.w"] = (d, d)
        s[p + "fuse.b"] = (d,)
    s["out.w"] = (d, cfg.channels)
    s["out.b"] = (cfg.channels,)
    return s


def parameter_count(cfg: DenoiserConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def _block(params, i: int):
    prefix = f"block{i}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


# ------------------------------------------------------------ temporal layers

def semantic_branch(h, bp: dict, cfg: DenoiserConfig) -> nc.Tensor:
    h = nc.as_tensor(h)
    f, hh, ww, d = h.shape
    pooled = nc.avg_pool2d(h, cfg.gamma)
    if cfg.pos_embedding:
        if f > cfg.max_frames:
            raise nc.ShapeError("sti_forward", h.shape, detail=f"more than max_frames={cfg.max_frames}")
        pos = nc.reshape(nc.embedding(bp["pos"], np.arange(f)), (f, 1, 1, d))
        pooled = nc.add(pooled, pos)
    _, ph, pw, _ = pooled.shape
    tokens = nc.reshape(pooled, (f * ph * pw, d))
    attended = nc.self_attention(tokens, bp["wq"], bp["wk"], bp["wv"], bp["wo"], cfg.heads)
    return nc.upsample2d(nc.reshape(attended, (f, ph, pw, d)), cfg.gamma)


def detail_branch(h, bp: dict) -> nc.Tensor:
    return nc.channel_conv1d(h, bp["conv"])


def sti_forward(h, bp: dict, cfg: DenoiserConfig) -> nc.Tensor:
    """One STI block on features [F, H, W, d]; ``bp`` holds the block's parameters."""
    h = nc.as_tensor(h)
    if h.ndim != 4 or h.shape[1] % cfg.gamma or h.shape[2] % cfg.gamma:
        raise nc.ShapeError("sti_forward", h.shape, detail=f"gamma={cfg.gamma} must divide H and W")
    a = nc.layer_norm(semantic_branch(h, bp, cfg), bp["ln_a.g"], bp["ln_a.b"])
    b = nc.layer_norm(detail_branch(h, bp), bp["ln_b.g"], bp["ln_b.b"])
    return nc.add(h, nc.linear(nc.concat([a, b], axis=-1), bp["fuse.w"], bp["fuse.b"]))


def conv3d_baseline(h, bp: dict) -> nc.Tensor:
    """3x3x3 convolution over (F, H, W) wrapped in the same norm + zero-init fuse + residual."""
    h = nc.as_tensor(h)
    c = nc.conv3d(h, bp["kernel"])
    return nc.add(h, nc.linear(nc.layer_norm(c, bp["ln.g"], bp["ln.b"]), bp["fuse.w"], bp["fuse.b"]))


# ------------------------------------------------------------------ guidance

def augment_text(tokens, p: float, rng) -> np.ndarray:
    """Replace each token by the mask token independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"replacement probability must lie in [0, 1], got {p}")
    tokens = np.asarray(tokens, dtype=np.int64)
    hit = check_rng(rng).random(tokens.shape) < p
    return np.where(hit, MASK_TOKEN, tokens)


def embed_text(tokens, params) -> nc.Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    table = params["text.table"]
    if tokens.size == 0:
        raise ValueError("embed_text: empty token sequence")
    if tokens.min() < 0 or tokens.max() >= table.shape[0]:
        raise ValueError(f"embed_text: token id outside vocabulary of {table.shape[0]}")
    pooled = nc.mean(nc.embedding(table, tokens), axis=0, keepdims=True)
    return nc.reshape(nc.linear(pooled, params["text.w"], params["text.b"]), (table.shape[1],))


@dataclass
class GuidancePack:
    inputs: np.ndarray  # [F, H, W, 3C + 1]
    text: nc.Tensor  # [d]
    t: int


def fit_reference(ref: np.ndarray, h: int, w: int) -> np.ndarray:
    rh, rw = ref.shape[:2]
    if (rh, rw) == (h, w):
        return ref
    if rh < h or rh % h or rw % w or rh // h != rw // w:
        raise ValueError(f"reference {ref.shape[:2]} cannot be pooled to {(h, w)}")
    return nc.avg_pool2d(ref[None], rh // h).data[0]


def pack_guidance(noisy, frames, cmask: ConditionMask, t: int, text_emb, reference=None) -> GuidancePack:
    """Channel-concatenate noisy frames, the reference image, visible frames and the keep plane."""
    noisy = np.asarray(noisy, dtype=np.float64)
    frames = np.asarray(frames, dtype=np.float64)
    if noisy.shape != frames.shape:
        raise ValueError(f"pack_guidance: noisy {noisy.shape} vs clip {frames.shape}")
    visible, plane, _ = apply_masks(frames, cmask)
    ref = frames[0] if reference is None else fit_reference(np.asarray(reference, dtype=np.float64),
                                                             *frames.shape[1:3])
    ref = np.broadcast_to(ref, frames.shape)
    return GuidancePack(np.concatenate([noisy, ref, visible, plane], axis=-1), nc.as_tensor(text_emb), int(t))


def timestep_embedding(t: int, d: int) -> np.ndarray:
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    emb = np.concatenate([np.sin(t * freqs), np.cos(t * freqs)])
    return np.pad(emb, (0, d - emb.size))


def _finite(x: nc.Tensor, where: str) -> nc.Tensor:
    if not np.all(np.isfinite(x.data)):
        raise nc.NonFiniteError(f"denoise: non-finite activations after {where}")
    return x


def denoise(pack: GuidancePack, params, cfg: DenoiserConfig) -> nc.Tensor:
    """Predict the injected noise, shaped [F, H, W, C]."""
    x = pack.inputs
    if x.ndim != 4 or x.shape[-1] != cfg.in_channels:
        raise nc.ShapeError("denoise", x.shape, detail=f"expected {cfg.in_channels} input channels")
    h = nc.linear(x, params["in_proj.w"], params["in_proj.b"])
    temb = nc.linear(timestep_embedding(pack.t, cfg.d)[None], params["time.w"], params["time.b"])
    h = nc.add(h, nc.reshape(temb, (cfg.d,)))
    h = _finite(nc.add(h, pack.text), "input projection")
    for i in range(cfg.blocks):
        bp = _block(params, i)
        h = sti_forward(h, bp, cfg) if cfg.temporal == "sti" else conv3d_baseline(h, bp)
        h = _finite(h, f"block{i}")
    return _finite(nc.linear(h, params["out.w"], params["out.b"]), "output projection")


# ---------------------------------------------------------------- checkpoints

MAGIC = b"FDCKPT01"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, params, config_hash: str, extra: dict | None = None) -> None:
    """Header (magic, version, JSON manifest) followed by little-endian float64 values."""
    manifest = [[name, list(p.shape)] for name, p in params.items()]
    header = json.dumps({"version": VERSION, "config_hash": config_hash, "manifest": manifest,
                         "extra": extra or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for p in params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    offset = 20 + hlen
    params = OrderedDict()
    for name, shape in header["manifest"]:
        count = int(np.prod(shape))
        chunk = raw[offset:offset + 8 * count]
        if len(chunk) != 8 * count:
            raise CheckpointError(f"{path}: truncated at parameter {name}")
        params[name] = nc.Tensor(np.frombuffer(chunk, dtype="<f8").reshape(shape), requires_grad=True, name=name)
        offset += 8 * count
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return params, header
