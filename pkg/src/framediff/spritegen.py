"""Procedural animated sprites with a long-tail frame-length distribution.

Each clip is a single sprite (circle, square or bar) in one colour moving
under one motion program.  Pixel values are multiples of 1/255 so clips
survive a round trip through 8-bit pixmaps unchanged.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SHAPES = ("circle", "square", "bar")
COLORS = ("red", "green", "blue", "yellow", "cyan", "magenta")
MOTIONS = ("translate", "bounce", "blink", "grow")

MASK_TOKEN = 0
VOCAB_SIZE = 64
_COLOR_BASE = 1
_SHAPE_BASE = _COLOR_BASE + len(COLORS)
_MOTION_BASE = _SHAPE_BASE + len(SHAPES)

TOKEN_NAMES = {MASK_TOKEN: "#"}
TOKEN_NAMES.update({_COLOR_BASE + i: c.upper() for i, c in enumerate(COLORS)})
TOKEN_NAMES.update({_SHAPE_BASE + i: s.upper() for i, s in enumerate(SHAPES)})
TOKEN_NAMES.update({_MOTION_BASE + i: m.upper() for i, m in enumerate(MOTIONS)})
TOKEN_IDS = {name: i for i, name in TOKEN_NAMES.items()}

_RGB = {
    "red": (255, 0, 0), "green": (0, 255, 0), "blue": (0, 0, 255),
    "yellow": (255, 255, 0), "cyan": (0, 255, 255), "magenta": (255, 0, 255),
}
_GRAY = {"red": 255, "green": 215, "blue": 175, "yellow": 135, "cyan": 95, "magenta": 55}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SpriteConfig:
    height: int = 8
    width: int = 8
    channels: int = 1
    n_min: int = 3
    n_max: int = 24
    tail: float = 2.0
    sprite_size: int | None = None

    def validate(self) -> "SpriteConfig":
        if self.height not in (8, 16) or self.width not in (8, 16):
            raise ValueError(f"height/width must be 8 or 16, got {self.height}x{self.width}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.n_min < 3 or self.n_max < self.n_min:
            raise ValueError(f"empty or invalid frame range [{self.n_min}, {self.n_max}]")
        if self.tail < 0:
            raise ValueError(f"tail exponent must be >= 0, got {self.tail}")
        size = self.size
        if size < 1 or size > min(self.height, self.width):
            raise ValueError(f"sprite size {size} does not fit in {self.height}x{self.width}")
        return self

    @property
    def size(self) -> int:
        if self.sprite_size is not None:
            return self.sprite_size
        return min(self.height, self.width) // 3 + 1

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SpriteClip:
    frames: np.ndarray  # [N, H, W, C] in [0, 1]
    factors: tuple  # (shape, color, motion) names
    caption: tuple = field(default=())

    def __post_init__(self):
        if not self.caption:
            self.caption = tuple(caption_of(self.factors))

    @property
    def frame_count(self) -> int:
        return int(self.frames.shape[0])


def frame_length_pmf(n_min: int, n_max: int, tail: float) -> np.ndarray:
    """Truncated power law P(N) proportional to N**-tail over [n_min, n_max]."""
    ns = np.arange(n_min, n_max + 1, dtype=np.float64)
    w = ns ** (-tail)
    return w / w.sum()


def caption_of(factors) -> list[int]:
    """Token ids [color, shape, motion] for a (shape, color, motion) triple."""
    shape, color, motion = factors
    try:
        return [_COLOR_BASE + COLORS.index(color),
                _SHAPE_BASE + SHAPES.index(shape),
                _MOTION_BASE + MOTIONS.index(motion)]
    except ValueError:
        raise ValueError(f"unknown factor in {factors!r}") from None


def factors_of(caption) -> tuple:
    color, shape, motion = (int(t) for t in caption)
    if not (0 <= color - _COLOR_BASE < len(COLORS) and 0 <= shape - _SHAPE_BASE < len(SHAPES)
            and 0 <= motion - _MOTION_BASE < len(MOTIONS)):
        raise ValueError(f"caption {list(caption)} is not a factor caption")
    return (SHAPES[shape - _SHAPE_BASE], COLORS[color - _COLOR_BASE], MOTIONS[motion - _MOTION_BASE])


def tokens_from_names(names) -> list[int]:
    try:
        return [TOKEN_IDS[n.strip().upper()] for n in names]
    except KeyError as e:
        raise ValueError(f"unknown caption token {e.args[0]!r}") from None


def _sprite_mask(shape: str, size: int) -> np.ndarray:
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "bar":
        m = np.zeros((size, size), dtype=bool)
        thick = max(1, size // 3)
        top = (size - thick) // 2
        m[top:top + thick, :] = True
        return m
    yy, xx = np.mgrid[:size, :size]
    c = (size - 1) / 2.0
    return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2


def _color_vec(color: str, channels: int) -> np.ndarray:
    levels = _RGB[color] if channels == 3 else (_GRAY[color],)
    return np.array(levels, dtype=np.float64) / 255.0


def _reflect(pos: np.ndarray, lo: int, hi: int) -> np.ndarray:
    if hi == lo:
        return np.full_like(pos, lo)
    period = 2 * (hi - lo)
    p = np.mod(pos - lo, period)
    return lo + np.where(p <= hi - lo, p, period - p)


def render(factors, n: int, cfg: SpriteConfig, rng: np.random.Generator) -> np.ndarray:
    shape, color, motion = factors
    h, w, size = cfg.height, cfg.width, cfg.size
    col = _color_vec(color, cfg.channels)
    frames = np.zeros((n, h, w, cfg.channels))
    steps = np.arange(n)
    ymax, xmax = h - size, w - size
    sizes = np.full(n, size)
    if motion == "translate":
        y0, y1 = rng.integers(0, ymax + 1, size=2)
        x0, x1 = rng.integers(0, xmax + 1, size=2)
        frac = steps / max(n - 1, 1)
        ys = np.rint(y0 + (y1 - y0) * frac).astype(int)
        xs = np.rint(x0 + (x1 - x0) * frac).astype(int)
    elif motion == "bounce":
        ys = _reflect(int(rng.integers(0, ymax + 1)) + steps, 0, ymax)
        xs = np.full(n, int(rng.integers(0, xmax + 1)))
    elif motion == "blink":
        ys = np.full(n, int(rng.integers(0, ymax + 1)))
        xs = np.full(n, int(rng.integers(0, xmax + 1)))
    elif motion == "grow":
        ys = np.full(n, int(rng.integers(0, ymax + 1)))
        xs = np.full(n, int(rng.integers(0, xmax + 1)))
        sizes = 1 + ((size - 1) * steps) // max(n - 1, 1)
    else:
        raise ValueError(f"unknown motion {motion!r}")
    for i in range(n):
        if motion == "blink" and i % 2:
            continue
        s = int(sizes[i])
        m = _sprite_mask(shape, s)
        y, x = int(ys[i]), int(xs[i])
        frames[i, y:y + s, x:x + s][m] = col
    return frames


def sample_clip(rng: np.random.Generator, cfg: SpriteConfig) -> SpriteClip:
    cfg.validate()
    pmf = frame_length_pmf(cfg.n_min, cfg.n_max, cfg.tail)
    n = int(cfg.n_min + rng.choice(len(pmf), p=pmf))
    factors = (SHAPES[rng.integers(len(SHAPES))], COLORS[rng.integers(len(COLORS))],
               MOTIONS[rng.integers(len(MOTIONS))])
    return SpriteClip(render(factors, n, cfg, rng), factors)


# ------------------------------------------------------------------ storage

@dataclass
class ManifestRecord:
    clip_id: str
    frame_count: int
    factors: tuple
    caption: tuple
    path: str


@dataclass
class DatasetManifest:
    seed: int
    config_hash: str
    records: list = field(default_factory=list)

    def histogram(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for r in self.records:
            counts[r.frame_count] = counts.get(r.frame_count, 0) + 1
        return dict(sorted(counts.items()))


def generate_dataset(count: int, cfg: SpriteConfig, seed: int):
    """``count`` clips, each from its own spawned seed so generation is order-free."""
    cfg.validate()
    children = np.random.SeedSequence(seed).spawn(count)
    clips = [sample_clip(np.random.default_rng(s), cfg) for s in children]
    manifest = DatasetManifest(seed=seed, config_hash=cfg.hash())
    for i, clip in enumerate(clips):
        cid = f"clip{i:06d}"
        manifest.records.append(ManifestRecord(cid, clip.frame_count, tuple(clip.factors),
                                               tuple(clip.caption), f"frames/{cid}"))
    return manifest, clips


MANIFEST_NAME = "manifest.tsv"


def write_pnm(path: Path, frame: np.ndarray) -> None:
    h, w, c = frame.shape
    levels = np.rint(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(b"%s\n%d %d\n255\n" % (magic, w, h))
        fh.write(levels.tobytes())


def read_pnm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise DatasetError(f"{path}: unsupported pixmap header {magic!r} maxval={maxval}")
    c = 1 if magic == b"P5" else 3
    body = np.frombuffer(raw[pos:pos + w * h * c], dtype=np.uint8)
    if body.size != w * h * c:
        raise DatasetError(f"{path}: truncated pixel data")
    return body.reshape(h, w, c).astype(np.float64) / 255.0


def write_dataset(manifest: DatasetManifest, clips, directory) -> Path:
    root = Path(directory)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    lines = [f"# seed={manifest.seed}\tconfig_hash={manifest.config_hash}"]
    for rec, clip in zip(manifest.records, clips):
        for i, frame in enumerate(clip.frames):
            write_pnm(root / f"{rec.path}_{i:03d}.pnm", frame)
        lines.append("\t".join([rec.clip_id, str(rec.frame_count), ",".join(rec.factors),
                                ",".join(str(t) for t in rec.caption), rec.path]))
    (root / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root


def read_manifest(directory) -> DatasetManifest:
    root = Path(directory)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"no {MANIFEST_NAME} in {root}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#"):
        raise DatasetError(f"{path}: missing header line")
    header = dict(kv.split("=", 1) for kv in lines[0][1:].strip().split("\t"))
    manifest = DatasetManifest(seed=int(header["seed"]), config_hash=header["config_hash"])
    seen = set()
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split("\t")
        cid = parts[0]
        try:
            if len(parts) != 5:
                raise ValueError("expected 5 fields")
            n = int(parts[1])
            factors = tuple(parts[2].split(","))
            caption = tuple(int(t) for t in parts[3].split(","))
            if caption_of(factors) != list(caption):
                raise ValueError("caption does not match factors")
        except ValueError as e:
            raise DatasetError(f"corrupt record for {cid}: {e}") from None
        if cid in seen:
            raise DatasetError(f"duplicate clip id {cid}")
        seen.add(cid)
        manifest.records.append(ManifestRecord(cid, n, factors, caption, parts[4]))
    return manifest


def load_clip(directory, rec: ManifestRecord) -> SpriteClip:
    root = Path(directory)
    frames = []
    for i in range(rec.frame_count):
        p = root / f"{rec.path}_{i:03d}.pnm"
        if not p.exists():
            raise DatasetError(f"missing frame {i} for {rec.clip_id}")
        try:
            frames.append(read_pnm(p))
        except (DatasetError, ValueError, IndexError) as e:
            raise DatasetError(f"corrupt frame {i} for {rec.clip_id}: {e}") from None
    return SpriteClip(np.stack(frames), rec.factors, rec.caption)


def read_dataset(directory):
    manifest = read_manifest(directory)
    return manifest, [load_clip(directory, r) for r in manifest.records]
