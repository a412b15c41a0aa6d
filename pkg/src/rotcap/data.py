"""Dataset loading, image preprocessing, and length-bucketed batching.

A dataset on disk is a root directory of image files plus a UTF-8 manifest
with one ``<relative_image_path>\\t<caption>`` record per line; several
lines may share an image.  Batches are built the way the caption trainer
samples them: draw a caption length with probability proportional to its
frequency, then draw that many same-length records uniformly with
replacement.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import get_float, get_int, get_triple
from .errors import ConfigError, DataError
from .imageio import load_image, validate_raw_image
from .vocab import END_INDEX, START_INDEX, Vocabulary


@dataclass
class PreprocessConfig:
    resize_to: int = 256
    crop_size: int = 224
    hflip_prob: float = 0.5
    channel_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    channel_std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    train_mode: bool = True

    def validate(self) -> "PreprocessConfig":
        if self.crop_size < 1 or self.resize_to < 1:
            raise ConfigError("resize_to and crop_size must be positive")
        if self.crop_size > self.resize_to:
            raise ConfigError(f"crop_size {self.crop_size} exceeds resize_to {self.resize_to}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        for v in (*self.channel_mean, *self.channel_std):
            if not math.isfinite(v):
                raise ConfigError("channel statistics must be finite")
        if any(s <= 0 for s in self.channel_std):
            raise ConfigError("channel_std components must be positive")
        return self

    def eval_mode(self) -> "PreprocessConfig":
        return replace(self, train_mode=False)

    @classmethod
    def from_mapping(cls, cfg: dict[str, str], **overrides) -> "PreprocessConfig":
        base = cls(
            resize_to=get_int(cfg, "resize_to", cls.resize_to),
            crop_size=get_int(cfg, "crop_size", cls.crop_size),
            hflip_prob=get_float(cfg, "hflip_prob", cls.hflip_prob),
            channel_mean=get_triple(cfg, "channel_mean", cls.channel_mean),
            channel_std=get_triple(cfg, "channel_std", cls.channel_std),
        )
        return replace(base, **overrides).validate()


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Aspect-agnostic bilinear resample; float64 H x W x C output."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    sy = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    sx = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    sy = np.clip(sy, 0.0, h - 1.0)
    sx = np.clip(sx, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0)[:, None, None]
    wx = (sx - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def preprocess(img: np.ndarray, cfg: PreprocessConfig,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Raw uint8 H x W x 3 -> normalized float64 3 x S x S tensor.

    Train mode crops at a random offset and may flip horizontally (one
    offset draw, one flip draw, in that order); eval mode center-crops,
    never flips, and never touches the rng.
    """
    img = validate_raw_image(np.asarray(img))
    cfg.validate()
    h, w = img.shape[:2]
    # shorter side -> resize_to, aspect preserved
    if h <= w:
        out_h = cfg.resize_to
        out_w = max(cfg.resize_to, int(round(w * cfg.resize_to / h)))
    else:
        out_w = cfg.resize_to
        out_h = max(cfg.resize_to, int(round(h * cfg.resize_to / w)))
    x = bilinear_resize(img, out_h, out_w)
    s = cfg.crop_size
    if cfg.train_mode:
        if rng is None:
            raise DataError("train-mode preprocessing needs a random source")
        top = int(rng.integers(0, out_h - s + 1))
        left = int(rng.integers(0, out_w - s + 1))
        flip = bool(rng.random() < cfg.hflip_prob)
    else:
        top = (out_h - s) // 2
        left = (out_w - s) // 2
        flip = False
    x = x[top : top + s, left : left + s]
    if flip:
        x = x[:, ::-1]
    chw = x.transpose(2, 0, 1) / 255.0
    mean = np.asarray(cfg.channel_mean, dtype=np.float64)[:, None, None]
    std = np.asarray(cfg.channel_std, dtype=np.float64)[:, None, None]
    return np.ascontiguousarray((chw - mean) / std)


def denormalize(tensor: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """Inverse of the normalization step, back to the pixel/255 scale."""
    mean = np.asarray(cfg.channel_mean, dtype=np.float64)[:, None, None]
    std = np.asarray(cfg.channel_std, dtype=np.float64)[:, None, None]
    return tensor * std + mean


@dataclass
class CaptionRecord:
    image_id: str  # relative image path; doubles as the on-disk locator
    caption_text: str


class CaptionDataset:
    """Manifest-backed image/caption records with a raw-image cache.

    Records are immutable after load; the cache is fill-once and idempotent,
    so concurrent readers at worst decode the same file twice.
    """

    def __init__(self, root: Path, records: list[CaptionRecord]):
        self.root = Path(root)
        self.records = records
        self._cache: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.records)

    def image_path(self, image_id: str) -> Path:
        return self.root / image_id

    def load_raw(self, index: int) -> np.ndarray:
        image_id = self.records[index].image_id
        if image_id not in self._cache:
            self._cache[image_id] = load_image(self.image_path(image_id))
        return self._cache[image_id]

    def unique_image_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for rec in self.records:
            seen.setdefault(rec.image_id, None)
        return list(seen)


def load_dataset(root_path: str | Path, manifest: str | Path) -> CaptionDataset:
    """Read a manifest and verify that every referenced image exists."""
    root = Path(root_path)
    manifest = Path(manifest)
    if not root.is_dir():
        raise DataError(f"dataset root is not a directory: {root}")
    if not manifest.is_file():
        raise DataError(f"manifest not found: {manifest}")
    records: list[CaptionRecord] = []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t", 1)
        if len(parts) != 2:
            raise DataError(f"{manifest}:{lineno}: expected '<image>\\t<caption>'")
        rel, caption = parts[0].strip(), parts[1].strip()
        if not rel or not caption:
            raise DataError(f"{manifest}:{lineno}: empty image path or caption")
        if not (root / rel).is_file():
            raise DataError(f"{manifest}:{lineno}: image file missing: {root / rel}")
        records.append(CaptionRecord(image_id=rel, caption_text=caption))
    return CaptionDataset(root, records)


class TokenizedDataset:
    """Caption dataset with precomputed token sequences and a transform."""

    def __init__(self, base: CaptionDataset, tokens: list[list[int]],
                 preprocess_cfg: PreprocessConfig):
        self.base = base
        self.tokens = tokens
        self.preprocess_cfg = preprocess_cfg

    @classmethod
    def from_dataset(cls, base: CaptionDataset, vocab: Vocabulary,
                     preprocess_cfg: PreprocessConfig) -> "TokenizedDataset":
        tokens = [vocab.tokenize(rec.caption_text) for rec in base.records]
        return cls(base, tokens, preprocess_cfg)

    def __len__(self) -> int:
        return len(self.tokens)

    def lengths(self) -> list[int]:
        return [len(t) for t in self.tokens]


@dataclass
class LengthHistogram:
    counts: dict[int, int]

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def build_length_histogram(dataset) -> LengthHistogram:
    """Tokenized caption length (start/end included) -> caption count."""
    lengths = dataset.lengths() if hasattr(dataset, "lengths") else list(dataset)
    if not lengths:
        raise DataError("cannot build a length histogram from an empty dataset")
    counts: dict[int, int] = {}
    for length in lengths:
        counts[length] = counts.get(length, 0) + 1
    return LengthHistogram(counts)


def index_by_length(dataset) -> dict[int, list[int]]:
    lengths = dataset.lengths() if hasattr(dataset, "lengths") else list(dataset)
    pools: dict[int, list[int]] = {}
    for i, length in enumerate(lengths):
        pools.setdefault(length, []).append(i)
    return pools


def sample_train_indices(hist: LengthHistogram, pools: dict[int, list[int]],
                         batch_size: int, rng: np.random.Generator) -> list[int]:
    """Draw a caption length (probability = count/total), then batch_size
    record indices uniformly with replacement from that length's pool."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    if not hist.counts:
        raise DataError("empty length histogram")
    lengths = sorted(hist.counts)
    probs = np.array([hist.counts[L] for L in lengths], dtype=np.float64)
    probs /= probs.sum()
    length = int(lengths[rng.choice(len(lengths), p=probs)])
    pool = pools[length]
    picks = rng.integers(0, len(pool), size=batch_size)
    return [pool[int(i)] for i in picks]


@dataclass
class Batch:
    images: np.ndarray    # B x C x S x S float64
    captions: np.ndarray  # B x L int64
    length: int


def make_batch(indices: list[int], dataset: TokenizedDataset, cfg: PreprocessConfig,
               rng: np.random.Generator | None) -> Batch:
    """Preprocess the given records into one fixed-length batch."""
    if not indices:
        raise DataError("cannot build an empty batch")
    lengths = {len(dataset.tokens[i]) for i in indices}
    if len(lengths) != 1:
        raise DataError(f"mixed caption lengths in batch: {sorted(lengths)}")
    length = lengths.pop()
    images = np.stack([preprocess(dataset.base.load_raw(i), cfg, rng) for i in indices])
    captions = np.array([dataset.tokens[i] for i in indices], dtype=np.int64)
    if not ((captions[:, 0] == START_INDEX).all() and (captions[:, -1] == END_INDEX).all()):
        raise DataError("batch captions must start with 0 and end with 1")
    return Batch(images=images, captions=captions, length=length)
