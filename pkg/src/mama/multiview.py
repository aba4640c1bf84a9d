"""Positive-view sampling, augmentation and mini-batch assembly."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .captions import Caption
from .data_model import ImageRecord, Study
from .errors import InputError


class SamplingStrategy(str, enum.Enum):
    SAME_IMAGE = "same"
    INTRA_SIDE = "intra-side"
    INTRA_STUDY_NO_SELF = "intra-study-no-self"
    INTRA_STUDY = "intra-study"


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    rotate_prob: float = 0.5
    max_rotation: float = 10.0
    crop_prob: float = 0.5
    crop_scale: tuple[float, float] = (0.8, 1.0)
    jitter_prob: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(flip_prob=0.0, rotate_prob=0.0, crop_prob=0.0, jitter_prob=0.0)


@dataclass
class PairBatch:
    primary_images: list[np.ndarray]
    positive_images: list[np.ndarray]
    captions: list[Caption]
    records: list[ImageRecord]
    positive_records: list[ImageRecord]

    def __len__(self):
        return len(self.records)


def positive_candidates(study: Study, anchor: ImageRecord, strategy: SamplingStrategy) -> list[ImageRecord]:
    if not any(img.image_id == anchor.image_id for img in study.images):
        raise InputError(f"anchor {anchor.image_id} is not part of study {study.study_id}")
    strategy = SamplingStrategy(strategy)
    if strategy is SamplingStrategy.SAME_IMAGE:
        return [anchor]
    if strategy is SamplingStrategy.INTRA_SIDE:
        return [img for img in study.images if img.side == anchor.side]
    if strategy is SamplingStrategy.INTRA_STUDY_NO_SELF:
        others = [img for img in study.images if img.image_id != anchor.image_id]
        return others or [anchor]
    return list(study.images)


def sample_positive(study: Study, anchor: ImageRecord, strategy: SamplingStrategy,
                    rng: np.random.Generator) -> ImageRecord:
    candidates = positive_candidates(study, anchor, strategy)
    if len(candidates) == 1:
        return candidates[0]
    return candidates[int(rng.integers(len(candidates)))]


def _crop_resize_rotate(image, rng, cfg):
    h, w = image.shape
    angle = 0.0
    if cfg.rotate_prob > 0 and rng.random() < cfg.rotate_prob:
        angle = np.deg2rad(rng.uniform(-cfg.max_rotation, cfg.max_rotation))
    scale, oy, ox = 1.0, 0.0, 0.0
    if cfg.crop_prob > 0 and rng.random() < cfg.crop_prob:
        scale = float(np.sqrt(rng.uniform(*cfg.crop_scale)))  # area fraction -> side fraction
        oy = rng.uniform(0, (1 - scale) * (h - 1))
        ox = rng.uniform(0, (1 - scale) * (w - 1))
    if angle == 0.0 and scale == 1.0:
        return image
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    # output pixel -> crop-box coordinate -> rotation about the image centre
    y = oy + yy * scale
    x = ox + xx * scale
    cy, cx = (h - 1) / 2, (w - 1) / 2
    c, s = np.cos(angle), np.sin(angle)
    ys = cy + c * (y - cy) - s * (x - cx)
    xs = cx + s * (y - cy) + c * (x - cx)
    return ndimage.map_coordinates(image, [ys, xs], order=1, mode="nearest")


def augment(image: np.ndarray, rng: np.random.Generator, config: AugmentConfig | None = None) -> np.ndarray:
    """Random flip, rotation, crop-and-resize and intensity jitter; output keeps the input shape."""
    cfg = config or AugmentConfig()
    out = np.asarray(image, dtype=np.float32)
    if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        out = out[:, ::-1]
    out = _crop_resize_rotate(out, rng, cfg)
    if cfg.jitter_prob > 0 and rng.random() < cfg.jitter_prob:
        b = rng.uniform(-cfg.brightness, cfg.brightness)
        k = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
        mean = out.mean()
        out = (out - mean) * k + mean + b
    return np.ascontiguousarray(out, dtype=np.float32)


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise InputError(f"{path}: only binary (P5) PGM is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos + 1)
    return (data.reshape(h, w).astype(np.float32) / maxval)


def load_image(path) -> np.ndarray:
    """Read an 8- or 16-bit grayscale PGM/PNG into float32 values in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    with Image.open(path) as im:
        mode = im.mode
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise InputError(f"{path}: expected a single-channel image")
    if mode == "L":
        return arr.astype(np.float32) / 255.0
    if mode.startswith("I"):
        return arr.astype(np.float32) / 65535.0
    raise InputError(f"{path}: unsupported image mode {mode}")


def save_pgm(path, image01: np.ndarray, bits: int = 8) -> None:
    """Write values in [0, 1] as a binary (P5) PGM."""
    maxval = 255 if bits == 8 else 65535
    arr = np.round(np.clip(image01, 0, 1) * maxval)
    h, w = arr.shape
    data = arr.astype(">u2" if bits == 16 else np.uint8).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + data)


class ImageStore:
    """Lazy image cache keyed by image_id."""

    def __init__(self, images: Mapping[str, np.ndarray] | None = None, root=None):
        self._cache = dict(images or {})
        self.root = Path(root) if root is not None else None

    def __call__(self, record: ImageRecord) -> np.ndarray:
        img = self._cache.get(record.image_id)
        if img is None:
            if not record.image_path:
                raise InputError(f"no image available for {record.image_id}")
            path = Path(record.image_path)
            if self.root is not None and not path.is_absolute():
                path = self.root / path
            img = self._cache[record.image_id] = load_image(path)
        return img

    def __contains__(self, image_id):
        return image_id in self._cache


def assemble_batch(studies: Sequence[Study], batch_size: int, strategy: SamplingStrategy,
                   caption_fn: Callable[[ImageRecord, np.random.Generator], Caption],
                   rng: np.random.Generator, images: Callable[[ImageRecord], np.ndarray] | None = None,
                   augment_config: AugmentConfig | None = None) -> PairBatch:
    """Draw ``batch_size`` (anchor, positive, caption) triplets, anchors uniform over images."""
    if batch_size < 1:
        raise InputError("batch size must be at least 1")
    flat = [(study, rec) for study in studies for rec in study.images]
    if not flat:
        raise InputError("cannot assemble a batch from an empty dataset")
    primary, positive, captions, records, pos_records = [], [], [], [], []
    for _ in range(batch_size):
        study, anchor = flat[int(rng.integers(len(flat)))]
        pos = sample_positive(study, anchor, strategy, rng)
        captions.append(caption_fn(anchor, rng))
        if images is not None:
            primary.append(augment(images(anchor), rng, augment_config))
            positive.append(augment(images(pos), rng, augment_config))
        records.append(anchor)
        pos_records.append(pos)
    return PairBatch(primary, positive, captions, records, pos_records)
