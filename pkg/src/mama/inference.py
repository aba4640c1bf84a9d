"""Batched, gradient-free embedding extraction from a trained model."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .encoders import DualEncoder, gather_sentence_features
from .errors import ShapeError
from .losses import correspondence_matrix
from .tokenizer import HashTokenizer


def check_images(images, image_size=None) -> np.ndarray:
    """Validate an image stack (N, H, W) or a single (H, W) image; returns float32 (N, H, W)."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"expected (N, H, W) images, got shape {arr.shape}")
    if image_size is not None and arr.shape[1:] != (image_size, image_size):
        raise ShapeError(f"expected {image_size}x{image_size} images, got {arr.shape[1:]}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError("images contain non-finite values")
    return arr


def _dtype(model):
    return next(model.parameters()).dtype


@torch.no_grad()
def embed_images(model: DualEncoder, images, batch_size: int = 64, normalize: bool = True,
                 with_local: bool = False):
    """Global image embeddings (N, d), optionally with local patch features (N, P, d)."""
    arr = check_images(images, model.cfg.image_size)
    was_training = model.training
    model.eval()
    globs, locs = [], []
    for start in range(0, len(arr), batch_size):
        x = torch.as_tensor(arr[start:start + batch_size], dtype=_dtype(model))
        g, loc = model.encode_images(x)
        globs.append(F.normalize(g, dim=-1) if normalize else g)
        if with_local:
            locs.append(loc[:, 1:])
    model.train(was_training)
    glob = torch.cat(globs).cpu().numpy() if globs else np.zeros((0, model.cfg.embed_dim), np.float32)
    if with_local:
        return glob, torch.cat(locs).cpu().numpy()
    return glob


@torch.no_grad()
def embed_texts(model: DualEncoder, tokenizer: HashTokenizer, texts, batch_size: int = 64,
                normalize: bool = True, with_sentences: bool = False):
    """Global caption embeddings (N, d); optionally per-caption sentence features."""
    texts = list(texts)
    was_training = model.training
    model.eval()
    globs, sents = [], []
    for start in range(0, len(texts), batch_size):
        ids, n = tokenizer.batch(texts[start:start + batch_size])
        ids = torch.as_tensor(ids)
        g, loc = model.encode_texts(ids)
        globs.append(F.normalize(g, dim=-1) if normalize else g)
        if with_sentences:
            feats, mask = gather_sentence_features(loc, ids, n)
            sents.extend(f[m].cpu().numpy() for f, m in zip(feats, mask))
    model.train(was_training)
    glob = torch.cat(globs).cpu().numpy() if globs else np.zeros((0, model.cfg.embed_dim), np.float32)
    if with_sentences:
        return glob, sents
    return glob


def correspondence(model: DualEncoder, tokenizer: HashTokenizer, image, caption):
    """Sentence x patch cosine matrix for one image/caption pair."""
    _, patches = embed_images(model, image, with_local=True)
    _, sents = embed_texts(model, tokenizer, [caption], with_sentences=True)
    return correspondence_matrix(torch.as_tensor(sents[0]), torch.as_tensor(patches[0]))
