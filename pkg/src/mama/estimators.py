"""scikit-learn style wrappers around pre-training, probing and zero-shot scoring."""

from __future__ import annotations

import copy
import warnings
from typing import Callable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .captions import CaptionStyle
from .data_model import ImageRecord, group_studies
from .encoders import EncoderConfig
from .errors import InputError
from .evaluation import ProbeConfig, ZeroShotSpec, fit_probe, zero_shot_classify
from .inference import check_images, embed_images
from .losses import LossConfig
from .multiview import ImageStore, SamplingStrategy
from .trainer import LOSS_PRESETS, PRESETS, PretrainConfig, TrainState, load_checkpoint, run_training, save_checkpoint


def check_records(records) -> list[ImageRecord]:
    records = list(records)
    if not records:
        raise InputError("need at least one record")
    bad = [type(r).__name__ for r in records if not isinstance(r, ImageRecord)]
    if bad:
        raise InputError(f"expected ImageRecord items, got {bad[0]}")
    return records


def as_image_source(images) -> Callable[[ImageRecord], np.ndarray]:
    """Accept a mapping image_id -> array, an ImageStore or any record -> array callable."""
    if isinstance(images, Mapping):
        return ImageStore(images)
    if callable(images):
        return images
    raise InputError("images must be a mapping by image_id or a callable taking a record")


class ContrastivePretrainer(BaseEstimator, TransformerMixin):
    """Contrastive image-report pre-training; ``transform`` maps images to unit-norm embeddings.

    Hyper-parameters left as None take the value of ``preset``.
    """

    def __init__(self, preset="desk", total_steps=None, batch_size=None, lr=None, delta=None,
                 strategy="intra-study", caption_style="structured", mask_prob=0.8, use_sla=True, use_vv=True,
                 use_symmetric_vt=True, use_lora=True, tau_local=None, image_size=32, patch_grid=(4, 4),
                 embed_dim=64, seed=0):
        self.preset = preset
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.lr = lr
        self.delta = delta
        self.strategy = strategy
        self.caption_style = caption_style
        self.mask_prob = mask_prob
        self.use_sla = use_sla
        self.use_vv = use_vv
        self.use_symmetric_vt = use_symmetric_vt
        self.use_lora = use_lora
        self.tau_local = tau_local
        self.image_size = image_size
        self.patch_grid = patch_grid
        self.embed_dim = embed_dim
        self.seed = seed

    def build_config(self) -> PretrainConfig:
        if self.preset not in PRESETS:
            raise InputError(f"unknown preset {self.preset!r}")
        train = copy.deepcopy(PRESETS[self.preset])
        for name in ("total_steps", "batch_size", "lr", "delta"):
            value = getattr(self, name)
            if value is not None:
                setattr(train, name, value)
        train.seed = self.seed
        train.warmup_steps = min(train.warmup_steps, train.total_steps)
        train.delta = min(train.delta, train.total_steps)
        train.__post_init__()
        encoder = EncoderConfig(embed_dim=self.embed_dim, image_size=self.image_size,
                                patch_grid=tuple(self.patch_grid), seed=self.seed)
        tau_local = LOSS_PRESETS[self.preset].tau_local if self.tau_local is None else self.tau_local
        loss = LossConfig(tau_local=tau_local, use_sla=self.use_sla, use_vv=self.use_vv,
                          use_symmetric_vt=self.use_symmetric_vt)
        return PretrainConfig(encoder=encoder, train=train, loss=loss, strategy=SamplingStrategy(self.strategy),
                              caption_style=CaptionStyle(self.caption_style), mask_prob=self.mask_prob,
                              use_lora=self.use_lora)

    def fit(self, X, y=None, images=None):
        """Pre-train on records ``X``; ``images`` resolves each record to its pixel array."""
        records = check_records(X)
        if images is None:
            raise InputError("fit needs an image source")
        source = as_image_source(images)
        self.state_ = TrainState(self.build_config())
        self.history_ = run_training(self.state_, group_studies(records), source)
        self.n_features_out_ = self.embed_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "state_")
        return embed_images(self.state_.model, check_images(X, self.image_size))

    @property
    def model_(self):
        check_is_fitted(self, "state_")
        return self.state_.model

    def save(self, path):
        check_is_fitted(self, "state_")
        return save_checkpoint(self.state_, path)

    @classmethod
    def load(cls, path) -> "ContrastivePretrainer":
        state = load_checkpoint(path)
        cfg = state.config
        est = cls(total_steps=cfg.train.total_steps, batch_size=cfg.train.batch_size, lr=cfg.train.lr,
                  delta=cfg.train.delta, strategy=cfg.strategy.value, caption_style=cfg.caption_style.value,
                  mask_prob=cfg.mask_prob, use_sla=cfg.loss.use_sla, use_vv=cfg.loss.use_vv,
                  use_symmetric_vt=cfg.loss.use_symmetric_vt, use_lora=cfg.use_lora,
                  tau_local=cfg.loss.tau_local, image_size=cfg.encoder.image_size,
                  patch_grid=cfg.encoder.patch_grid, embed_dim=cfg.encoder.embed_dim, seed=cfg.train.seed)
        est.state_ = state
        est.history_ = []
        est.n_features_out_ = cfg.encoder.embed_dim
        return est


class LinearProbe(BaseEstimator, ClassifierMixin):
    """Logistic head on frozen embeddings from a fitted ``ContrastivePretrainer``."""

    def __init__(self, encoder=None, C=10.0, max_iter=2000, seed=0, num_classes=None):
        self.encoder = encoder
        self.C = C
        self.max_iter = max_iter
        self.seed = seed
        self.num_classes = num_classes

    def _features(self, X):
        if self.encoder is None:
            arr = np.asarray(X, dtype=float)
            if arr.ndim != 2:
                raise InputError("without an encoder, X must be a 2-D feature matrix")
            return arr
        return self.encoder.transform(X)

    def fit(self, X, y):
        y = np.asarray(y, dtype=int)
        feats = self._features(X)
        if len(feats) != len(y):
            raise InputError("X and y differ in length")
        k = self.num_classes or int(y.max()) + 1
        self.classes_ = np.arange(k)
        self.absent_classes_ = sorted(set(range(k)) - set(np.unique(y).tolist()))
        if self.absent_classes_:
            warnings.warn(f"classes {self.absent_classes_} have no training examples", stacklevel=2)
        self.scorer_ = fit_probe(feats, y, k, ProbeConfig(self.C, self.max_iter, self.seed))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "scorer_")
        return self.scorer_(self._features(X))

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)


class ZeroShotClassifier(BaseEstimator, ClassifierMixin):
    """Nearest class prompt in the joint space; no training beyond the encoder's."""

    def __init__(self, encoder=None, class_labels=("A", "B", "C", "D"), target_field="density", fill_meta=True,
                 temperature_for_probs=0.07):
        self.encoder = encoder
        self.class_labels = class_labels
        self.target_field = target_field
        self.fill_meta = fill_meta
        self.temperature_for_probs = temperature_for_probs

    def fit(self, X=None, y=None):
        if self.encoder is None:
            raise InputError("ZeroShotClassifier needs a fitted encoder")
        check_is_fitted(self.encoder, "state_")
        self.spec_ = ZeroShotSpec(list(self.class_labels), target_field=self.target_field,
                                  fill_meta=self.fill_meta, temperature_for_probs=self.temperature_for_probs,
                                  template=self.encoder.state_.caption_builder.template)
        self.classes_ = np.arange(len(self.spec_.class_labels))
        return self

    def _score(self, X, records):
        check_is_fitted(self, "spec_")
        records = check_records(records)
        state = self.encoder.state_
        return zero_shot_classify(state.model, state.tokenizer, records,
                                  check_images(X, self.encoder.image_size), self.spec_)

    def predict(self, X, records: Sequence[ImageRecord] = ()):
        """Class index per image; ``records`` supply the meta fields for each image's prompts."""
        return self._score(X, records)[0]

    def predict_proba(self, X, records: Sequence[ImageRecord] = ()):
        return self._score(X, records)[2]

    def decision_function(self, X, records: Sequence[ImageRecord] = ()):
        return self._score(X, records)[1]
