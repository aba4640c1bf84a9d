"""Pre-training loop, learning-rate schedule and checkpoints."""

from __future__ import annotations

import copy
import enum
import json
import math
import os
import shutil
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .captions import CaptionBuilder, CaptionStyle, CaptionTemplate
from .data_model import Study
from .encoders import EncoderConfig, DualEncoder, gather_sentence_features
from .errors import CheckpointError, InputError, NonFiniteLossError, VersionError
from .losses import BatchEmbeddings, LossBreakdown, LossConfig, Temperatures, total_loss
from .multiview import AugmentConfig, PairBatch, SamplingStrategy, assemble_batch
from .tokenizer import HashTokenizer

CHECKPOINT_FORMAT = "mama-checkpoint"
CHECKPOINT_VERSION = 1
_ARRAY_MAGIC = b"MAMAARR1"

METRICS_COLUMNS = ("step", "lr", "l_vv", "l_vt_primary", "l_vt_positive", "l_local_v", "l_local_t", "w", "total")


class OptimizerKind(str, enum.Enum):
    ADAMW = "adamw"
    SGD = "sgd"


@dataclass
class TrainConfig:
    lr: float = 4e-5
    weight_decay: float = 0.1
    total_steps: int = 40_000
    warmup_steps: int = 4_000
    delta: int = 8_000
    batch_size: int = 144
    seed: int = 0
    optimizer: OptimizerKind = OptimizerKind.ADAMW
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    momentum: float = 0.9
    grad_clip: float = 1.0

    def __post_init__(self):
        self.optimizer = OptimizerKind(self.optimizer)
        self.betas = tuple(float(b) for b in self.betas)
        if not self.lr > 0:
            raise InputError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise InputError("need 0 <= warmup_steps <= total_steps")
        if self.delta > self.total_steps:
            raise InputError("delta must not exceed total_steps")


FULL_PRESET = TrainConfig()
DESK_PRESET = TrainConfig(lr=1e-3, total_steps=500, warmup_steps=50, delta=100, batch_size=16)
PRESETS = {"full": FULL_PRESET, "desk": DESK_PRESET}
# a 500-step run on 4x4 patch grids localizes far more reliably with a softer local temperature
LOSS_PRESETS = {"full": LossConfig(), "desk": LossConfig(tau_local=0.5)}


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warm-up to ``lr`` followed by cosine annealing to zero."""
    if not 0 <= step <= config.total_steps:
        raise InputError(f"step {step} outside [0, {config.total_steps}]")
    if step < config.warmup_steps:
        return config.lr * step / config.warmup_steps
    span = config.total_steps - config.warmup_steps
    if span == 0:
        return config.lr
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * (step - config.warmup_steps) / span))


@dataclass
class PretrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=lambda: copy.deepcopy(DESK_PRESET))
    loss: LossConfig = field(default_factory=lambda: copy.deepcopy(LOSS_PRESETS["desk"]))
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    strategy: SamplingStrategy = SamplingStrategy.INTRA_STUDY
    caption_style: CaptionStyle = CaptionStyle.STRUCTURED
    mask_prob: float = 0.8
    use_lora: bool = True
    template_text: str | None = None

    def __post_init__(self):
        self.strategy = SamplingStrategy(self.strategy)
        self.caption_style = CaptionStyle(self.caption_style)
        # the SLA switch-on step lives in TrainConfig; LossConfig follows it
        self.loss.delta = self.train.delta

    def to_dict(self):
        train = asdict(self.train)
        train["optimizer"] = self.train.optimizer.value
        train["betas"] = list(self.train.betas)
        augment = asdict(self.augment)
        augment["crop_scale"] = list(self.augment.crop_scale)
        return {
            "encoder": self.encoder.to_dict(),
            "train": train,
            "loss": asdict(self.loss),
            "augment": augment,
            "strategy": self.strategy.value,
            "caption_style": self.caption_style.value,
            "mask_prob": self.mask_prob,
            "use_lora": self.use_lora,
            "template_text": self.template_text,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        aug = dict(d.pop("augment"))
        aug["crop_scale"] = tuple(aug["crop_scale"])
        return cls(encoder=EncoderConfig(**d.pop("encoder")), train=TrainConfig(**d.pop("train")),
                   loss=LossConfig(**d.pop("loss")), augment=AugmentConfig(**aug), **d)


class TrainState:
    """Everything that evolves during pre-training: weights, optimizer, rng and step."""

    def __init__(self, config: PretrainConfig, dtype=torch.float32):
        self.config = config
        self.model = DualEncoder(config.encoder, use_lora=config.use_lora, tau2_init=config.loss.tau2_init)
        self.model.to(dtype)
        self.optimizer = make_optimizer(self.trainable_parameters(), config.train)
        self.rng = np.random.default_rng(config.train.seed)
        self.step = 0
        self.tokenizer = HashTokenizer(config.encoder.vocab_size, config.encoder.max_text_tokens)
        template = CaptionTemplate.parse(config.template_text) if config.template_text else None
        self.caption_builder = CaptionBuilder(config.caption_style, template, config.mask_prob)

    def trainable_parameters(self):
        return [p for p in self.model.parameters() if p.requires_grad]

    def named_trainable(self):
        return [(n, p) for n, p in self.model.named_parameters() if p.requires_grad]


def make_optimizer(params, cfg: TrainConfig):
    params = list(params)
    if cfg.optimizer is OptimizerKind.ADAMW:
        return torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _images_tensor(images, model):
    ref = next(model.parameters())
    return torch.as_tensor(np.stack(images), dtype=ref.dtype, device=ref.device)


def batch_embeddings(state: TrainState, batch: PairBatch) -> BatchEmbeddings:
    model = state.model
    b = len(batch)
    glob, local = model.encode_images(_images_tensor(batch.primary_images + batch.positive_images, model))
    ids, n_sent = state.tokenizer.batch(batch.captions)
    ids = torch.as_tensor(ids)
    t_glob, t_local = model.encode_texts(ids)
    sentences, mask = gather_sentence_features(t_local, ids, n_sent)
    return BatchEmbeddings(v=glob[:b], v_pos=glob[b:], t=t_glob, patches=local[:b, 1:],
                           sentences=sentences, sentence_mask=mask)


def train_step(state: TrainState, batch: PairBatch) -> tuple[TrainState, LossBreakdown, float]:
    """One forward/backward/update; returns the state, the loss breakdown and the lr used."""
    cfg = state.config
    model = state.model
    model.train()
    lr = lr_at(min(state.step, cfg.train.total_steps), cfg.train)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    emb = batch_embeddings(state, batch)
    temps = Temperatures(cfg.loss.tau1, model.tau2, cfg.loss.tau_local)
    breakdown = total_loss(emb, temps, state.step, config=cfg.loss)
    if not all(math.isfinite(v) for v in breakdown.as_dict().values()):
        raise NonFiniteLossError(breakdown.as_dict())
    state.optimizer.zero_grad(set_to_none=True)
    breakdown.loss.backward()
    params = state.trainable_parameters()
    if cfg.train.grad_clip and cfg.train.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(params, cfg.train.grad_clip)
    state.optimizer.step()
    with torch.no_grad():
        model.tau2.clamp_(cfg.loss.tau2_min, cfg.loss.tau2_max)
    state.step += 1
    breakdown.loss = None
    return state, breakdown, lr


def next_batch(state: TrainState, studies: Sequence[Study], images: Callable) -> PairBatch:
    cfg = state.config
    return assemble_batch(studies, cfg.train.batch_size, cfg.strategy, state.caption_builder, state.rng,
                          images=images, augment_config=cfg.augment)


def format_metrics_row(step, lr, breakdown: LossBreakdown) -> str:
    vals = [str(step), repr(float(lr))] + [repr(float(getattr(breakdown, k))) for k in METRICS_COLUMNS[2:]]
    return ",".join(vals)


class MetricsLog:
    """Append-only CSV of per-step loss terms."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists() or self.path.stat().st_size == 0:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(",".join(METRICS_COLUMNS) + "\n")

    def append(self, step, lr, breakdown):
        with self.path.open("a") as fh:
            fh.write(format_metrics_row(step, lr, breakdown) + "\n")


def read_metrics(path) -> list[dict]:
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    return [{k: (int(v) if k == "step" else float(v)) for k, v in zip(header, line.split(","))}
            for line in lines[1:]]


def run_training(state: TrainState, studies: Sequence[Study], images: Callable, steps: int | None = None,
                 metrics_path=None, callback=None) -> list[LossBreakdown]:
    """Train until ``steps`` more updates or the configured total, whichever comes first."""
    total = state.config.train.total_steps
    end = total if steps is None else min(total, state.step + steps)
    log = MetricsLog(metrics_path) if metrics_path else None
    history = []
    while state.step < end:
        step = state.step
        batch = next_batch(state, studies, images)
        state, breakdown, lr = train_step(state, batch)
        history.append(breakdown)
        if log:
            log.append(step, lr, breakdown)
        if callback:
            callback(step, lr, breakdown)
    return history


# --- checkpoints -------------------------------------------------------------

def write_array(path, array) -> int:
    arr = np.require(np.asarray(array, dtype="<f4"), requirements="C")  # keeps 0-d shapes
    header = _ARRAY_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    data = arr.tobytes()
    Path(path).write_bytes(header + data)
    return zlib.crc32(data)


def read_array(path, name=None, crc=None) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read array for {name}: {exc}", parameter=name) from None
    if raw[: len(_ARRAY_MAGIC)] != _ARRAY_MAGIC or len(raw) < len(_ARRAY_MAGIC) + 4:
        raise CheckpointError(f"corrupt array file for parameter {name!r}: bad header", parameter=name)
    off = len(_ARRAY_MAGIC)
    (ndim,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) < off + 4 * ndim:
        raise CheckpointError(f"corrupt array file for parameter {name!r}: truncated shape", parameter=name)
    shape = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    data = raw[off:]
    if len(data) != 4 * int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"corrupt array file for parameter {name!r}: size mismatch", parameter=name)
    if crc is not None and zlib.crc32(data) != crc:
        raise CheckpointError(f"corrupt array file for parameter {name!r}: checksum mismatch", parameter=name)
    return np.frombuffer(data, dtype="<f4").reshape(shape).copy()


def _safe_name(name):
    return name.replace("/", "__")


def _rng_state_to_json(rng):
    st = rng.bit_generator.state
    return json.loads(json.dumps(st, default=int))


def save_checkpoint(state: TrainState, path) -> Path:
    """Atomically write weights, optimizer moments, rng state and step counter to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=path.name + ".tmp-", dir=path.parent))
    try:
        arrays = {}
        names = [n for n, _ in state.model.named_parameters()]
        for n, p in state.model.named_parameters():
            key = f"param/{n}"
            fname = _safe_name(key) + ".bin"
            arrays[key] = {"file": fname, "shape": list(p.shape),
                           "crc32": write_array(tmp / fname, p.detach().cpu().numpy())}
        params = dict(state.model.named_parameters())
        index = {id(p): n for n, p in params.items()}
        for p, st in state.optimizer.state.items():
            n = index[id(p)]
            for k, v in st.items():
                key = f"opt/{n}/{k}"
                fname = _safe_name(key) + ".bin"
                arrays[key] = {"file": fname, "shape": list(torch.as_tensor(v).shape),
                               "crc32": write_array(tmp / fname, torch.as_tensor(v).detach().cpu().numpy())}
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "step": state.step,
            "config": state.config.to_dict(),
            "parameters": names,
            "arrays": arrays,
            "rng_state": _rng_state_to_json(state.rng),
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        if path.exists():
            old = path.with_name(path.name + ".old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_checkpoint(path, expected_config: PretrainConfig | None = None) -> TrainState:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest at {path}: {exc}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint format {manifest.get('format')!r} "
                           f"version {manifest.get('version')!r}")
    if expected_config is not None and expected_config.to_dict() != manifest["config"]:
        raise VersionError("checkpoint config does not match the requested config")
    config = PretrainConfig.from_dict(manifest["config"])
    state = TrainState(config)
    arrays = manifest["arrays"]

    def load(key):
        meta = arrays.get(key)
        if meta is None:
            raise CheckpointError(f"checkpoint lacks array {key!r}", parameter=key)
        arr = read_array(path / meta["file"], key, meta.get("crc32"))
        if list(arr.shape) != list(meta["shape"]):
            raise CheckpointError(f"shape mismatch for {key!r}", parameter=key)
        return torch.from_numpy(arr)

    params = dict(state.model.named_parameters())
    if sorted(params) != sorted(manifest["parameters"]):
        raise VersionError("checkpoint parameter set does not match the model")
    with torch.no_grad():
        for n, p in params.items():
            p.copy_(load(f"param/{n}"))
    opt_state = {}
    for n, p in params.items():
        keys = [k for k in arrays if k.startswith(f"opt/{n}/")]
        if keys:
            opt_state[p] = {k.rsplit("/", 1)[1]: load(k) for k in keys}
    # rebuild optimizer state keyed by the live parameter objects
    for p, st in opt_state.items():
        if "step" in st:
            st["step"] = st["step"].reshape(())
        state.optimizer.state[p] = st
    state.step = int(manifest["step"])
    state.rng.bit_generator.state = manifest["rng_state"]
    return state
