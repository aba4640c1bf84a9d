"""Vision/text encoders, projection heads and low-rank adaptation.

Both backbones are tiny pre-norm transformers. The vision side cuts the
image into a ``patch_grid`` of square patches and prepends a CLS token; the
text side embeds token ids and runs causal (decoder-only) or bidirectional
self-attention. Four linear heads map backbone tokens to the shared
embedding space: ``g_v``/``g_t`` feed the pooled global embedding and
``h_v``/``h_t`` feed the per-token local embedding.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import AlignmentError, InputError, NumericError, ShapeError
from .tokenizer import CLS_ID, PAD_ID, SEP_ID


class TextEncoderKind(str, enum.Enum):
    BIDIRECTIONAL = "bidirectional"
    DECODER_ONLY = "decoder_only"


class TokenRole(enum.IntEnum):
    CLS = 0
    PATCH = 1
    SEP = 2
    WORD = 3
    PAD = 4


@dataclass
class EncoderConfig:
    embed_dim: int = 64
    image_size: int = 32
    patch_grid: tuple[int, int] = (4, 4)
    max_text_tokens: int = 128
    vision_width: int = 64
    text_width: int = 64
    depth: int = 2
    heads: int = 4
    vocab_size: int = 4096
    lora_rank: int = 4
    lora_alpha: float = 8.0
    text_kind: TextEncoderKind = TextEncoderKind.DECODER_ONLY
    seed: int = 0

    def __post_init__(self):
        self.patch_grid = tuple(int(v) for v in self.patch_grid)
        self.text_kind = TextEncoderKind(self.text_kind)
        if self.embed_dim <= 0:
            raise ShapeError("embed_dim must be positive")
        rows, cols = self.patch_grid
        if rows < 1 or cols < 1:
            raise ShapeError("patch grid needs at least one patch")
        if self.image_size % rows or self.image_size % cols:
            raise ShapeError(f"image_size {self.image_size} not divisible by patch grid {self.patch_grid}")
        if self.lora_rank < 0 or self.lora_rank > self.text_width:
            raise ShapeError(f"lora_rank {self.lora_rank} exceeds adapted matrix dims")
        for w in (self.vision_width, self.text_width):
            if w % self.heads:
                raise ShapeError(f"width {w} not divisible by {self.heads} heads")

    @property
    def num_patches(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]

    @property
    def patch_shape(self) -> tuple[int, int]:
        return self.image_size // self.patch_grid[0], self.image_size // self.patch_grid[1]

    def to_dict(self):
        d = asdict(self)
        d["patch_grid"] = list(self.patch_grid)
        d["text_kind"] = self.text_kind.value
        return d


FULL_SCALE_ENCODER = dict(embed_dim=512, image_size=518, patch_grid=(37, 37), max_text_tokens=512,
                          vision_width=768, text_width=2560, depth=12, heads=16, lora_rank=8,
                          lora_alpha=16.0)


@dataclass
class EmbeddingSet:
    """One sample's global vector plus its per-token local matrix."""

    global_: np.ndarray
    local: np.ndarray
    token_roles: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if not np.all(np.isfinite(self.global_)):
            raise NumericError("global embedding is not finite")
        if self.local.shape[0] != len(self.token_roles):
            raise ShapeError("local row count must equal token count")


def lora_forward(x, W, A, B, alpha, r):
    """(W + alpha/r * B @ A) @ x, or W @ x when r == 0."""
    x = np.asarray(x, dtype=float)
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"W {W.shape} incompatible with x {x.shape}")
    if r == 0:
        return W @ x
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != (r, W.shape[1]) or B.shape != (W.shape[0], r):
        raise ShapeError(f"LoRA factors A {A.shape}, B {B.shape} do not fit W {W.shape} at rank {r}")
    return W @ x + (alpha / r) * (B @ (A @ x))


def l2_normalize(v):
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v)
    if not norm > 0:
        raise NumericError("cannot normalize a zero (or non-finite) vector")
    return v / norm


class LoRALinear(nn.Module):
    """Linear layer with an optional low-rank update ``(alpha/r) B A``."""

    def __init__(self, in_features, out_features, rank=0, alpha=1.0, bias=True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.rank = rank
        self.scaling = alpha / rank if rank else 0.0
        if rank:
            self.lora_A = nn.Parameter(torch.empty(rank, in_features))
            self.lora_B = nn.Parameter(torch.zeros(out_features, rank))
            nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        else:
            self.register_parameter("lora_A", None)
            self.register_parameter("lora_B", None)

    def forward(self, x):
        out = F.linear(x, self.weight, self.bias)
        if self.rank:
            out = out + self.scaling * F.linear(F.linear(x, self.lora_A), self.lora_B)
        return out


class Block(nn.Module):
    def __init__(self, width, heads, lora_rank=0, lora_alpha=1.0):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(width)
        self.q = LoRALinear(width, width, lora_rank, lora_alpha)
        self.k = LoRALinear(width, width, lora_rank, lora_alpha)
        self.v = LoRALinear(width, width, lora_rank, lora_alpha)
        self.o = LoRALinear(width, width, lora_rank, lora_alpha)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 2 * width), nn.GELU(), nn.Linear(2 * width, width))

    def attend(self, x, mask):
        b, n, w = x.shape
        hd = w // self.heads

        def split(t):
            return t.view(b, n, self.heads, hd).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None], float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.o(out.transpose(1, 2).reshape(b, n, w))

    def forward(self, x, mask=None):
        x = x + self.attend(self.ln1(x), mask)
        return x + self.mlp(self.ln2(x))


class VisionBackbone(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        ph, pw = cfg.patch_shape
        self.patch_embed = nn.Linear(ph * pw, cfg.vision_width)
        self.cls = nn.Parameter(torch.randn(cfg.vision_width) * 0.02)
        self.pos = nn.Parameter(torch.randn(cfg.num_patches + 1, cfg.vision_width) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg.vision_width, cfg.heads) for _ in range(cfg.depth))
        self.ln = nn.LayerNorm(cfg.vision_width)

    def patchify(self, images):
        rows, cols = self.cfg.patch_grid
        ph, pw = self.cfg.patch_shape
        b = images.shape[0]
        x = images.reshape(b, rows, ph, cols, pw).permute(0, 1, 3, 2, 4)
        return x.reshape(b, rows * cols, ph * pw)  # row-major patch order

    def forward(self, images):
        x = self.patch_embed(self.patchify(images))
        cls = self.cls.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.ln(x)


class TextBackbone(nn.Module):
    def __init__(self, cfg: EncoderConfig, lora_rank: int):
        super().__init__()
        self.cfg = cfg
        self.kind = cfg.text_kind
        self.embed = nn.Embedding(cfg.vocab_size, cfg.text_width)
        self.pos = nn.Parameter(torch.randn(cfg.max_text_tokens, cfg.text_width) * 0.02)
        self.blocks = nn.ModuleList(
            Block(cfg.text_width, cfg.heads, lora_rank, cfg.lora_alpha) for _ in range(cfg.depth))
        self.ln = nn.LayerNorm(cfg.text_width)

    def attention_mask(self, ids):
        n = ids.shape[1]
        valid = ids != PAD_ID
        mask = valid[:, None, :].expand(-1, n, -1)
        if self.kind is TextEncoderKind.DECODER_ONLY:
            mask = mask & torch.ones(n, n, dtype=torch.bool, device=ids.device).tril()
        # padded query rows attend to themselves so softmax stays finite
        return mask | torch.eye(n, dtype=torch.bool, device=ids.device)

    def forward(self, ids):
        if ids.shape[1] > self.cfg.max_text_tokens:
            raise ShapeError(f"sequence length {ids.shape[1]} exceeds max_text_tokens {self.cfg.max_text_tokens}")
        x = self.embed(ids) + self.pos[: ids.shape[1]]
        mask = self.attention_mask(ids)
        for blk in self.blocks:
            x = blk(x, mask)
        return self.ln(x)

    def base_parameters(self):
        return [p for n, p in self.named_parameters() if "lora_" not in n]

    def lora_parameters(self):
        return [p for n, p in self.named_parameters() if "lora_" in n]


def text_token_roles(ids):
    ids = np.asarray(ids)
    roles = np.full(ids.shape, TokenRole.WORD, dtype=np.int64)
    roles[ids == CLS_ID] = TokenRole.CLS
    roles[ids == SEP_ID] = TokenRole.SEP
    roles[ids == PAD_ID] = TokenRole.PAD
    return roles


def image_token_roles(num_patches):
    return np.array([TokenRole.CLS] + [TokenRole.PATCH] * num_patches, dtype=np.int64)


def last_valid_index(ids):
    """Index of the last non-PAD token per row."""
    valid = (ids != PAD_ID).long()
    positions = torch.arange(ids.shape[1], device=ids.device)
    return (valid * (positions + 1)).argmax(dim=1)


class DualEncoder(nn.Module):
    """Dual encoder with global/local heads and the learnable CLIP temperature."""

    def __init__(self, cfg: EncoderConfig, use_lora: bool = True, tau2_init: float = 0.07):
        super().__init__()
        self.cfg = cfg
        self.use_lora = use_lora and cfg.lora_rank > 0
        torch.manual_seed(cfg.seed)
        self.vision = VisionBackbone(cfg)
        self.text = TextBackbone(cfg, cfg.lora_rank if self.use_lora else 0)
        d = cfg.embed_dim
        self.g_v = nn.Linear(cfg.vision_width, d)
        self.h_v = nn.Linear(cfg.vision_width, d)
        self.g_t = nn.Linear(cfg.text_width, d)
        self.h_t = nn.Linear(cfg.text_width, d)
        self.tau2 = nn.Parameter(torch.tensor(float(tau2_init)))
        if self.use_lora:
            for p in self.text.base_parameters():
                p.requires_grad_(False)

    def project_image_tokens(self, tokens):
        """Heads applied to backbone tokens: (global, local)."""
        return self.g_v(tokens).mean(dim=1), self.h_v(tokens)

    def encode_images(self, images):
        if images.ndim != 3 or images.shape[1:] != (self.cfg.image_size, self.cfg.image_size):
            raise ShapeError(f"expected images of shape (B, {self.cfg.image_size}, {self.cfg.image_size}), "
                             f"got {tuple(images.shape)}")
        return self.project_image_tokens(self.vision(images))

    def project_text_tokens(self, tokens, ids):
        valid = (ids != PAD_ID)
        g = self.g_t(tokens)
        if self.cfg.text_kind is TextEncoderKind.DECODER_ONLY:
            glob = g[torch.arange(ids.shape[0]), last_valid_index(ids)]
        else:
            w = valid.to(g.dtype).unsqueeze(-1)
            glob = (g * w).sum(dim=1) / w.sum(dim=1)
        return glob, self.h_t(tokens)

    def encode_texts(self, ids):
        if ids.ndim != 2 or ids.shape[1] == 0 or bool((ids != PAD_ID).sum(dim=1).eq(0).any()):
            raise InputError("every text needs at least one non-padding token")
        return self.project_text_tokens(self.text(ids), ids)

    def lora_parameters(self):
        return self.text.lora_parameters()

    def frozen_parameters(self):
        return [p for p in self.parameters() if not p.requires_grad]


def _as_tensor(x, model):
    ref = next(model.parameters())
    return torch.as_tensor(np.asarray(x), dtype=ref.dtype, device=ref.device)


@torch.no_grad()
def encode_image(image, model: DualEncoder) -> EmbeddingSet:
    glob, local = model.encode_images(_as_tensor(image, model)[None])
    return EmbeddingSet(glob[0].cpu().numpy(), local[0].cpu().numpy(), image_token_roles(model.cfg.num_patches))


@torch.no_grad()
def encode_text(token_ids, model: DualEncoder, encoder_kind=None) -> EmbeddingSet:
    token_ids = np.asarray(token_ids, dtype=np.int64)
    if token_ids.size == 0:
        raise InputError("empty token sequence")
    prev = model.cfg.text_kind
    if encoder_kind is not None:
        model.cfg.text_kind = model.text.kind = TextEncoderKind(encoder_kind)
    try:
        ids = torch.as_tensor(token_ids)[None]
        glob, local = model.encode_texts(ids)
    finally:
        model.cfg.text_kind = model.text.kind = prev
    return EmbeddingSet(glob[0].cpu().numpy(), local[0].cpu().numpy(), text_token_roles(token_ids))


def select_sentence_features(local, token_roles, sentence_count):
    roles = np.asarray(token_roles)
    idx = np.flatnonzero(roles == TokenRole.SEP)
    if len(idx) != sentence_count:
        raise AlignmentError(f"found {len(idx)} SEP tokens for {sentence_count} sentences")
    return local[idx]


def select_patch_features(local, token_roles):
    roles = np.asarray(token_roles)
    if np.count_nonzero(roles == TokenRole.CLS) != 1:
        raise AlignmentError("expected exactly one CLS token")
    return local[np.flatnonzero(roles == TokenRole.PATCH)]


def gather_sentence_features(local, ids, n_sentences):
    """Batched SEP-row selection: (B, S_max, d) features and a (B, S_max) mask."""
    b = local.shape[0]
    is_sep = ids == SEP_ID
    counts = is_sep.sum(dim=1)
    if not torch.equal(counts, torch.as_tensor(n_sentences, device=counts.device)):
        raise AlignmentError(f"SEP counts {counts.tolist()} differ from sentence counts {list(n_sentences)}")
    s_max = max(int(counts.max()), 1)
    # rank of each SEP among the SEPs of its row
    order = torch.cumsum(is_sep.long(), dim=1) - 1
    out = local.new_zeros(b, s_max, local.shape[-1])
    mask = torch.zeros(b, s_max, dtype=torch.bool, device=local.device)
    rows, cols = torch.nonzero(is_sep, as_tuple=True)
    out = out.index_put((rows, order[rows, cols]), local[rows, cols])
    mask[rows, order[rows, cols]] = True
    return out, mask
