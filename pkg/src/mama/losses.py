"""Contrastive objectives: multi-view visual, symmetric visual-text and local alignment.

All functions take torch tensors and are differentiable; they work in any
floating dtype (the gradient tests run them in float64).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import InputError, NumericError


@dataclass
class Temperatures:
    tau1: float = 0.5
    tau2: torch.Tensor | float = 0.07
    tau_local: float = 0.1

    def __post_init__(self):
        for name in ("tau1", "tau2", "tau_local"):
            value = getattr(self, name)
            if isinstance(value, torch.Tensor):
                value = value.detach()
            if not float(value) > 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass
class LossConfig:
    tau1: float = 0.5
    tau_local: float = 0.1
    tau2_init: float = 0.07
    tau2_min: float = 1e-3
    tau2_max: float = 1.0
    delta: int = 8000
    w_max: float = 1.0
    use_vv: bool = True
    use_symmetric_vt: bool = True
    use_sla: bool = True
    vv_variant: str = "first_view"  # or "simclr" for the 2B-way NT-Xent

    def weight_at(self, step: int) -> float:
        if step < 0:
            raise InputError(f"step must be non-negative, got {step}")
        if not self.use_sla:
            return 0.0
        return 0.0 if step < self.delta else float(self.w_max)


@dataclass
class CorrespondenceMatrix:
    values: torch.Tensor
    sentence_mask: torch.Tensor | None = None

    def __post_init__(self):
        if self.sentence_mask is None:
            self.sentence_mask = torch.ones(self.values.shape[0], dtype=torch.bool, device=self.values.device)


@dataclass
class LossBreakdown:
    l_vv: float
    l_vt_primary: float
    l_vt_positive: float
    l_local_v: float
    l_local_t: float
    w: float
    total: float
    loss: torch.Tensor | None = field(default=None, compare=False, repr=False)

    FIELDS = ("l_vv", "l_vt_primary", "l_vt_positive", "l_local_v", "l_local_t", "w", "total")

    def identity_residual(self) -> float:
        expected = self.l_vv + self.l_vt_primary + self.l_vt_positive + self.w * (self.l_local_v + self.l_local_t) / 2
        return abs(self.total - expected)

    def as_dict(self):
        return {k: getattr(self, k) for k in self.FIELDS}


@dataclass
class BatchEmbeddings:
    """Raw (unnormalized) encoder outputs for one mini-batch."""

    v: torch.Tensor              # (B, d) primary-view global
    v_pos: torch.Tensor          # (B, d) positive-view global
    t: torch.Tensor              # (B, d) caption global
    patches: torch.Tensor        # (B, P, d) primary-view local patch features
    sentences: torch.Tensor      # (B, S_max, d) sentence features
    sentence_mask: torch.Tensor  # (B, S_max) bool


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite input to contrastive loss")


def _symmetric_ce(logits):
    target = torch.arange(logits.shape[0], device=logits.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.t(), target))


def info_nce_vv(V, V_pos, tau1, variant="first_view"):
    """Multi-view InfoNCE; the positive replaces the self-similarity in each row's denominator."""
    _check_finite(V, V_pos)
    if variant == "simclr":
        z = torch.cat([V, V_pos], dim=0)
        b = V.shape[0]
        logits = z @ z.t() / tau1
        logits = logits.masked_fill(torch.eye(2 * b, dtype=torch.bool, device=z.device), float("-inf"))
        target = torch.cat([torch.arange(b, 2 * b), torch.arange(b)]).to(z.device)
        return F.cross_entropy(logits, target)
    if variant != "first_view":
        raise ValueError(f"unknown vv variant {variant!r}")
    logits = V @ V.t() / tau1
    pos = (V * V_pos).sum(dim=1) / tau1
    logits = logits - torch.diag(torch.diagonal(logits)) + torch.diag(pos)
    # logsumexp subtracts the row max internally
    return (torch.logsumexp(logits, dim=1) - pos).mean()


def clip_vt(V, T, tau2):
    _check_finite(V, T)
    return _symmetric_ce(V @ T.t() / tau2)


def correspondence_matrix(s, p, sentence_mask=None) -> CorrespondenceMatrix:
    if (s.norm(dim=-1) == 0).any() or (p.norm(dim=-1) == 0).any():
        raise NumericError("zero feature row in correspondence matrix")
    return CorrespondenceMatrix(F.normalize(s, dim=-1) @ F.normalize(p, dim=-1).t(), sentence_mask)


def visual_local_score(C: CorrespondenceMatrix):
    """Mean over real sentences of each sentence's best-matching patch similarity."""
    mask = C.sentence_mask
    if not bool(mask.any()):
        raise InputError("all sentences are masked")
    return C.values.max(dim=1).values[mask].mean()


def text_local_score(C: CorrespondenceMatrix):
    """Mean over patches of each patch's best-matching real sentence similarity."""
    mask = C.sentence_mask
    if not bool(mask.any()):
        raise InputError("all sentences are masked")
    vals = C.values.masked_fill(~mask[:, None], float("-inf"))
    return vals.max(dim=0).values.mean()


def pad_sentence_list(sentence_feats):
    """Stack ragged (S_i, d) matrices into (B, S_max, d) plus a validity mask."""
    s_max = max(s.shape[0] for s in sentence_feats)
    d = sentence_feats[0].shape[1]
    out = sentence_feats[0].new_zeros(len(sentence_feats), s_max, d)
    mask = torch.zeros(len(sentence_feats), s_max, dtype=torch.bool)
    for i, s in enumerate(sentence_feats):
        out[i, : s.shape[0]] = s
        mask[i, : s.shape[0]] = True
    return out, mask


def local_score_matrices(sentences, sentence_mask, patches):
    """Aggregated scores c_v[i, j], c_t[i, j]: sentences of report j against patches of image i."""
    s = F.normalize(sentences, dim=-1)
    p = F.normalize(patches, dim=-1)
    C = torch.einsum("jsd,ipd->ijsp", s, p)  # (B_img, B_txt, S, P)
    m = sentence_mask.to(C.dtype)            # (B_txt, S)
    row_max = C.max(dim=3).values            # best patch per sentence
    c_v = (row_max * m[None]).sum(dim=2) / m.sum(dim=1)[None]
    col_max = C.masked_fill(~sentence_mask[None, :, :, None], float("-inf")).max(dim=2).values
    c_t = col_max.mean(dim=2)
    return c_v, c_t


def local_loss(sentences, patches, tau_local, sentence_mask=None):
    """Returns (l_local_v, l_local_t).

    ``sentences`` is either a padded (B, S_max, d) tensor with ``sentence_mask``
    or a list of per-report (S_i, d) tensors; ``patches`` is (B, P, d) or a list.
    """
    if isinstance(sentences, (list, tuple)):
        if any(s.shape[0] == 0 for s in sentences):
            raise InputError("a report has zero sentences")
        sentences, sentence_mask = pad_sentence_list(list(sentences))
    if isinstance(patches, (list, tuple)):
        patches = torch.stack(list(patches))
    if sentence_mask is None:
        sentence_mask = torch.ones(sentences.shape[:2], dtype=torch.bool)
    sentence_mask = sentence_mask.to(sentences.device)
    if not bool(sentence_mask.any(dim=1).all()):
        raise InputError("a report has zero sentences")
    _check_finite(sentences, patches)
    c_v, c_t = local_score_matrices(sentences, sentence_mask, patches)
    return _symmetric_ce(c_v / tau_local), _symmetric_ce(c_t / tau_local)


def total_loss(emb: BatchEmbeddings, temps: Temperatures, step: int, delta: int | None = None,
               w_max: float | None = None, config: LossConfig | None = None) -> LossBreakdown:
    cfg = config or LossConfig()
    if delta is not None or w_max is not None:
        cfg = LossConfig(**{**cfg.__dict__, **{k: v for k, v in (("delta", delta), ("w_max", w_max)) if v is not None}})
    w = cfg.weight_at(step)
    v = F.normalize(emb.v, dim=-1)
    v_pos = F.normalize(emb.v_pos, dim=-1)
    t = F.normalize(emb.t, dim=-1)
    zero = v.new_zeros(())

    l_vv = info_nce_vv(v, v_pos, temps.tau1, cfg.vv_variant) if cfg.use_vv else zero
    l_vt = clip_vt(v, t, temps.tau2)
    l_vt_pos = clip_vt(v_pos, t, temps.tau2) if cfg.use_symmetric_vt else zero
    if cfg.use_sla and w > 0:
        l_lv, l_lt = local_loss(emb.sentences, emb.patches, temps.tau_local, emb.sentence_mask)
    elif cfg.use_sla:
        # reported but kept out of the graph while the weight is zero
        with torch.no_grad():
            l_lv, l_lt = local_loss(emb.sentences, emb.patches, temps.tau_local, emb.sentence_mask)
    else:
        l_lv = l_lt = zero
    loss = l_vv + l_vt + l_vt_pos + w * (l_lv + l_lt) / 2
    parts = [float(x.detach()) for x in (l_vv, l_vt, l_vt_pos, l_lv, l_lt)]
    total = parts[0] + parts[1] + parts[2] + w * (parts[3] + parts[4]) / 2
    return LossBreakdown(*parts, w, total, loss=loss)
