"""Zero-shot, linear-probe and full fine-tune evaluation plus the metric suite."""

from __future__ import annotations

import copy
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata
from sklearn.linear_model import LogisticRegression

from .captions import (_PLACEHOLDER, BIRADS_DESCRIPTIONS, CLINICAL_FIELDS, DENSITY_DESCRIPTIONS, CaptionStyle,
                       CaptionTemplate, render_template)
from .data_model import ImageRecord, Study, flatten, subsample_fraction
from .encoders import DualEncoder
from .errors import ConfigError, InputError
from .inference import embed_images, embed_texts
from .multiview import AugmentConfig, augment
from .tokenizer import HashTokenizer
from .trainer import TrainConfig, lr_at

log = logging.getLogger(__name__)

PROBE_FRACTIONS = (0.01, 0.1, 1.0)


class SpecError(ConfigError):
    """A zero-shot class label cannot be expressed through the prompt template."""


# --- metrics -----------------------------------------------------------------

def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return cm


def per_class_recall(confusion, absent=()) -> list[float | None]:
    cm = np.asarray(confusion)
    support = cm.sum(axis=1)
    out = []
    for k in range(cm.shape[0]):
        if support[k] == 0 or k in absent:
            out.append(None)
        else:
            out.append(cm[k, k] / support[k])
    return out


def balanced_accuracy(confusion, absent=()) -> float:
    """Mean recall over classes with test support (and not listed in ``absent``)."""
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise InputError(f"confusion must be square, got shape {cm.shape}")
    if cm.sum() <= 0:
        raise InputError("confusion matrix is empty")
    recalls = [r for r in per_class_recall(cm, absent) if r is not None]
    if not recalls:
        raise InputError("no class has both support and a trained decision")
    return float(np.mean(recalls))


def binary_auc(scores, positives) -> float | None:
    """Mann-Whitney AUC with midranks for ties; None when one class is missing."""
    scores = np.asarray(scores, dtype=float)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # average ranks for ties
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc(scores, labels) -> float | None:
    """Binary AUC, or the macro one-vs-rest mean over classes present in ``labels``."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if len(labels) < 2:
        return None
    if scores.ndim == 1:
        return binary_auc(scores, labels == 1)
    if scores.shape[1] == 2:
        return binary_auc(scores[:, 1], labels == 1)
    present = np.unique(labels)
    if len(present) < 2:
        return None
    vals = [binary_auc(scores[:, k], labels == k) for k in present if k < scores.shape[1]]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def sensitivity_specificity(confusion) -> tuple[float | None, float | None]:
    cm = np.asarray(confusion)
    if cm.shape != (2, 2):
        raise InputError("sensitivity/specificity need a 2x2 confusion matrix")
    tn, fp, fn, tp = cm[0, 0], cm[0, 1], cm[1, 0], cm[1, 1]
    sens = tp / (tp + fn) if tp + fn else None
    spec = tn / (tn + fp) if tn + fp else None
    return (None if sens is None else float(sens), None if spec is None else float(spec))


@dataclass
class EvalReport:
    balanced_accuracy: float | None
    auc: float | None
    per_class_recall: list[float | None]
    confusion: np.ndarray
    sensitivity: float | None = None
    specificity: float | None = None
    mode: str = ""
    fraction: float | None = None
    absent_classes: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "fraction": self.fraction,
            "balanced_accuracy": self.balanced_accuracy,
            "auc": self.auc,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "n_test": int(self.confusion.sum()),
            "absent_classes": list(self.absent_classes),
        }
        for k, r in enumerate(self.per_class_recall):
            d[f"recall_{k}"] = r
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def confusion_csv(self) -> str:
        k = self.confusion.shape[0]
        lines = ["true\\pred," + ",".join(str(j) for j in range(k))]
        lines += [f"{i}," + ",".join(str(int(v)) for v in row) for i, row in enumerate(self.confusion)]
        return "\n".join(lines) + "\n"

    def save(self, directory, stem="eval") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        jp, cp = directory / f"{stem}_report.json", directory / f"{stem}_confusion.csv"
        jp.write_text(self.to_json())
        cp.write_text(self.confusion_csv())
        return jp, cp

    @classmethod
    def load(cls, directory, stem="eval") -> "EvalReport":
        directory = Path(directory)
        d = json.loads((directory / f"{stem}_report.json").read_text())
        rows = (directory / f"{stem}_confusion.csv").read_text().strip().splitlines()[1:]
        cm = np.array([[int(v) for v in r.split(",")[1:]] for r in rows], dtype=np.int64)
        recalls = [d[f"recall_{k}"] for k in range(cm.shape[0])]
        return cls(d["balanced_accuracy"], d["auc"], recalls, cm, d["sensitivity"], d["specificity"],
                   d["mode"], d["fraction"], d["absent_classes"])


def make_report(y_true, y_pred, scores, num_classes, absent=(), mode="", fraction=None) -> EvalReport:
    cm = confusion_matrix(y_true, y_pred, num_classes)
    sens = spec = None
    if num_classes == 2:
        sens, spec = sensitivity_specificity(cm)
    recalls = per_class_recall(cm, absent)
    bacc = None
    if any(r is not None for r in recalls):
        bacc = balanced_accuracy(cm, absent)
    else:
        warnings.warn("no test class was seen in training; balanced accuracy is undefined", stacklevel=2)
    return EvalReport(bacc, auc(scores, y_true), per_class_recall(cm, absent), cm,
                      sens, spec, mode, fraction, sorted(int(a) for a in absent))


# --- zero-shot ---------------------------------------------------------------

_TARGET_PLACEHOLDERS = {
    "density": {"density": str, "density_desc": lambda c: DENSITY_DESCRIPTIONS[c]},
    "birads": {"birads": str, "birads_desc": lambda c: BIRADS_DESCRIPTIONS[int(c)]},
    "findings": {"findings": str},
}


@dataclass
class ZeroShotSpec:
    class_labels: Sequence[str]
    target_field: str = "density"
    prompt_style: CaptionStyle = CaptionStyle.STRUCTURED
    fill_meta: bool = True
    temperature_for_probs: float = 0.07
    template: CaptionTemplate | None = None

    def __post_init__(self):
        self.class_labels = [str(c) for c in self.class_labels]
        self.prompt_style = CaptionStyle(self.prompt_style)
        if len(self.class_labels) < 2:
            raise SpecError("zero-shot needs at least two classes")
        if not self.temperature_for_probs > 0:
            raise SpecError("temperature_for_probs must be positive")


def class_prompt(record: ImageRecord, label: str, spec: ZeroShotSpec) -> str:
    """Prompt for one class: the record's meta fields plus the candidate label, no other findings."""
    target = spec.target_field
    subs = _TARGET_PLACEHOLDERS.get(target)
    if subs is None:
        raise SpecError(f"target field {target!r} cannot be substituted into a prompt")
    try:
        overrides = {k: fn(label) for k, fn in subs.items()}
    except (KeyError, ValueError):
        raise SpecError(f"label {label!r} is not a valid value for {target!r}") from None
    if spec.prompt_style is CaptionStyle.CLIP_STYLE:
        phrase = {"density": f"breast density {label}", "birads": f"BI-RADS category {label}",
                  "findings": label}[target]
        return f"a mammogram with {phrase}."
    if spec.prompt_style is CaptionStyle.TABULAR:
        raise SpecError("tabular prompts are not supported for zero-shot")
    template = spec.template or CaptionTemplate.default()
    if not set(subs) & set(template.placeholders):
        raise SpecError(f"template has no placeholder for target field {target!r}")
    # segments describing other clinical fields would leak the record's own labels into every prompt
    omit = set()
    for seg, seg_text in template.segments:
        names = set(_PLACEHOLDER.findall(seg_text))
        if not names & set(subs) and any(CLINICAL_FIELDS.get(n, target) != target for n in names):
            omit.add(seg)
    drop = set(k for k, f in CLINICAL_FIELDS.items() if f != target)
    if not spec.fill_meta:
        drop |= {k for k, m in template.keyword_vocab.items() if m}
    text, _ = render_template(record, template, drop=frozenset(drop), omit_segments=frozenset(omit),
                              overrides=overrides)
    return text


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def zero_shot_classify(model: DualEncoder, tokenizer: HashTokenizer, records: Sequence[ImageRecord], images,
                       spec: ZeroShotSpec):
    """Return (predictions, cosine score matrix N x K, class probabilities N x K)."""
    images = np.asarray(images)
    if len(records) != len(images):
        raise InputError("records and images differ in length")
    v = embed_images(model, images)
    k = len(spec.class_labels)
    prompts = [class_prompt(r, c, spec) for r in records for c in spec.class_labels]
    t = embed_texts(model, tokenizer, prompts).reshape(len(records), k, -1)
    scores = np.einsum("nd,nkd->nk", v, t)
    preds = np.argmax(scores, axis=1)  # ties go to the lowest class index
    return preds, scores, softmax(scores / spec.temperature_for_probs)


# --- linear probe ------------------------------------------------------------

@dataclass
class ProbeConfig:
    C: float = 10.0
    max_iter: int = 2000
    seed: int = 0


def _absent(train_labels, num_classes):
    return sorted(set(range(num_classes)) - set(np.unique(train_labels).tolist()))


def fit_probe(train_x, train_y, num_classes, config: ProbeConfig):
    """Fit a multinomial logistic head; returns a scorer mapping features to (N, K) probabilities."""
    classes = np.unique(train_y)
    if len(classes) == 1:
        only = int(classes[0])

        def constant(x):
            out = np.zeros((len(x), num_classes))
            out[:, only] = 1.0
            return out
        return constant
    clf = LogisticRegression(C=config.C, max_iter=config.max_iter, random_state=config.seed)
    clf.fit(train_x, train_y)

    def score(x):
        out = np.zeros((len(x), num_classes))
        out[:, clf.classes_] = clf.predict_proba(x)
        return out
    return score


def linear_probe(model: DualEncoder, train_studies: Sequence[Study], fraction: float, labels: Callable,
                 test_studies: Sequence[Study], images: Callable, num_classes: int,
                 config: ProbeConfig | None = None) -> EvalReport:
    """Train a linear classifier on frozen global embeddings of a ``fraction`` of the training studies.

    ``labels`` maps a record to its integer class; ``images`` maps a record to its array.
    """
    config = config or ProbeConfig()
    subset = flatten(subsample_fraction(train_studies, fraction, config.seed))
    test = flatten(test_studies)
    x_tr = embed_images(model, np.stack([images(r) for r in subset]))
    y_tr = np.array([labels(r) for r in subset])
    x_te = embed_images(model, np.stack([images(r) for r in test]))
    y_te = np.array([labels(r) for r in test])
    absent = _absent(y_tr, num_classes)
    if absent:
        warnings.warn(f"classes {absent} absent from the {fraction:.0%} probe subsample; "
                      "their recall is excluded from balanced accuracy", stacklevel=2)
    probs = fit_probe(x_tr, y_tr, num_classes, config)(x_te)
    return make_report(y_te, probs.argmax(axis=1), probs, num_classes, absent, mode="probe", fraction=fraction)


# --- full fine-tune ----------------------------------------------------------

@dataclass
class FinetuneConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-3
    steps: int = 8000
    batch_size: int = 36
    warmup_steps: int = 100
    momentum: float = 0.9
    seed: int = 0
    flip_prob: float = 0.5


FULL_FINETUNE = FinetuneConfig()
DESK_FINETUNE = FinetuneConfig(lr=0.05, steps=150, warmup_steps=10)


class _VisionClassifier(torch.nn.Module):
    def __init__(self, model: DualEncoder, num_classes: int):
        super().__init__()
        self.vision = copy.deepcopy(model.vision)
        self.g_v = copy.deepcopy(model.g_v)
        self.head = torch.nn.Linear(model.cfg.embed_dim, num_classes)
        self.image_size = model.cfg.image_size
        for p in self.parameters():
            p.requires_grad_(True)

    def forward(self, x):
        v = self.g_v(self.vision(x)).mean(dim=1)
        return self.head(F.normalize(v, dim=-1))


def full_finetune(model: DualEncoder, train_studies: Sequence[Study], labels: Callable,
                  test_studies: Sequence[Study], images: Callable, num_classes: int,
                  config: FinetuneConfig | None = None) -> EvalReport:
    """Fine-tune a copy of the vision tower plus a fresh linear head; the text side is not touched."""
    config = config or FinetuneConfig()
    train = flatten(train_studies)
    test = flatten(test_studies)
    x_tr = np.stack([images(r) for r in train]).astype(np.float32)
    y_tr = np.array([labels(r) for r in train])
    torch.manual_seed(config.seed)
    net = _VisionClassifier(model, num_classes).to(next(model.parameters()).dtype)
    dtype = next(net.parameters()).dtype
    opt = torch.optim.SGD(net.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    sched = TrainConfig(lr=config.lr, total_steps=max(config.steps, 1),
                        warmup_steps=min(config.warmup_steps, config.steps), delta=0)
    rng = np.random.default_rng(config.seed)
    aug = AugmentConfig(flip_prob=config.flip_prob, rotate_prob=0.0, crop_prob=0.0, jitter_prob=0.0)
    net.train()
    for step in range(config.steps):
        for g in opt.param_groups:
            g["lr"] = lr_at(step, sched)
        idx = rng.integers(len(train), size=config.batch_size)
        xb = torch.as_tensor(np.stack([augment(x_tr[i], rng, aug) for i in idx]), dtype=dtype)
        yb = torch.as_tensor(y_tr[idx])
        loss = F.cross_entropy(net(xb), yb)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    net.eval()
    with torch.no_grad():
        x_te = torch.as_tensor(np.stack([images(r) for r in test]), dtype=dtype)
        probs = torch.softmax(net(x_te), dim=-1).cpu().numpy()
    y_te = np.array([labels(r) for r in test])
    absent = _absent(y_tr, num_classes)
    return make_report(y_te, probs.argmax(axis=1), probs, num_classes, absent, mode="finetune", fraction=1.0)
