"""Report-style caption construction from tabular records."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .data_model import ImageRecord
from .errors import TemplateError


class Segment(str, enum.Enum):
    PROCEDURE = "PROCEDURE"
    PATIENT_META = "PATIENT_META"
    IMAGE_META = "IMAGE_META"
    COMPOSITION = "COMPOSITION"
    FINDINGS = "FINDINGS"
    IMPRESSION = "IMPRESSION"
    ASSESSMENT = "ASSESSMENT"


class CaptionStyle(str, enum.Enum):
    STRUCTURED = "structured"
    CLIP_STYLE = "clip"
    TABULAR = "tabular"


SEGMENT_ORDER = tuple(Segment)

DENSITY_DESCRIPTIONS = {
    "A": "the breasts are almost entirely fatty",
    "B": "there are scattered areas of fibroglandular density",
    "C": "the breasts are heterogeneously dense",
    "D": "the breasts are extremely dense",
}
BIRADS_DESCRIPTIONS = {
    0: "incomplete, additional imaging evaluation is needed",
    1: "negative",
    2: "benign",
    3: "probably benign",
    4: "suspicious abnormality",
    5: "highly suggestive of malignancy",
    6: "known biopsy-proven malignancy",
}

# placeholders resolved from fixed record fields; a missing value is a template error
FIXED_FIELDS = frozenset({"side", "view", "density", "density_desc", "birads", "birads_desc",
                          "cancer", "image_id", "patient_id", "study_id"})
# clinical keywords: never maskable; keyed by the record field they derive from
CLINICAL_FIELDS = {"density": "density", "density_desc": "density",
                   "birads": "birads", "birads_desc": "birads", "findings": "findings"}

TABULAR_FIELDS = ("procedure", "age", "race", "ethnicity", "manufacturer",
                  "density", "birads", "findings")

_PLACEHOLDER = re.compile(r"\{(\w+)\}")
_SENTENCE_END = re.compile(r"[.!?](?=\s|$)")


def split_sentences(text: str) -> list[tuple[int, int]]:
    """Character spans of sentences, ending at ``.``/``!``/``?`` before whitespace or end."""
    spans = []
    start = 0
    for m in _SENTENCE_END.finditer(text):
        _append_span(text, start, m.end(), spans)
        start = m.end()
    _append_span(text, start, len(text), spans)
    return spans


def _append_span(text, start, end, spans):
    chunk = text[start:end]
    stripped = chunk.strip()
    if stripped:
        lead = len(chunk) - len(chunk.lstrip())
        spans.append((start + lead, start + lead + len(stripped)))


@dataclass(frozen=True)
class Caption:
    text: str
    sentence_spans: tuple[tuple[int, int], ...]
    masked_keywords: frozenset[str] = frozenset()
    style: CaptionStyle = CaptionStyle.STRUCTURED
    sentence_segments: tuple[str | None, ...] = ()

    @property
    def sentences(self) -> list[str]:
        return [self.text[a:b] for a, b in self.sentence_spans]

    def sentence_index(self, segment) -> int | None:
        segment = Segment(segment).value
        for i, seg in enumerate(self.sentence_segments):
            if seg == segment:
                return i
        return None


@dataclass(frozen=True)
class _TemplateSentence:
    clauses: tuple[str, ...]
    terminal: str


@dataclass(frozen=True)
class CaptionTemplate:
    segments: tuple[tuple[Segment, str], ...]
    maskable: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        names = tuple(s for s, _ in self.segments)
        if names != SEGMENT_ORDER:
            raise TemplateError("", f"segments must be exactly {[s.value for s in SEGMENT_ORDER]}, got {[s.value for s in names]}")
        bad = self.maskable & set(CLINICAL_FIELDS) | self.maskable & FIXED_FIELDS
        if bad:
            raise TemplateError(sorted(bad)[0], f"clinical/fixed field cannot be maskable: {sorted(bad)}")

    @property
    def placeholders(self) -> list[str]:
        seen = []
        for _, text in self.segments:
            for name in _PLACEHOLDER.findall(text):
                if name not in seen:
                    seen.append(name)
        return seen

    @property
    def keyword_vocab(self) -> dict[str, bool]:
        """Meta keywords referenced by the template, mapped to maskability."""
        return {k: k in self.maskable for k in self.placeholders if k not in FIXED_FIELDS}

    @classmethod
    def parse(cls, text: str) -> "CaptionTemplate":
        blocks = [b.strip("\n") for b in re.split(r"\n\s*\n", text.strip()) if b.strip()]
        segments = []
        maskable: set[str] = set()
        for block in blocks:
            head, _, body = block.partition("\n")
            head = head.strip()
            if head == "[maskable]":
                maskable.update(w for w in re.split(r"[\s,]+", body) if w)
                continue
            try:
                seg = Segment(head.upper())
            except ValueError:
                raise TemplateError(head, f"unknown segment name {head!r}") from None
            segments.append((seg, " ".join(body.split())))
        return cls(segments=tuple(segments), maskable=frozenset(maskable))

    @classmethod
    def from_file(cls, path) -> "CaptionTemplate":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def default(cls) -> "CaptionTemplate":
        text = resources.files("mama").joinpath("templates/structured.txt").read_text(encoding="utf-8")
        return cls.parse(text)

    def to_text(self) -> str:
        blocks = [f"{seg.value}\n{text}" for seg, text in self.segments]
        blocks.append("[maskable]\n" + "\n".join(sorted(self.maskable)))
        return "\n\n".join(blocks) + "\n"


def _template_sentences(text):
    out = []
    for a, b in split_sentences(text):
        sent = text[a:b]
        terminal = sent[-1] if sent[-1] in ".!?" else "."
        body = sent[:-1] if sent[-1] in ".!?" else sent
        out.append(_TemplateSentence(tuple(c.strip() for c in body.split(",")), terminal))
    return out


def _fixed_value(record, name):
    if name == "density_desc":
        return DENSITY_DESCRIPTIONS[record.density.value]
    if name == "birads_desc":
        return BIRADS_DESCRIPTIONS[record.birads]
    return record.field_value(name)


def _clean_value(value):
    # values must not introduce sentence or clause boundaries of their own
    return _SENTENCE_END.sub(";", value).replace(",", ";").strip()


def _capitalize(s):
    return s[:1].upper() + s[1:]


def render_template(record: ImageRecord, template: CaptionTemplate, drop: frozenset[str] = frozenset(),
                    omit_segments: frozenset[Segment] = frozenset(), overrides=None) -> tuple[str, list]:
    """Substitute placeholders, removing clauses whose keyword is in ``drop`` or absent.

    Returns the caption text and the segment name of each emitted sentence.
    """
    overrides = overrides or {}
    sentences, segments = [], []
    for seg, text in template.segments:
        if seg in omit_segments:
            continue
        for tsent in _template_sentences(text):
            kept = []
            had_placeholder = kept_placeholder = False
            for clause in tsent.clauses:
                names = _PLACEHOLDER.findall(clause)
                if not names:
                    kept.append(clause)
                    continue
                had_placeholder = True
                values = {}
                for name in names:
                    if name in overrides:
                        value = overrides[name]
                    elif name in FIXED_FIELDS:
                        value = _fixed_value(record, name)
                        if value is None:
                            raise TemplateError(name)
                    else:
                        value = None if name in drop else record.field_value(name)
                    if value is None:
                        break
                    values[name] = _clean_value(value)
                else:
                    kept.append(_PLACEHOLDER.sub(lambda m: values[m.group(1)], clause))
                    kept_placeholder = True
            # a sentence whose every keyword clause was removed goes with them
            if (had_placeholder and not kept_placeholder) or not kept:
                continue
            sentences.append(_capitalize(", ".join(kept)) + tsent.terminal)
            segments.append(seg.value)
    return " ".join(sentences), segments


def build_structured_caption(record: ImageRecord, template: CaptionTemplate | None = None,
                             mask_prob: float = 0.0, rng: np.random.Generator | None = None) -> Caption:
    if template is None:
        template = CaptionTemplate.default()
    if not 0.0 <= mask_prob <= 1.0:
        raise ValueError(f"mask_prob must lie in [0, 1], got {mask_prob}")
    masked = set()
    maskable = [k for k, m in template.keyword_vocab.items() if m]
    if mask_prob > 0:
        if rng is None:
            rng = np.random.default_rng()
        # one draw per keyword in template order so rng consumption is record-independent
        draws = rng.random(len(maskable))
        masked = {k for k, u in zip(maskable, draws) if u < mask_prob}
    text, segments = render_template(record, template, drop=frozenset(masked))
    return Caption(text=text, sentence_spans=tuple(split_sentences(text)),
                   masked_keywords=frozenset(masked), style=CaptionStyle.STRUCTURED,
                   sentence_segments=tuple(segments))


def build_clip_style_caption(record: ImageRecord) -> Caption:
    text = f"a mammogram with BI-RADS category {record.birads} and breast density {record.density.value}."
    return Caption(text=text, sentence_spans=tuple(split_sentences(text)),
                   style=CaptionStyle.CLIP_STYLE, sentence_segments=(None,))


def tabular_fields(record: ImageRecord) -> list[tuple[str, str]]:
    out = []
    for key in TABULAR_FIELDS:
        value = record.field_value(key)
        if value is not None:
            out.append((key, _clean_value(value)))
    return out


def build_tabular_caption(record: ImageRecord) -> Caption:
    fields = tabular_fields(record)
    text = "\n".join(f"{k}: {v}." for k, v in fields)
    return Caption(text=text, sentence_spans=tuple(split_sentences(text)),
                   style=CaptionStyle.TABULAR, sentence_segments=tuple(None for _ in fields))


def build_caption(record, style=CaptionStyle.STRUCTURED, template=None, mask_prob=0.0, rng=None) -> Caption:
    style = CaptionStyle(style)
    if style is CaptionStyle.STRUCTURED:
        return build_structured_caption(record, template, mask_prob, rng)
    if style is CaptionStyle.CLIP_STYLE:
        return build_clip_style_caption(record)
    return build_tabular_caption(record)


class CaptionBuilder:
    """Callable caption factory bound to a style, template and masking rate."""

    def __init__(self, style=CaptionStyle.STRUCTURED, template: CaptionTemplate | None = None,
                 mask_prob: float = 0.8):
        self.style = CaptionStyle(style)
        self.template = template or CaptionTemplate.default()
        self.mask_prob = mask_prob

    def __call__(self, record, rng=None) -> Caption:
        return build_caption(record, self.style, self.template, self.mask_prob, rng)

    def many(self, records: Sequence[ImageRecord], rng=None) -> list[Caption]:
        return [self(r, rng) for r in records]
