"""Records, studies, patient-level splits and fraction subsampling."""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, RowError, SchemaError


class Side(str, enum.Enum):
    LEFT = "L"
    RIGHT = "R"


class View(str, enum.Enum):
    CC = "CC"
    MLO = "MLO"


class Density(str, enum.Enum):
    A = "A"
    B = "B"
    C = "C"
    D = "D"


BIRADS_VALUES = tuple(range(7))

REQUIRED_FIELDS = ("image_id", "patient_id", "study_id", "side", "view", "density", "birads")
OPTIONAL_FIELDS = ("cancer", "image_path")

_SIDE_ALIASES = {"l": Side.LEFT, "left": Side.LEFT, "r": Side.RIGHT, "right": Side.RIGHT}
_DENSITY_ALIASES = {"1": Density.A, "2": Density.B, "3": Density.C, "4": Density.D}
_BOOL_ALIASES = {"1": True, "true": True, "yes": True, "0": False, "false": False, "no": False}


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    patient_id: str
    study_id: str
    side: Side
    view: View
    density: Density
    birads: int
    meta: Mapping[str, str] = field(default_factory=dict)
    cancer: bool | None = None
    image_path: str = ""

    def __post_init__(self):
        if self.birads not in BIRADS_VALUES:
            raise ValueError(f"birads {self.birads!r} outside 0..6")
        if not isinstance(self.density, Density):
            raise ValueError(f"density {self.density!r} is not a Density")

    def field_value(self, name):
        """Return the string form of a fixed field or meta keyword, or None if absent."""
        if name == "side":
            return "left" if self.side is Side.LEFT else "right"
        if name == "view":
            return self.view.value
        if name == "density":
            return self.density.value
        if name == "birads":
            return str(self.birads)
        if name == "cancer":
            return None if self.cancer is None else ("yes" if self.cancer else "no")
        if name in ("image_id", "patient_id", "study_id", "image_path"):
            return getattr(self, name) or None
        value = self.meta.get(name)
        return value if value else None


@dataclass(frozen=True)
class Study:
    study_id: str
    patient_id: str
    images: tuple[ImageRecord, ...]

    def __post_init__(self):
        if not self.images:
            raise ValueError("a study holds at least one image")
        for rec in self.images:
            if rec.study_id != self.study_id or rec.patient_id != self.patient_id:
                raise ValueError(f"image {rec.image_id} does not belong to study {self.study_id}")


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2
    seed: int = 0

    def fractions(self):
        fr = np.array([self.train_frac, self.val_frac, self.test_frac], dtype=float)
        if np.any(fr < 0) or not np.all(np.isfinite(fr)):
            raise ConfigError(f"split fractions must be non-negative, got {fr.tolist()}")
        if fr.sum() <= 0:
            raise ConfigError("split fractions are all zero")
        return fr / fr.sum()


def _parse_side(raw):
    try:
        return _SIDE_ALIASES[raw.strip().lower()]
    except KeyError:
        raise ValueError(f"invalid side {raw!r}") from None


def _parse_view(raw):
    try:
        return View(raw.strip().upper())
    except ValueError:
        raise ValueError(f"invalid view {raw!r}") from None


def _parse_density(raw):
    raw = raw.strip().upper()
    if raw in _DENSITY_ALIASES:
        return _DENSITY_ALIASES[raw]
    try:
        return Density(raw)
    except ValueError:
        raise ValueError(f"invalid density {raw!r}") from None


def _parse_birads(raw):
    try:
        value = int(raw.strip())
    except ValueError:
        raise ValueError(f"invalid birads {raw!r}") from None
    if value not in BIRADS_VALUES:
        raise ValueError(f"birads {value} outside 0..6")
    return value


def parse_records(csv_text: str, schema: Mapping[str, str] | None = None) -> list[ImageRecord]:
    """Parse an annotation CSV into records.

    ``schema`` maps logical field names to column names; fields it does not
    mention are looked up under their own name. Columns that are not mapped
    to a logical field become meta keywords.
    """
    schema = dict(schema or {})
    reader = csv.reader(io.StringIO(csv_text))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("image_id", "CSV has no header row") from None
    header = [h.strip() for h in header]
    index = {name: i for i, name in enumerate(header)}

    columns = {}
    for logical in REQUIRED_FIELDS:
        col = schema.get(logical, logical)
        if col not in index:
            raise SchemaError(col)
        columns[logical] = index[col]
    for logical in OPTIONAL_FIELDS:
        col = schema.get(logical, logical)
        if col in index:
            columns[logical] = index[col]
    meta_columns = [(name, i) for name, i in index.items() if i not in set(columns.values())]

    records = []
    seen = set()
    for row_no, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise RowError(row_no, f"expected {len(header)} fields, got {len(row)}")
        get = lambda key: row[columns[key]].strip()  # noqa: E731
        try:
            cancer = None
            if "cancer" in columns and get("cancer"):
                cancer = _BOOL_ALIASES[get("cancer").lower()]
            rec = ImageRecord(
                image_id=get("image_id"),
                patient_id=get("patient_id"),
                study_id=get("study_id"),
                side=_parse_side(get("side")),
                view=_parse_view(get("view")),
                density=_parse_density(get("density")),
                birads=_parse_birads(get("birads")),
                meta={name: row[i].strip() for name, i in meta_columns if row[i].strip()},
                cancer=cancer,
                image_path=get("image_path") if "image_path" in columns else "",
            )
        except (ValueError, KeyError) as exc:
            raise RowError(row_no, str(exc)) from None
        if not rec.image_id:
            raise RowError(row_no, "empty image_id")
        if rec.image_id in seen:
            raise RowError(row_no, f"duplicate image_id {rec.image_id!r}")
        seen.add(rec.image_id)
        records.append(rec)
    return records


def records_to_csv(records: Sequence[ImageRecord], meta_keys: Sequence[str] | None = None) -> str:
    """Inverse of :func:`parse_records` for the default schema."""
    if meta_keys is None:
        meta_keys = sorted({k for r in records for k in r.meta})
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow([*REQUIRED_FIELDS, *OPTIONAL_FIELDS, *meta_keys])
    for r in records:
        cancer = "" if r.cancer is None else str(int(r.cancer))
        writer.writerow([r.image_id, r.patient_id, r.study_id, r.side.value, r.view.value,
                         r.density.value, r.birads, cancer, r.image_path,
                         *(r.meta.get(k, "") for k in meta_keys)])
    return out.getvalue()


def _image_sort_key(rec):
    return (rec.side.value, rec.view.value, rec.image_id)


def group_studies(records: Sequence[ImageRecord]) -> list[Study]:
    groups: dict[tuple[str, str], list[ImageRecord]] = {}
    for rec in records:
        groups.setdefault((rec.patient_id, rec.study_id), []).append(rec)
    return [
        Study(study_id=sid, patient_id=pid, images=tuple(sorted(imgs, key=_image_sort_key)))
        for (pid, sid), imgs in sorted(groups.items())
    ]


def largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    """Integer counts summing to ``n`` that track ``fractions`` within one unit."""
    targets = [n * f for f in fractions]
    counts = [math.floor(t) for t in targets]
    leftover = n - sum(counts)
    # stable sort: ties go to the earlier bucket
    order = sorted(range(len(targets)), key=lambda i: -(targets[i] - counts[i]))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def split_patients(studies: Sequence[Study], spec: SplitSpec) -> tuple[list[Study], list[Study], list[Study]]:
    fractions = spec.fractions()
    patients = sorted({s.patient_id for s in studies})
    if not patients:
        raise ConfigError("cannot split an empty study list")
    rng = np.random.default_rng(spec.seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    n_train, n_val, _ = largest_remainder(len(patients), fractions)
    bucket = {}
    for pos, pid in enumerate(order):
        bucket[pid] = 0 if pos < n_train else (1 if pos < n_train + n_val else 2)
    out: tuple[list[Study], list[Study], list[Study]] = ([], [], [])
    for s in studies:
        out[bucket[s.patient_id]].append(s)
    return out


def subsample_count(n: int, fraction: float) -> int:
    return max(1, math.floor(fraction * n + 0.5)) if n else 0


def subsample_fraction(studies: Sequence[Study], fraction: float, seed: int = 0) -> list[Study]:
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    studies = list(studies)
    if fraction == 1.0:
        return studies
    k = subsample_count(len(studies), fraction)
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(studies), size=k, replace=False))
    return [studies[i] for i in keep]


def flatten(studies: Sequence[Study]) -> list[ImageRecord]:
    return [rec for s in studies for rec in s.images]
