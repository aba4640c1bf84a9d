"""Synthetic paired corpus with planted, recoverable structure.

Each study belongs to one class ``k``. All of its views share a smooth
patient-level intensity field and carry the class texture at the class's
grid cell. Textures are zero-mean, so per-patch average intensity carries
no class information; the class is only visible through local pattern.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data_model import Density, ImageRecord, Side, Study, View, group_studies, records_to_csv
from .multiview import save_pgm

FINDINGS = (
    "grouped calcifications",
    "a circumscribed mass",
    "a focal asymmetry",
    "architectural distortion",
    "a spiculated mass",
    "skin thickening",
    "an intramammary lymph node",
)
RACES = ("White", "Black", "Asian", "Other")
ETHNICITIES = ("Hispanic", "Non-Hispanic")
PROCEDURES = ("screening mammography", "diagnostic mammography")
MANUFACTURERS = ("Hologic", "GE", "Siemens", "Fujifilm")
META_KEYS = ("procedure", "age", "race", "ethnicity", "manufacturer", "findings")
VIEWS = ((Side.LEFT, View.CC), (Side.LEFT, View.MLO), (Side.RIGHT, View.CC), (Side.RIGHT, View.MLO))


@dataclass
class SynthConfig:
    num_patients: int = 50
    studies_per_patient: int = 1
    image_size: int = 32
    patch_grid: tuple[int, int] = (4, 4)
    num_classes: int = 4
    feature_strength: float = 1.0
    noise_level: float = 0.05
    seed: int = 0
    class_prior: tuple[float, ...] | None = None
    target: str | None = None  # record field carrying the class; defaults by num_classes

    def __post_init__(self):
        self.patch_grid = tuple(int(v) for v in self.patch_grid)
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.num_classes > len(FINDINGS):
            raise ValueError(f"at most {len(FINDINGS)} classes are supported")
        rows, cols = self.patch_grid
        if self.image_size % rows or self.image_size % cols:
            raise ValueError("image_size must be divisible by the patch grid")
        if self.num_classes > rows * cols:
            raise ValueError("more classes than grid cells")
        if self.target is None:
            self.target = {2: "cancer", 4: "density", 7: "birads"}.get(self.num_classes, "birads")
        if self.target == "density" and self.num_classes != 4:
            raise ValueError("density target needs exactly 4 classes")
        if self.target == "cancer" and self.num_classes != 2:
            raise ValueError("cancer target needs exactly 2 classes")
        if self.class_prior is not None:
            prior = np.asarray(self.class_prior, dtype=float)
            if prior.shape != (self.num_classes,) or np.any(prior < 0) or prior.sum() <= 0:
                raise ValueError("class_prior must be a non-negative vector of length num_classes")

    @property
    def prior(self) -> np.ndarray:
        if self.class_prior is None:
            return np.full(self.num_classes, 1.0 / self.num_classes)
        p = np.asarray(self.class_prior, dtype=float)
        return p / p.sum()

    @property
    def patch_shape(self):
        return self.image_size // self.patch_grid[0], self.image_size // self.patch_grid[1]


DESK_SYNTH = SynthConfig()
BIRADS_SYNTH = SynthConfig(num_classes=7, num_patients=70)


@dataclass
class GroundTruth:
    image_id: str
    label: int
    cell: tuple[int, int]


@dataclass
class SyntheticCorpus:
    config: SynthConfig
    records: list[ImageRecord]
    images: dict[str, np.ndarray]
    truth: dict[str, GroundTruth] = field(default_factory=dict)

    @property
    def studies(self) -> list[Study]:
        return group_studies(self.records)

    def labels(self, records) -> np.ndarray:
        return np.array([self.truth[r.image_id].label for r in records])


def class_cells(patch_grid, num_classes):
    """Planted cell per class: grid cells ordered by distance to the centre, then row-major."""
    rows, cols = patch_grid
    cy, cx = (rows - 1) / 2, (cols - 1) / 2
    cells = sorted(((r, c) for r in range(rows) for c in range(cols)),
                   key=lambda rc: ((rc[0] - cy) ** 2 + (rc[1] - cx) ** 2, rc))
    return cells[:num_classes]


def class_texture(k, shape):
    """Zero-mean, unit-RMS pattern identifying class ``k``."""
    h, w = shape
    y = np.arange(h)[:, None] - (h - 1) / 2
    x = np.arange(w)[None, :] - (w - 1) / 2
    period = max(2.0, h / 2)
    patterns = (
        np.cos(2 * np.pi * y / period) + 0 * x,
        np.cos(2 * np.pi * x / period) + 0 * y,
        np.cos(2 * np.pi * y / period) * np.cos(2 * np.pi * x / period),
        np.cos(2 * np.pi * np.hypot(y, x) / period),
        np.cos(2 * np.pi * (x + y) / period),
        np.cos(np.pi * y / period) + 0 * x,
        np.cos(np.pi * x / period) + 0 * y,
    )
    t = patterns[k] - patterns[k].mean()
    return t / np.sqrt((t ** 2).mean())


def _label_fields(k, config, rng):
    density = Density(rng.choice(list("ABCD")))
    birads = int(rng.integers(0, 7))
    cancer = None
    if config.target == "density":
        density = Density("ABCD"[k])
    elif config.target == "birads":
        birads = k
    elif config.target == "cancer":
        cancer = bool(k)
    return density, birads, cancer


def patient_field(size, rng, amplitude=0.15):
    coarse = rng.normal(size=(4, 4))
    field_ = ndimage.zoom(coarse, size / 4, order=3, mode="nearest")[:size, :size]
    field_ = (field_ - field_.mean()) / (field_.std() + 1e-12)
    return amplitude * field_


def generate_study(patient_id: str, class_k: int, config: SynthConfig, rng: np.random.Generator,
                   study_index: int = 0):
    """Return (Study, images by id, ground truth by id) for one four-view session."""
    if not 0 <= class_k < config.num_classes:
        raise ValueError(f"class {class_k} outside 0..{config.num_classes - 1}")
    size = config.image_size
    ph, pw = config.patch_shape
    cell = class_cells(config.patch_grid, config.num_classes)[class_k]
    texture = 0.25 * config.feature_strength * class_texture(class_k, (ph, pw))
    shared = patient_field(size, rng)
    study_id = f"{patient_id}-S{study_index}"
    density, birads, cancer = _label_fields(class_k, config, rng)
    meta = {
        "procedure": PROCEDURES[int(rng.integers(len(PROCEDURES)))],
        "age": str(int(rng.integers(40, 81))),
        "race": RACES[int(rng.integers(len(RACES)))],
        "ethnicity": ETHNICITIES[int(rng.integers(len(ETHNICITIES)))],
        "manufacturer": MANUFACTURERS[int(rng.integers(len(MANUFACTURERS)))],
        "findings": FINDINGS[class_k],
    }
    records, images, truth = [], {}, {}
    for side, view in VIEWS:
        image_id = f"{study_id}-{side.value}-{view.value}"
        img = 0.5 + shared + 0.03 * patient_field(size, rng, amplitude=1.0)
        r, c = cell
        img[r * ph:(r + 1) * ph, c * pw:(c + 1) * pw] += texture
        img += config.noise_level * rng.normal(size=(size, size))
        images[image_id] = np.clip(img, 0.0, 1.0).astype(np.float32)
        records.append(ImageRecord(image_id=image_id, patient_id=patient_id, study_id=study_id, side=side,
                                   view=view, density=density, birads=birads, meta=dict(meta), cancer=cancer,
                                   image_path=f"images/{image_id}.pgm"))
        truth[image_id] = GroundTruth(image_id, class_k, cell)
    study = group_studies(records)[0]
    return study, images, truth


def generate_corpus(config: SynthConfig | None = None) -> SyntheticCorpus:
    config = config or SynthConfig()
    prior = config.prior
    records, images, truth = [], {}, {}
    for p in range(config.num_patients):
        for s in range(config.studies_per_patient):
            # per-study seed keeps studies independent of generation order
            rng = np.random.default_rng([config.seed, p, s])
            k = int(rng.choice(config.num_classes, p=prior))
            study, imgs, gt = generate_study(f"P{p:04d}", k, config, rng, study_index=s)
            records.extend(study.images)
            images.update(imgs)
            truth.update(gt)
    return SyntheticCorpus(config, records, images, truth)


def truth_to_csv(truth) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["image_id", "class", "cell_row", "cell_col"])
    for gt in truth.values():
        w.writerow([gt.image_id, gt.label, gt.cell[0], gt.cell[1]])
    return out.getvalue()


def read_truth(path) -> dict[str, GroundTruth]:
    with open(path, newline="") as fh:
        return {row["image_id"]: GroundTruth(row["image_id"], int(row["class"]),
                                             (int(row["cell_row"]), int(row["cell_col"])))
                for row in csv.DictReader(fh)}


def generate_dataset(config: SynthConfig, out_dir) -> SyntheticCorpus:
    """Write ``records.csv``, ``images/*.pgm`` and ``ground_truth.csv`` under ``out_dir``."""
    corpus = generate_corpus(config)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for image_id, img in corpus.images.items():
        save_pgm(out / "images" / f"{image_id}.pgm", img, bits=16)
    (out / "records.csv").write_text(records_to_csv(corpus.records, META_KEYS))
    (out / "ground_truth.csv").write_text(truth_to_csv(corpus.truth))
    return corpus
