"""Per-sentence patch similarity maps and their export."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InputError
from .losses import CorrespondenceMatrix
from .multiview import read_pgm, save_pgm


class Normalization(str, enum.Enum):
    RAW = "raw"
    UNIT_INTERVAL = "unit"


class MapFormat(str, enum.Enum):
    CSV = "csv"
    PGM = "pgm"


@dataclass(frozen=True)
class SimilarityMap:
    grid: np.ndarray
    sentence_index: int
    sentence_text: str = ""
    normalization: Normalization = Normalization.RAW

    @property
    def argmax_cell(self) -> tuple[int, int]:
        r, c = np.unravel_index(int(np.argmax(self.grid)), self.grid.shape)
        return int(r), int(c)


def sentence_map(corr: CorrespondenceMatrix | np.ndarray, sentence_index: int, patch_grid,
                 sentence_text: str = "") -> SimilarityMap:
    """Reshape one sentence's row of patch similarities onto the patch grid (row-major)."""
    if isinstance(corr, CorrespondenceMatrix):
        values = corr.values.detach().cpu().numpy()
        mask = corr.sentence_mask.detach().cpu().numpy()
    else:
        values = np.asarray(corr)
        mask = np.ones(values.shape[0], dtype=bool)
    rows, cols = (int(v) for v in patch_grid)
    if values.ndim != 2 or values.shape[1] != rows * cols:
        raise InputError(f"expected S x {rows * cols} matrix, got {values.shape}")
    if not 0 <= sentence_index < values.shape[0]:
        raise InputError(f"sentence index {sentence_index} out of range 0..{values.shape[0] - 1}")
    if not mask[sentence_index]:
        raise InputError(f"sentence {sentence_index} is masked")
    grid = np.array(values[sentence_index], dtype=np.float64).reshape(rows, cols)
    return SimilarityMap(grid, int(sentence_index), sentence_text, Normalization.RAW)


def normalize_unit(smap: SimilarityMap) -> SimilarityMap:
    """Min-max rescale to [0, 1]; a constant map becomes all 0.5."""
    lo, hi = float(smap.grid.min()), float(smap.grid.max())
    if hi == lo:
        grid = np.full_like(smap.grid, 0.5, dtype=np.float64)
    else:
        grid = (smap.grid - lo) / (hi - lo)
    return replace(smap, grid=grid, normalization=Normalization.UNIT_INTERVAL)


def upsample(smap: SimilarityMap, image_size: int) -> np.ndarray:
    """Nearest-neighbour upsampling of the grid to image resolution, for overlays."""
    rows, cols = smap.grid.shape
    if image_size % rows or image_size % cols:
        raise InputError("image size must be a multiple of the grid")
    return np.kron(smap.grid, np.ones((image_size // rows, image_size // cols)))


def export_map(smap: SimilarityMap, path, fmt: MapFormat | str = MapFormat.CSV) -> Path:
    fmt = MapFormat(fmt)
    path = Path(path)
    if fmt is MapFormat.CSV:
        lines = [",".join(repr(float(v)) for v in row) for row in smap.grid]
        path.write_text("\n".join(lines) + "\n")
    else:
        if smap.normalization is not Normalization.UNIT_INTERVAL:
            raise InputError("PGM export needs a unit-interval map")
        save_pgm(path, smap.grid, bits=8)
    return path


def read_map(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path).astype(np.float64)
    return np.array([[float(v) for v in line.split(",")] for line in path.read_text().split()])


def localization_rate(maps, planted_cells) -> float:
    """Fraction of maps whose argmax cell equals the planted cell."""
    maps, planted_cells = list(maps), list(planted_cells)
    if not maps or len(maps) != len(planted_cells):
        raise InputError("need one planted cell per map")
    return float(np.mean([m.argmax_cell == tuple(c) for m, c in zip(maps, planted_cells)]))
