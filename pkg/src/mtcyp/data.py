"""Scenes, sparse yield points, tiling and dataset splits."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

L1C_BANDS = (
    "B01", "B02", "B03", "B04", "B05", "B06", "B07",
    "B08", "B8A", "B09", "B10", "B11", "B12",
)
# L2A drops the cirrus band.
L2A_BANDS = tuple(b for b in L1C_BANDS if b != "B10")

BAND_RESOLUTION_M = {
    "B01": 60, "B02": 10, "B03": 10, "B04": 10, "B05": 20, "B06": 20, "B07": 20,
    "B08": 10, "B8A": 20, "B09": 60, "B10": 60, "B11": 20, "B12": 20,
}

TILE_SIZE = 256
TILE_OVERLAP = 0.1


class CropType(IntEnum):
    RICE = 0
    MAIZE = 1
    SOYBEAN = 2
    OTHER_CROP = 3
    NON_CROP = 4
    UNLABELED = 5


CLASS_NAMES = tuple(c.name.lower() for c in CropType)
NUM_CLASSES = len(CropType)
REAL_CLASSES = NUM_CLASSES - 1
CROP_CLASSES = (CropType.RICE, CropType.MAIZE, CropType.SOYBEAN, CropType.OTHER_CROP)


@dataclass
class Scene:
    id: str
    bands: np.ndarray  # (C, H, W)
    band_names: list[str]
    pixel_size_m: float = 10.0
    geotransform: tuple[float, ...] | None = None
    crs: str | None = None
    date: str | None = None
    level: str = "L2A"

    def __post_init__(self):
        if self.bands.ndim != 3:
            raise ValueError(f"bands must be (C, H, W), got shape {self.bands.shape}")
        if len(self.band_names) != self.bands.shape[0]:
            raise ValueError(
                f"{len(self.band_names)} band names for {self.bands.shape[0]} channels"
            )
        if self.level not in ("L1C", "L2A"):
            raise ValueError(f"unknown product level {self.level!r}")

    @property
    def height(self) -> int:
        return self.bands.shape[1]

    @property
    def width(self) -> int:
        return self.bands.shape[2]


@dataclass
class YieldPoint:
    scene_id: str
    row: int
    col: int
    yield_raw: float
    crop_type: int
    yield_norm: float | None = None


@dataclass
class Tile:
    bands: np.ndarray  # (C, T, T) float32
    crop_mask: np.ndarray  # (T, T) uint8 codes 0..5
    yield_values: np.ndarray  # (T, T) float32, meaningful where yield_labeled
    yield_labeled: np.ndarray  # (T, T) bool
    scene_id: str
    origin: tuple[int, int]

    @property
    def id(self) -> str:
        return tile_id(self.scene_id, *self.origin)

    @property
    def n_points(self) -> int:
        return int(self.yield_labeled.sum())


@dataclass
class SplitPlan:
    fold_count: int
    assignments: dict[str, int]
    seed: int

    def validation_ids(self, fold: int) -> list[str]:
        return [t for t, f in self.assignments.items() if f == fold]

    def training_ids(self, fold: int) -> list[str]:
        return [t for t, f in self.assignments.items() if f != fold]


@dataclass
class NormalizationReport:
    constants: dict[int, tuple[float, float]] = field(default_factory=dict)
    degenerate: list[int] = field(default_factory=list)

    def denormalize(self, crop_type: int, yield_norm: float) -> float:
        lo, hi = self.constants[int(crop_type)]
        if hi == lo:
            return lo
        return lo + yield_norm * (hi - lo)


@dataclass
class RasterizeReport:
    placed: int = 0
    skipped: int = 0
    collisions: int = 0


def tile_id(scene_id: str, row0: int, col0: int) -> str:
    return f"{scene_id}:{row0}:{col0}"


# ----------------------------------------------------------------------------
# Resampling


def keys_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Cubic convolution kernel of Keys (1981)."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    out = np.zeros_like(x)
    near = x <= 1
    far = (x > 1) & (x < 2)
    xn, xf = x[near], x[far]
    out[near] = (a + 2) * xn**3 - (a + 3) * xn**2 + 1
    out[far] = a * xf**3 - 5 * a * xf**2 + 8 * a * xf - 4 * a
    return out


def _cubic_matrix(n_src: int, n_dst: int, a: float) -> np.ndarray:
    """(n_dst, n_src) interpolation weights, edge samples replicated."""
    scale = n_src / n_dst
    centers = (np.arange(n_dst) + 0.5) * scale - 0.5
    base = np.floor(centers).astype(int)
    weights = np.zeros((n_dst, n_src))
    for k in range(-1, 3):
        idx = base + k
        w = keys_kernel(centers - idx, a)
        np.add.at(weights, (np.arange(n_dst), np.clip(idx, 0, n_src - 1)), w)
    return weights


def resample_grid(grid: np.ndarray, factor: float, a: float = -0.5) -> np.ndarray:
    """Resample the last two axes of ``grid`` by ``factor`` with cubic convolution."""
    h, w = grid.shape[-2:]
    new_h, new_w = round(h * factor), round(w * factor)
    if not (math.isclose(new_h, h * factor) and math.isclose(new_w, w * factor)):
        raise ValueError(f"factor {factor} does not map {h}x{w} onto an integer grid")
    rows = _cubic_matrix(h, new_h, a)
    cols = _cubic_matrix(w, new_w, a)
    out = np.einsum("ih,...hw,jw->...ij", rows, grid.astype(np.float64), cols)
    return out.astype(grid.dtype if np.issubdtype(grid.dtype, np.floating) else np.float32)


def _check_divisible(src_m: float, target_m: float) -> None:
    big, small = max(src_m, target_m), min(src_m, target_m)
    ratio = big / small
    if not math.isclose(ratio, round(ratio)):
        raise ValueError(
            f"pixel sizes {src_m} m and {target_m} m are not integer multiples"
        )


def resample_bands(scene: Scene, target_m: float = 10.0, a: float = -0.5) -> Scene:
    """Bring every band of ``scene`` onto a ``target_m`` grid.

    Raises ValueError for scenes without a geotransform, since the output
    grid could not be placed on the ground.
    """
    if scene.geotransform is None:
        raise ValueError(f"scene {scene.id!r} is not georeferenced")
    _check_divisible(scene.pixel_size_m, target_m)
    if scene.pixel_size_m == target_m:
        return replace(scene, bands=scene.bands.copy())
    factor = scene.pixel_size_m / target_m
    bands = resample_grid(scene.bands, factor, a)
    gt = list(scene.geotransform)
    gt[1] /= factor
    gt[5] /= factor
    gt[2] /= factor
    gt[4] /= factor
    return replace(scene, bands=bands, pixel_size_m=float(target_m), geotransform=tuple(gt))


def merge_resolution_groups(groups: Sequence[Scene], target_m: float = 10.0) -> Scene:
    """Stack band groups with different native resolutions into one scene.

    Each group is resampled to ``target_m`` first; the first group supplies
    id, date, level and georeferencing of the result.
    """
    if not groups:
        raise ValueError("no band groups to merge")
    resampled = [resample_bands(g, target_m) for g in groups]
    shape = resampled[0].bands.shape[1:]
    for g in resampled[1:]:
        if g.bands.shape[1:] != shape:
            raise ValueError(
                f"band group {g.band_names} resamples to {g.bands.shape[1:]}, expected {shape}"
            )
    first = resampled[0]
    bands = np.concatenate([g.bands for g in resampled], axis=0)
    names = [n for g in resampled for n in g.band_names]
    return replace(first, bands=bands, band_names=names)


def select_bands(scene: Scene, subset: Sequence[str]) -> Scene:
    missing = [b for b in subset if b not in scene.band_names]
    if missing:
        raise ValueError(
            f"unknown band(s) {missing}; available: {', '.join(scene.band_names)}"
        )
    idx = [scene.band_names.index(b) for b in subset]
    return replace(scene, bands=scene.bands[idx].copy(), band_names=list(subset))


# ----------------------------------------------------------------------------
# Labels


def normalize_yields(
    points: Sequence[YieldPoint],
) -> tuple[list[YieldPoint], NormalizationReport]:
    """Min-max normalize ``yield_raw`` separately for each crop type.

    A crop type whose samples all share one value maps to 0.5.
    """
    report = NormalizationReport()
    groups: dict[int, list[float]] = defaultdict(list)
    for p in points:
        groups[int(p.crop_type)].append(float(p.yield_raw))
    for crop, values in groups.items():
        lo, hi = min(values), max(values)
        report.constants[crop] = (lo, hi)
        if hi == lo:
            report.degenerate.append(crop)
            logger.warning("crop type %d has a single yield value; normalized to 0.5", crop)
    out = []
    for p in points:
        lo, hi = report.constants[int(p.crop_type)]
        norm = 0.5 if hi == lo else (p.yield_raw - lo) / (hi - lo)
        out.append(replace(p, yield_norm=float(norm)))
    return out, report


def rasterize_points(
    points: Iterable[YieldPoint], height: int, width: int
) -> tuple[np.ndarray, np.ndarray, RasterizeReport]:
    """Burn normalized yields into a (height, width) grid.

    Several points in one cell are averaged. Points outside the grid are
    skipped with a warning and counted in the report.
    """
    sums = np.zeros((height, width), dtype=np.float64)
    counts = np.zeros((height, width), dtype=np.int64)
    report = RasterizeReport()
    for p in points:
        if p.yield_norm is None:
            raise ValueError(f"point at ({p.row}, {p.col}) has no normalized yield")
        if not (0 <= p.row < height and 0 <= p.col < width):
            logger.warning(
                "point (%d, %d) of scene %s lies outside the %dx%d raster; skipped",
                p.row, p.col, p.scene_id, height, width,
            )
            report.skipped += 1
            continue
        if counts[p.row, p.col]:
            report.collisions += 1
        sums[p.row, p.col] += p.yield_norm
        counts[p.row, p.col] += 1
        report.placed += 1
    labeled = counts > 0
    values = np.zeros((height, width), dtype=np.float32)
    values[labeled] = sums[labeled] / counts[labeled]
    return values, labeled, report


# ----------------------------------------------------------------------------
# Tiling and splits


def _axis_origins(dim: int, tile: int, stride: int) -> list[int]:
    origins = list(range(0, dim - tile + 1, stride))
    if origins[-1] != dim - tile:
        origins.append(dim - tile)
    return origins


def tile_plan(
    width: int, height: int, tile: int = TILE_SIZE, overlap: float = TILE_OVERLAP
) -> list[tuple[int, int]]:
    """Row-major list of (row0, col0) tile origins covering the raster."""
    if width < tile or height < tile:
        raise ValueError(
            f"raster {width}x{height} is smaller than the {tile}px tile; pad it first"
        )
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    stride = math.floor(tile * (1 - overlap))
    rows = _axis_origins(height, tile, stride)
    cols = _axis_origins(width, tile, stride)
    return [(r, c) for r in rows for c in cols]


def make_tiles(
    scene: Scene,
    crop_mask: np.ndarray,
    yield_values: np.ndarray,
    yield_labeled: np.ndarray,
    tile: int = TILE_SIZE,
    overlap: float = TILE_OVERLAP,
) -> list[Tile]:
    tiles = []
    for r0, c0 in tile_plan(scene.width, scene.height, tile, overlap):
        win = (slice(r0, r0 + tile), slice(c0, c0 + tile))
        tiles.append(
            Tile(
                bands=np.ascontiguousarray(scene.bands[(slice(None),) + win], dtype=np.float32),
                crop_mask=crop_mask[win].astype(np.uint8),
                yield_values=yield_values[win].astype(np.float32),
                yield_labeled=yield_labeled[win].copy(),
                scene_id=scene.id,
                origin=(r0, c0),
            )
        )
    return tiles


def make_folds(tile_ids: Sequence[str], k: int = 10, seed: int = 0) -> SplitPlan:
    """Shuffle ``tile_ids`` with ``seed`` and deal them round-robin into k folds."""
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    ids = sorted(set(tile_ids))
    if len(ids) != len(tile_ids):
        raise ValueError("tile ids must be unique")
    if len(ids) < k:
        raise ValueError(f"{len(ids)} tiles cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    assignments = {ids[j]: i % k for i, j in enumerate(order)}
    return SplitPlan(fold_count=k, assignments=assignments, seed=seed)
