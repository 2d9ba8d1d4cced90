"""Synthetic Sentinel-like scenes with dense yield and crop-type ground truth.

Fields are Voronoi cells around seeded centers. A smooth "health" surface
(sum of Gaussian bumps) perturbs reflectance and sets yield through a
per-class linear response, so yield is a deterministic function of
(class, health) at every pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .data import (
    CROP_CLASSES,
    REAL_CLASSES,
    CropType,
    Scene,
    Tile,
    YieldPoint,
    make_tiles,
    rasterize_points,
)

DEFAULT_BANDS = ("B02", "B03", "B04", "B08")

# Rows: rice, maize, soybean, other crop, non-crop. Columns: B02, B03, B04, B08.
DEFAULT_PALETTE = (
    (0.04, 0.07, 0.05, 0.30),
    (0.05, 0.10, 0.04, 0.42),
    (0.07, 0.09, 0.08, 0.36),
    (0.08, 0.12, 0.11, 0.24),
    (0.13, 0.14, 0.17, 0.17),
)
# Reflectance change per unit of (health - 0.5); red drops and NIR rises with vigor.
DEFAULT_SENSITIVITY = (-0.01, 0.01, -0.04, 0.12)
# (intercept, slope) of yield as a function of health, per crop class.
DEFAULT_RESPONSE = ((0.30, 0.50), (0.05, 0.90), (0.20, 0.65), (0.25, 0.45))

GEOTRANSFORM = (500000.0, 10.0, 0.0, 5200000.0, 0.0, -10.0)
CRS = "EPSG:32652"


@dataclass
class SynthSpec:
    seed: int = 0
    size: tuple[int, int] = (256, 256)
    n_fields: int = 12
    bands: int = 4
    crop_palette: tuple | None = None
    sensitivity: tuple | None = None
    noise_sigma: float = 0.005
    yield_response: tuple = DEFAULT_RESPONSE
    n_bumps: int = 8
    boundary_unlabeled: bool = True
    band_names: tuple | None = None

    def __post_init__(self):
        self.size = tuple(self.size)
        if self.size[0] < 256 or self.size[1] < 256:
            raise ValueError(f"synthetic scenes must be at least 256x256, got {self.size}")
        if self.n_fields <= 0:
            raise ValueError("n_fields must be positive")
        if len(self.yield_response) != len(CROP_CLASSES):
            raise ValueError("yield_response needs one (intercept, slope) per crop class")

    def palette(self) -> np.ndarray:
        if self.crop_palette is not None:
            p = np.asarray(self.crop_palette, dtype=np.float64)
        elif self.bands == len(DEFAULT_BANDS):
            p = np.asarray(DEFAULT_PALETTE)
        else:
            # fixed generator: the palette must not depend on the scene seed
            p = np.random.default_rng(20230815).uniform(0.03, 0.45, (REAL_CLASSES, self.bands))
        if p.shape != (REAL_CLASSES, self.bands):
            raise ValueError(f"palette shape {p.shape} != ({REAL_CLASSES}, {self.bands})")
        return p

    def band_sensitivity(self) -> np.ndarray:
        if self.sensitivity is not None:
            return np.asarray(self.sensitivity, dtype=np.float64)
        if self.bands == len(DEFAULT_BANDS):
            return np.asarray(DEFAULT_SENSITIVITY)
        return np.random.default_rng(19810101).uniform(-0.05, 0.12, self.bands)

    def names(self) -> list[str]:
        if self.band_names is not None:
            return list(self.band_names)
        if self.bands == len(DEFAULT_BANDS):
            return list(DEFAULT_BANDS)
        return [f"S{i + 1:02d}" for i in range(self.bands)]


def health_field(shape, n_bumps: int, rng: np.random.Generator) -> np.ndarray:
    h, w = shape
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    out = np.zeros(shape)
    for _ in range(n_bumps):
        r0, c0 = rng.uniform(0, h), rng.uniform(0, w)
        sigma = rng.uniform(0.12, 0.35) * min(h, w)
        amp = rng.uniform(-1.0, 1.0)
        out += amp * np.exp(-((rows - r0) ** 2 + (cols - c0) ** 2) / (2 * sigma**2))
    lo, hi = out.min(), out.max()
    if hi - lo < 1e-12:
        return np.full(shape, 0.5)
    return (out - lo) / (hi - lo)


def _field_labels(shape, n_fields: int, rng: np.random.Generator) -> np.ndarray:
    h, w = shape
    centers = np.column_stack([rng.uniform(0, h, n_fields), rng.uniform(0, w, n_fields)])
    grid = np.stack(np.meshgrid(np.arange(h), np.arange(w), indexing="ij"), -1).reshape(-1, 2)
    _, idx = cKDTree(centers).query(grid)
    return idx.reshape(h, w)


def _field_classes(n_fields: int, rng: np.random.Generator) -> np.ndarray:
    classes = rng.integers(0, REAL_CLASSES, n_fields)
    if n_fields >= 3:
        classes[0] = CropType.NON_CROP
        classes[1] = rng.integers(0, len(CROP_CLASSES))
    return classes


def generate_scene(spec: SynthSpec, scene_id: str | None = None):
    """Return (Scene, crop_mask, dense_yield) for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    shape = spec.size
    fields = _field_labels(shape, spec.n_fields, rng)
    classes = _field_classes(spec.n_fields, rng)[fields]
    health = health_field(shape, spec.n_bumps, rng)

    palette = spec.palette()
    sens = spec.band_sensitivity()
    bands = palette[classes].transpose(2, 0, 1) + sens[:, None, None] * (health - 0.5)
    if spec.noise_sigma > 0:
        bands = bands + rng.normal(0.0, spec.noise_sigma, bands.shape)
    bands = np.clip(bands, 0.0, 1.0).astype(np.float32)

    dense = np.zeros(shape)
    for crop, (icpt, slope) in zip(CROP_CLASSES, spec.yield_response):
        sel = classes == crop
        dense[sel] = icpt + slope * health[sel]
    dense = np.clip(dense, 0.0, 1.0).astype(np.float32)

    mask = classes.astype(np.uint8)
    if spec.boundary_unlabeled:
        edge = np.zeros(shape, dtype=bool)
        edge[:-1, :] |= fields[:-1, :] != fields[1:, :]
        edge[:, :-1] |= fields[:, :-1] != fields[:, 1:]
        mask[edge] = CropType.UNLABELED

    scene = Scene(
        id=scene_id or f"synth{spec.seed}",
        bands=bands,
        band_names=spec.names(),
        pixel_size_m=10.0,
        geotransform=GEOTRANSFORM,
        crs=CRS,
        date="2023-08-15",
        level="L2A",
    )
    return scene, mask, dense


def sample_points(
    dense_yield: np.ndarray,
    crop_mask: np.ndarray,
    n: int,
    seed: int,
    scene_id: str = "synth",
) -> list[YieldPoint]:
    """Draw ``n`` distinct crop pixels and read their yield off ``dense_yield``."""
    candidates = np.flatnonzero(np.isin(crop_mask, CROP_CLASSES))
    if n > candidates.size:
        raise ValueError(f"asked for {n} points but only {candidates.size} crop pixels exist")
    if n == 0:
        return []
    chosen = np.sort(np.random.default_rng(seed).choice(candidates, size=n, replace=False))
    rows, cols = np.unravel_index(chosen, crop_mask.shape)
    return [
        YieldPoint(
            scene_id=scene_id,
            row=int(r),
            col=int(c),
            yield_raw=float(dense_yield[r, c]),
            crop_type=int(crop_mask[r, c]),
            yield_norm=float(dense_yield[r, c]),
        )
        for r, c in zip(rows, cols)
    ]


@dataclass
class SynthDataset:
    tiles: list[Tile]
    band_names: list[str]
    scenes: list[tuple] = field(default_factory=list)


def synthetic_tiles(
    n_tiles: int,
    points_per_tile: int,
    seed: int = 0,
    spec: SynthSpec | None = None,
) -> SynthDataset:
    """Independent single-tile scenes, ``points_per_tile`` yield points each."""
    base = spec or SynthSpec()
    tiles = []
    scenes = []
    ss = np.random.SeedSequence(seed)
    for i, child in enumerate(ss.spawn(n_tiles)):
        s = SynthSpec(**{**base.__dict__, "seed": int(child.generate_state(1)[0]), "size": (256, 256)})
        scene, mask, dense = generate_scene(s, scene_id=f"s{seed}_{i:03d}")
        pts = sample_points(dense, mask, points_per_tile, seed=s.seed + 1, scene_id=scene.id)
        values, labeled, _ = rasterize_points(pts, scene.height, scene.width)
        tiles.extend(make_tiles(scene, mask, values, labeled))
        scenes.append((scene, mask, dense))
    return SynthDataset(tiles=tiles, band_names=base.names(), scenes=scenes)
