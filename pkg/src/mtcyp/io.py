"""GeoTIFF, point CSV and tile-store I/O."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np
import rasterio
from affine import Affine
from rasterio.transform import rowcol

from .data import Scene, Tile, YieldPoint

logger = logging.getLogger(__name__)

POINT_FIELDS = ("scene_id", "row", "col", "yield_raw", "crop_type")


def _to_affine(gt) -> Affine:
    # 6-number GDAL order: (x0, dx, rx, y0, ry, dy)
    return Affine.from_gdal(*gt)


def write_scene(scene: Scene, path: str | Path) -> None:
    profile = dict(
        driver="GTiff",
        height=scene.height,
        width=scene.width,
        count=scene.bands.shape[0],
        dtype="float32",
        transform=_to_affine(scene.geotransform) if scene.geotransform else None,
        crs=scene.crs,
    )
    with rasterio.open(path, "w", **profile) as dst:
        dst.write(scene.bands.astype(np.float32))
        dst.descriptions = tuple(scene.band_names)
        dst.update_tags(
            scene_id=scene.id,
            date=scene.date or "",
            level=scene.level,
            pixel_size_m=str(scene.pixel_size_m),
        )


def read_scene(path: str | Path) -> Scene:
    path = Path(path)
    with rasterio.open(path) as src:
        bands = src.read().astype(np.float32)
        tags = src.tags()
        names = [d or f"band{i + 1}" for i, d in enumerate(src.descriptions)]
        gt = None if src.transform.is_identity else tuple(src.transform.to_gdal())
        crs = src.crs.to_string() if src.crs else None
        pixel = float(tags.get("pixel_size_m", abs(src.transform.a)))
    return Scene(
        id=tags.get("scene_id", path.stem),
        bands=bands,
        band_names=names,
        pixel_size_m=pixel,
        geotransform=gt,
        crs=crs,
        date=tags.get("date") or None,
        level=tags.get("level", "L2A"),
    )


def write_single_band(grid: np.ndarray, path: str | Path, geotransform, crs, dtype: str) -> None:
    with rasterio.open(
        path,
        "w",
        driver="GTiff",
        height=grid.shape[0],
        width=grid.shape[1],
        count=1,
        dtype=dtype,
        transform=_to_affine(geotransform) if geotransform else None,
        crs=crs,
    ) as dst:
        dst.write(grid.astype(dtype), 1)


def read_single_band(path: str | Path) -> np.ndarray:
    with rasterio.open(path) as src:
        return src.read(1)


def read_georef(path: str | Path) -> tuple[tuple[float, ...] | None, str | None]:
    with rasterio.open(path) as src:
        gt = None if src.transform.is_identity else tuple(src.transform.to_gdal())
        return gt, (src.crs.to_string() if src.crs else None)


def write_points(points, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(POINT_FIELDS)
        for p in points:
            writer.writerow([p.scene_id, p.row, p.col, repr(float(p.yield_raw)), int(p.crop_type)])


def read_points(path: str | Path, scenes: dict[str, Scene] | None = None) -> list[YieldPoint]:
    """Read yield points from CSV.

    Rows may give pixel ``row,col`` or geographic ``x,y``; the latter need
    the matching scene in ``scenes`` for its geotransform.
    """
    points = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or ())
        pixel = {"row", "col"} <= cols
        geo = {"x", "y"} <= cols
        if not (pixel or geo) or not {"scene_id", "yield_raw", "crop_type"} <= cols:
            raise ValueError(
                f"{path}: expected header {','.join(POINT_FIELDS)} (or x,y instead of row,col)"
            )
        for rec in reader:
            sid = rec["scene_id"]
            if pixel:
                r, c = int(rec["row"]), int(rec["col"])
            else:
                if scenes is None or sid not in scenes or scenes[sid].geotransform is None:
                    raise ValueError(f"no georeferenced scene {sid!r} to place x,y points")
                r, c = rowcol(_to_affine(scenes[sid].geotransform), float(rec["x"]), float(rec["y"]))
            points.append(
                YieldPoint(
                    scene_id=sid,
                    row=int(r),
                    col=int(c),
                    yield_raw=float(rec["yield_raw"]),
                    crop_type=int(rec["crop_type"]),
                )
            )
    return points


# ----------------------------------------------------------------------------
# Tile store: one .npz per tile plus index.json


def _tile_filename(tid: str) -> str:
    return tid.replace(":", "_").replace("/", "_") + ".npz"


def save_tiles(tiles: list[Tile], out_dir: str | Path, band_names: list[str]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {"band_names": list(band_names), "tiles": {}}
    for t in tiles:
        name = _tile_filename(t.id)
        np.savez_compressed(
            out_dir / name,
            bands=t.bands,
            crop_mask=t.crop_mask,
            yield_values=t.yield_values,
            yield_labeled=t.yield_labeled,
        )
        index["tiles"][t.id] = {
            "file": name,
            "scene_id": t.scene_id,
            "origin": list(t.origin),
            "n_points": t.n_points,
        }
    path = out_dir / "index.json"
    path.write_text(json.dumps(index, indent=2))
    return path


def load_tiles(store: str | Path) -> tuple[list[Tile], list[str]]:
    store = Path(store)
    index = json.loads((store / "index.json").read_text())
    tiles = []
    for tid, meta in index["tiles"].items():
        with np.load(store / meta["file"]) as z:
            tiles.append(
                Tile(
                    bands=z["bands"],
                    crop_mask=z["crop_mask"],
                    yield_values=z["yield_values"],
                    yield_labeled=z["yield_labeled"],
                    scene_id=meta["scene_id"],
                    origin=tuple(meta["origin"]),
                )
            )
    return tiles, index["band_names"]


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
