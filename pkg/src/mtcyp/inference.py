"""Sliding-window scene prediction, Grad-CAM on the shared TCL map, and map export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import torch
import torch.nn.functional as F

from .data import NUM_CLASSES, TILE_OVERLAP, TILE_SIZE, Scene, tile_plan
from .io import write_single_band

# Quicklook colors for the class map, indexed by code 0..5.
CLASS_PALETTE = np.array(
    [
        [70, 130, 180],   # rice
        [255, 215, 0],    # maize
        [50, 160, 60],    # soybean
        [200, 120, 200],  # other crop
        [150, 150, 150],  # non-crop
        [0, 0, 0],        # unlabeled
    ],
    dtype=np.uint8,
)


@dataclass
class ScenePrediction:
    yield_map: np.ndarray | None  # (H, W) float32, unclamped
    class_map: np.ndarray | None  # (H, W) uint8
    class_prob: np.ndarray | None  # (6, H, W) float32
    count: np.ndarray  # (H, W) tiles covering each pixel
    n_tiles: int


def _in_channels(model) -> int:
    cfg = getattr(model, "config", None)
    return cfg.in_channels if cfg is not None else next(model.parameters()).shape[1]


@torch.no_grad()
def predict_scene(
    model,
    scene: Scene,
    tile: int = TILE_SIZE,
    overlap: float = TILE_OVERLAP,
    order: list[int] | None = None,
) -> ScenePrediction:
    """Predict every tile of ``scene`` and average overlaps.

    ``order`` permutes the evaluation order of the tiles. Outputs are held
    back until they can be merged in row-major plan order, so the mosaic is
    bit-identical for every ordering.
    """
    expected = _in_channels(model)
    if scene.bands.shape[0] != expected:
        raise ValueError(f"scene has {scene.bands.shape[0]} bands, model expects {expected}")
    plan = tile_plan(scene.width, scene.height, tile, overlap)
    order = list(range(len(plan))) if order is None else list(order)
    if sorted(order) != list(range(len(plan))):
        raise ValueError("order must be a permutation of the tile plan indices")

    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    H, W = scene.height, scene.width
    y_sum = p_sum = None
    count = np.zeros((H, W), dtype=np.int64)
    pending: dict[int, tuple] = {}
    next_merge = 0

    for i in order:
        r0, c0 = plan[i]
        x = torch.from_numpy(np.ascontiguousarray(scene.bands[:, r0 : r0 + tile, c0 : c0 + tile]))
        out = model(x[None].to(dtype))
        y = out.yield_map[0, 0].double().numpy() if out.yield_map is not None else None
        p = torch.softmax(out.class_logits[0], 0).double().numpy() if out.class_logits is not None else None
        pending[i] = (y, p)
        while next_merge in pending:
            y, p = pending.pop(next_merge)
            r, c = plan[next_merge]
            win = (slice(r, r + tile), slice(c, c + tile))
            if y is not None:
                if y_sum is None:
                    y_sum = np.zeros((H, W))
                y_sum[win] += y
            if p is not None:
                if p_sum is None:
                    p_sum = np.zeros((NUM_CLASSES, H, W))
                p_sum[(slice(None),) + win] += p
            count[win] += 1
            next_merge += 1
    model.train(was_training)

    yield_map = (y_sum / count).astype(np.float32) if y_sum is not None else None
    class_prob = class_map = None
    if p_sum is not None:
        class_prob = (p_sum / count).astype(np.float32)
        class_map = class_prob.argmax(0).astype(np.uint8)
    return ScenePrediction(yield_map, class_map, class_prob, count, len(plan))


def gradcam(model, bands, target: str | int = "yield") -> np.ndarray:
    """Grad-CAM heatmap in [0, 1] for ``target`` on the last shared TCL map.

    ``target`` is ``"yield"`` or a class index 0..5. ``bands`` is a (C, H, W)
    array or tensor for one tile.
    """
    cfg = getattr(model, "config", None)
    if cfg is None or not cfg.has_tcl:
        raise ValueError("Grad-CAM needs a multitask_tcl model; other modes have no shared TCL map")
    x = torch.as_tensor(np.asarray(bands))[None].to(next(model.parameters()).dtype)
    was_training = model.training
    model.eval()
    with torch.enable_grad():
        out = model(x)
        feat = out.stages[-1].tclf
        if target == "yield":
            objective = out.yield_map.mean()
        else:
            k = int(target)
            if not 0 <= k < NUM_CLASSES:
                raise ValueError(f"class target must be in 0..{NUM_CLASSES - 1}, got {k}")
            objective = out.class_logits[:, k].mean()
        (grad,) = torch.autograd.grad(objective, feat)
    model.train(was_training)
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * feat).sum(1, keepdim=True))
    if cam.shape[-2:] != x.shape[-2:]:
        cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)
    cam = cam[0, 0].detach().double().numpy()
    lo, hi = cam.min(), cam.max()
    if hi - lo <= 0:
        return np.zeros(cam.shape, dtype=np.float32)
    return ((cam - lo) / (hi - lo)).astype(np.float32)


def _quicklook_yield(grid: np.ndarray, path: Path) -> None:
    plt.imsave(path, grid, cmap="RdYlGn", vmin=0.0, vmax=1.0)


def export_maps(pred: ScenePrediction, scene: Scene, out_dir: str | Path) -> dict[str, Path]:
    """Write yield/class GeoTIFFs on the scene grid plus PNG quicklooks."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    files = {}
    if pred.yield_map is not None:
        grid = np.clip(pred.yield_map, 0.0, 1.0).astype(np.float32)
        files["yield_tif"] = out / f"{scene.id}_yield.tif"
        write_single_band(grid, files["yield_tif"], scene.geotransform, scene.crs, "float32")
        files["yield_png"] = out / f"{scene.id}_yield.png"
        _quicklook_yield(grid, files["yield_png"])
    if pred.class_map is not None:
        files["class_tif"] = out / f"{scene.id}_class.tif"
        write_single_band(pred.class_map, files["class_tif"], scene.geotransform, scene.crs, "uint8")
        files["class_png"] = out / f"{scene.id}_class.png"
        plt.imsave(files["class_png"], CLASS_PALETTE[pred.class_map])
    return files


def save_cam(cam: np.ndarray, out_dir: str | Path, name: str) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw = out / f"{name}.npy"
    png = out / f"{name}.png"
    np.save(raw, cam.astype(np.float32))
    plt.imsave(png, cam, cmap="jet", vmin=0.0, vmax=1.0)
    return {"raw": raw, "png": png}
