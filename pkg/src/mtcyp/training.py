"""SGD training loop, evaluation, cross-validation and few-shot sweeps."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .data import Tile, make_folds
from .losses import compute_losses
from .metrics import ConfusionMatrix, confusion, macc, mae, miou, rmse, summarize
from .network import MTCYPNet, ModelConfig, build_model, export_weights

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``base_lr`` then cosine decay towards zero."""
    w = cfg.warmup_iters
    if total_steps <= w:
        raise ValueError(f"total_steps ({total_steps}) must exceed warmup_iters ({w})")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if step < w:
        return cfg.base_lr * (step + 1) / w
    return cfg.base_lr * 0.5 * (1 + math.cos(math.pi * (step - w) / (total_steps - w)))


# ----------------------------------------------------------------------------
# Augmentation


def flip_h(tile: Tile) -> Tile:
    return _spatial(tile, lambda a: np.flip(a, axis=-1))


def flip_v(tile: Tile) -> Tile:
    return _spatial(tile, lambda a: np.flip(a, axis=-2))


def rot90(tile: Tile) -> Tile:
    return _spatial(tile, lambda a: np.rot90(a, axes=(-2, -1)))


def _spatial(tile: Tile, fn) -> Tile:
    return replace(
        tile,
        bands=np.ascontiguousarray(fn(tile.bands)),
        crop_mask=np.ascontiguousarray(fn(tile.crop_mask)),
        yield_values=np.ascontiguousarray(fn(tile.yield_values)),
        yield_labeled=np.ascontiguousarray(fn(tile.yield_labeled)),
    )


def augment(tile: Tile, rng: np.random.Generator, p: float = 0.5) -> Tile:
    """Horizontal flip, vertical flip and 90 degree rotation, each with probability ``p``."""
    if tile.bands.shape[-1] != tile.bands.shape[-2]:
        raise ValueError("augmentation needs square tiles")
    draws = rng.random(3)
    if draws[0] < p:
        tile = flip_h(tile)
    if draws[1] < p:
        tile = flip_v(tile)
    if draws[2] < p:
        tile = rot90(tile)
    return tile


# ----------------------------------------------------------------------------
# Batching and evaluation


def collate(tiles: list[Tile], dtype=torch.float32):
    bands = torch.from_numpy(np.stack([t.bands for t in tiles])).to(dtype)
    mask = torch.from_numpy(np.stack([t.crop_mask for t in tiles]).astype(np.int64))
    values = torch.from_numpy(np.stack([t.yield_values for t in tiles])).to(dtype)
    labeled = torch.from_numpy(np.stack([t.yield_labeled for t in tiles]))
    return bands, mask, values, labeled


def band_statistics(tiles: list[Tile]) -> tuple[np.ndarray, np.ndarray]:
    """Per-band mean and standard deviation over all pixels of ``tiles``."""
    n = 0
    total = sq = 0.0
    for t in tiles:
        b = t.bands.astype(np.float64)
        total = total + b.sum(axis=(1, 2))
        sq = sq + (b**2).sum(axis=(1, 2))
        n += b.shape[1] * b.shape[2]
    mean = total / n
    return mean, np.sqrt(np.maximum(sq / n - mean**2, 0.0))


@torch.no_grad()
def evaluate(model: MTCYPNet, tiles: list[Tile], batch_size: int = 8) -> dict:
    """RMSE/MAE at labeled yield pixels and mIoU/mAcc over labeled class pixels."""
    was_training = model.training
    model.eval()
    ys, preds = [], []
    cm = ConfusionMatrix.empty()
    for i in range(0, len(tiles), batch_size):
        bands, mask, values, labeled = collate(tiles[i : i + batch_size])
        out = model(bands.to(next(model.parameters()).dtype))
        if out.yield_map is not None:
            pred = out.yield_map[:, 0]
            ys.append(values[labeled].double().numpy())
            preds.append(pred[labeled].double().numpy())
        if out.class_logits is not None:
            cm = cm + confusion(out.class_logits.argmax(1).numpy(), mask.numpy())
    model.train(was_training)
    res = {"rmse": None, "mae": None, "miou": None, "macc": None, "n_points": 0}
    if ys:
        y, p = np.concatenate(ys), np.concatenate(preds)
        res["n_points"] = int(y.size)
        if y.size:
            res["rmse"], res["mae"] = rmse(y, p), mae(y, p)
    if cm.total:
        res["miou"], res["macc"] = miou(cm), macc(cm)
    return res


def _score(metrics: dict) -> float:
    # lower is better: RMSE when yield is predicted, else negative mIoU
    if metrics.get("rmse") is not None:
        return metrics["rmse"]
    if metrics.get("miou") is not None:
        return -metrics["miou"]
    return math.inf


@dataclass
class RunRecord:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_metrics: dict | None = None
    final_metrics: dict | None = None
    checkpoints: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    model: MTCYPNet | None = field(default=None, repr=False)
    best_state: dict | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "best_metrics": self.best_metrics,
            "final_metrics": self.final_metrics,
            "checkpoints": self.checkpoints,
            "config": self.config,
            "wall_clock": self.wall_clock,
        }


def train(
    train_tiles: list[Tile],
    val_tiles: list[Tile],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    out_dir: str | Path | None = None,
) -> RunRecord:
    """Train one model; keeps the best-validation-RMSE and final weights."""
    if not train_tiles:
        raise ValueError("training split is empty")
    model_cfg = ModelConfig(**{**model_cfg.to_dict(), "mode": cfg.mode})
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = build_model(model_cfg, seed=cfg.seed)
    model.set_input_stats(*band_statistics(train_tiles))
    model.train()
    opt = torch.optim.SGD(
        model.parameters(), lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    per_epoch = math.ceil(len(train_tiles) / cfg.batch_size)
    horizon = cfg.epochs * per_epoch
    if horizon <= cfg.warmup_iters:
        raise ValueError(
            f"{cfg.epochs} epochs x {per_epoch} batches = {horizon} steps do not outlast "
            f"the {cfg.warmup_iters}-step warmup"
        )
    # max_steps truncates the run; the schedule keeps its full horizon
    total = horizon if cfg.max_steps is None else min(horizon, cfg.max_steps)
    record = RunRecord(config={"train": cfg.to_dict(), "model": model_cfg.to_dict()})
    log_fh = open(out / "train_log.jsonl", "w") if out is not None else None
    t0 = time.perf_counter()
    step = 0
    best = math.inf
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(train_tiles))
            for b in range(per_epoch):
                if step >= total:
                    break
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                batch = [augment(train_tiles[i], rng, cfg.aug_prob) for i in idx]
                bands, mask, values, labeled = collate(batch)
                lr = lr_at(step, horizon, cfg)
                for group in opt.param_groups:
                    group["lr"] = lr
                outputs = model(bands)
                report = compute_losses(
                    outputs, values, labeled, mask, cfg.loss_weights,
                    cfg.tcl_reduction, cfg.detach_shared,
                )
                if not torch.isfinite(report.L_MTL):
                    ids = [train_tiles[i].id for i in idx]
                    if out is not None:
                        (out / "diverged_batch.json").write_text(
                            json.dumps({"step": step, "epoch": epoch, "tiles": ids, **report.as_log()})
                        )
                    raise TrainingDiverged(f"non-finite loss at step {step} (epoch {epoch}); batch tiles {ids}")
                opt.zero_grad(set_to_none=True)
                report.L_MTL.backward()
                opt.step()
                entry = {"step": step, "epoch": epoch, "lr": lr, **report.as_log()}
                record.steps.append(entry)
                if log_fh is not None:
                    log_fh.write(json.dumps(entry) + "\n")
                step += 1
            last = epoch == cfg.epochs - 1 or step >= total
            if val_tiles and ((epoch + 1) % cfg.eval_every == 0 or last):
                metrics = evaluate(model, val_tiles, cfg.batch_size)
                record.epochs.append({"epoch": epoch, **metrics})
                if _score(metrics) < best:
                    best = _score(metrics)
                    record.best_epoch = epoch
                    record.best_metrics = metrics
                    record.best_state = copy.deepcopy(model.state_dict())
            if step >= total:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    record.wall_clock = time.perf_counter() - t0
    record.final_metrics = record.epochs[-1] if record.epochs else None
    record.model = model
    if out is not None:
        export_weights(model, out / "final.safetensors")
        record.checkpoints["final"] = str(out / "final.safetensors")
        if record.best_state is not None:
            best_model = build_model(model_cfg)
            best_model.load_state_dict(record.best_state)
            export_weights(best_model, out / "best.safetensors")
            record.checkpoints["best"] = str(out / "best.safetensors")
        (out / "run_record.json").write_text(json.dumps(record.to_dict(), indent=2))
    return record


def run_crossval(
    tiles: list[Tile],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    k: int = 10,
    fold_seed: int = 0,
    folds: list[int] | None = None,
    out_dir: str | Path | None = None,
) -> dict:
    """Train one model per fold and aggregate the best-checkpoint validation metrics."""
    plan = make_folds([t.id for t in tiles], k, fold_seed)
    by_id = {t.id: t for t in tiles}
    records = []
    for f in folds if folds is not None else range(k):
        val = [by_id[i] for i in sorted(plan.validation_ids(f))]
        trn = [by_id[i] for i in sorted(plan.training_ids(f))]
        sub = Path(out_dir) / f"fold{f:02d}" if out_dir is not None else None
        rec = train(trn, val, cfg, model_cfg, sub)
        metrics = rec.best_metrics or {}
        records.append({"fold": f, **metrics, "best_epoch": rec.best_epoch, "final": rec.final_metrics})
        logger.info("fold %d: %s", f, metrics)
    return {"k": k, "fold_seed": fold_seed, "folds": records, "summary": summarize(records)}


def run_fewshot(
    tiles: list[Tile],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    fractions=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
    repeats: int = 10,
    seed: int = 0,
    train_share: float = 0.7,
) -> dict:
    """Train on growing fractions of a fixed 70% pool; validate on the fixed 30%."""
    order = np.random.default_rng(seed).permutation(len(tiles))
    n_pool = int(round(train_share * len(tiles)))
    pool = [tiles[i] for i in order[:n_pool]]
    val = [tiles[i] for i in order[n_pool:]]
    if not pool or not val:
        raise ValueError(f"{len(tiles)} tiles cannot be split {train_share:.0%}/{1 - train_share:.0%}")
    curve = []
    for fi, frac in enumerate(fractions):
        n = max(1, int(round(frac * len(pool))))
        runs = []
        for r in range(repeats):
            pick = np.random.default_rng([seed, fi, r]).choice(len(pool), size=n, replace=False)
            subset = [pool[i] for i in sorted(pick)]
            if sum(t.n_points for t in subset) == 0 and model_cfg.has_yield:
                logger.warning("fraction %.2f repeat %d has no labeled points; skipped", frac, r)
                continue
            rec = train(subset, val, replace(cfg, seed=cfg.seed + r), model_cfg)
            runs.append(rec.best_metrics["rmse"])
        mean = float(math.fsum(runs) / len(runs)) if runs else None
        curve.append({"fraction": float(frac), "n_tiles": n, "rmse": runs, "mean_rmse": mean})
    return {"seed": seed, "pool": len(pool), "validation": len(val), "curve": curve}


def compare_modes(
    tiles: list[Tile],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    modes=("multitask_tcl", "multitask_hard", "yield_only"),
    seeds=(0, 1, 2),
    k: int = 10,
) -> dict:
    """Ablation over modes: for each seed, hold out fold 0 of a k-fold plan and
    train every mode on the same split with the same initialization seed."""
    runs = {m: [] for m in modes}
    for seed in seeds:
        plan = make_folds([t.id for t in tiles], k, seed)
        by_id = {t.id: t for t in tiles}
        val = [by_id[i] for i in sorted(plan.validation_ids(0))]
        trn = [by_id[i] for i in sorted(plan.training_ids(0))]
        for mode in modes:
            rec = train(trn, val, replace(cfg, mode=mode, seed=seed), model_cfg)
            runs[mode].append({"seed": seed, **rec.best_metrics, "best_epoch": rec.best_epoch})
            logger.info("mode %s seed %d: %s", mode, seed, rec.best_metrics)
    return {m: {"runs": r, "summary": summarize(r)} for m, r in runs.items()}
