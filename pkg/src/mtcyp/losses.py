"""Masked yield MSE, unlabeled-aware soft Dice, TCL consistency loss and their sum."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
from torch import Tensor

from .data import REAL_CLASSES, CropType

logger = logging.getLogger(__name__)

DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossWeights:
    a: float = 5.0
    b: float = 1.0
    c: float = 0.1

    def __post_init__(self):
        for name in ("a", "b", "c"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {getattr(self, name)}")
        if self.a + self.b + self.c <= 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class LossReport:
    L_MTL: Tensor
    L_MSE: Tensor | None = None
    L_Dice: Tensor | None = None
    L_TCL: Tensor | None = None
    n_points: int = 0

    def as_log(self) -> dict:
        out = {"n_points": self.n_points}
        for key in ("L_MSE", "L_Dice", "L_TCL", "L_MTL"):
            val = getattr(self, key)
            if val is not None:
                out[key] = float(val.detach())
        return out


def masked_mse(yield_pred: Tensor, yield_values: Tensor, yield_labeled: Tensor) -> Tensor:
    """Mean squared error over labeled pixels; 0 (with zero gradient) if there are none."""
    pred = yield_pred.reshape(yield_labeled.shape) if yield_pred.ndim == yield_labeled.ndim + 1 else yield_pred
    mask = yield_labeled.bool()
    # unlabeled targets may hold anything, NaN included
    target = torch.where(mask, yield_values.to(pred.dtype), torch.zeros((), dtype=pred.dtype))
    sq = torch.where(mask, (pred - target) ** 2, torch.zeros((), dtype=pred.dtype))
    n = int(mask.sum())
    return sq.sum() / max(n, 1)


def dice_per_class(
    probs: Tensor, crop_mask: Tensor, smooth: float = DICE_SMOOTH
) -> tuple[Tensor, Tensor]:
    """Soft Dice of each real class and a flag for classes present in ``crop_mask``.

    ``probs`` is (B, 6, H, W); pixels whose ground truth is unlabeled are
    dropped from every sum.
    """
    mask = crop_mask.long()
    valid = (mask != CropType.UNLABELED).unsqueeze(1).to(probs.dtype)
    onehot = torch.stack([(mask == k) for k in range(REAL_CLASSES)], dim=1).to(probs.dtype)
    p = probs[:, :REAL_CLASSES] * valid
    dims = (0, 2, 3)
    inter = (p * onehot).sum(dims)
    denom = p.sum(dims) + onehot.sum(dims)
    dice = (2 * inter + smooth) / (denom + smooth)
    present = onehot.sum(dims) > 0
    return dice, present


def dice_loss(class_logits: Tensor, crop_mask: Tensor, smooth: float = DICE_SMOOTH) -> Tensor:
    """1 - mean soft Dice over the real classes present in the batch."""
    probs = torch.softmax(class_logits, dim=1)
    dice, present = dice_per_class(probs, crop_mask, smooth)
    if not bool(present.any()):
        logger.warning("batch has no labeled class pixels; Dice loss set to 0")
        return (class_logits * 0).sum()
    return 1 - dice[present].mean()


def tcl_loss(stages, reduction: str = "sum", detach_shared: bool = False) -> Tensor | None:
    """Squared distance of both fused branch maps to the shared map, summed over stages.

    ``reduction="mean"`` averages over elements within each stage instead of
    summing. Returns None when no stages were recorded.
    """
    if not stages:
        return None
    if reduction not in ("sum", "mean"):
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    total = 0
    for s in stages:
        shared = s.tclf.detach() if detach_shared else s.tclf
        for fused in (s.regf, s.segf):
            sq = (fused - shared) ** 2
            total = total + (sq.sum() if reduction == "sum" else sq.mean())
    return total


def combined_loss(
    weights: LossWeights,
    mse: Tensor | None = None,
    dice: Tensor | None = None,
    tcl: Tensor | None = None,
    n_points: int = 0,
) -> LossReport:
    """Weighted sum of whichever terms are present; absent terms drop out."""
    total = None
    for w, term in ((weights.a, mse), (weights.b, dice), (weights.c, tcl)):
        if term is None:
            continue
        total = w * term if total is None else total + w * term
    if total is None:
        raise ValueError("combined_loss needs at least one loss term")
    return LossReport(L_MTL=total, L_MSE=mse, L_Dice=dice, L_TCL=tcl, n_points=n_points)


def compute_losses(
    outputs,
    yield_values: Tensor,
    yield_labeled: Tensor,
    crop_mask: Tensor,
    weights: LossWeights,
    tcl_reduction: str = "sum",
    detach_shared: bool = False,
) -> LossReport:
    mse = dice = None
    if outputs.yield_map is not None:
        mse = masked_mse(outputs.yield_map, yield_values, yield_labeled)
    if outputs.class_logits is not None:
        dice = dice_loss(outputs.class_logits, crop_mask)
    tcl = tcl_loss(outputs.stages, tcl_reduction, detach_shared)
    return combined_loss(weights, mse, dice, tcl, n_points=int(yield_labeled.sum()))
