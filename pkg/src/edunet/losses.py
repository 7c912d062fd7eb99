"""Soft Dice losses."""

from __future__ import annotations

from typing import Dict

import numpy as np

from . import ops
from .tensor import Tensor


def one_hot(mask: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(N, H, W) integer labels -> (N, C, H, W) indicator array."""
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        raise ValueError(f"mask labels must lie in [0, {num_classes}), got max {int(mask.max())}")
    return np.moveaxis(np.eye(num_classes, dtype=dtype)[mask.astype(np.int64)], -1, 1)


def dice_loss(logits: Tensor, mask: np.ndarray, smooth: float = 1.0, include_bg: bool = False) -> Tensor:
    """1 - mean soft Dice over classes (foreground only unless ``include_bg``).

    Sums run over the whole batch: d_c = (2 sum p_c t_c + s) / (sum p_c + sum t_c + s).
    """
    n, c = logits.shape[:2]
    if np.asarray(mask).shape != (n,) + logits.shape[2:]:
        raise ValueError(f"mask shape {np.asarray(mask).shape} does not match logits {logits.shape}")
    target = Tensor(one_hot(mask, c, logits.dtype))
    prob = ops.softmax(logits, axis=1)
    axes = (0, 2, 3)
    inter = ops.sum(prob * target, axis=axes)
    denom = ops.sum(prob, axis=axes) + target.data.sum(axis=axes) + smooth
    dice = (2.0 * inter + smooth) / denom
    start = 0 if include_bg else 1
    return 1.0 - ops.mean(dice[start:])


def branch_losses(outputs: Dict[str, Tensor], mask, smooth: float = 1.0, include_bg: bool = False) -> Dict[str, Tensor]:
    out = {}
    for key, name in (("logits_global", "global"), ("logits_local", "local")):
        if key in outputs:
            out[name] = dice_loss(outputs[key], mask, smooth, include_bg)
    return out


def combined_loss(outputs: Dict[str, Tensor], mask, alpha: float = 1.0, beta: float = 1.0, smooth: float = 1.0, include_bg: bool = False) -> Tensor:
    """alpha * Dice(global) + beta * Dice(local); a disabled branch contributes 0."""
    parts = branch_losses(outputs, mask, smooth, include_bg)
    total = None
    for name, weight in (("global", alpha), ("local", beta)):
        if name in parts:
            term = parts[name] * float(weight)
            total = term if total is None else total + term
    if total is None:
        raise ValueError("outputs contain no branch logits")
    return total
