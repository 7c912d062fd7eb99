"""Grad-CAM heatmaps for named intermediate activations."""

from __future__ import annotations

import numpy as np
from PIL import Image

from . import ops
from .model import EDUNetConfig, edunet_forward, layer_names
from .params import ParamStore
from .tensor import Tensor


def grad_cam(params: ParamStore, cfg: EDUNetConfig, image: np.ndarray, layer_name: str) -> np.ndarray:
    """Heatmap in [0, 1] at input resolution for one (H, W) or (1, 1, H, W) image.

    The target is the sum of all foreground-class logits of every enabled
    branch. Channel weights are the spatial mean of its gradient with respect
    to the layer activation.
    """
    if layer_name not in layer_names(cfg):
        raise KeyError(f"unknown layer {layer_name!r}; choose from {layer_names(cfg)}")
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[None, None]
    if img.shape[:2] != (1, 1):
        raise ValueError(f"grad_cam takes a single image, got {img.shape}")
    h, w = img.shape[2:]

    taps: dict = {}
    out = edunet_forward(Tensor(img), params, cfg, training=False, taps=taps)
    target = None
    for key in ("logits_global", "logits_local"):
        if key in out:
            term = ops.sum(out[key][:, 1:])
            target = term if target is None else target + term
    params.zero_grad()
    act = taps[layer_name]
    target.backward()
    grad = act.grad if act.grad is not None else np.zeros_like(act.data)
    params.zero_grad()

    weights = grad.mean(axis=(2, 3), keepdims=True)
    cam = np.maximum((weights * act.data).sum(axis=1, keepdims=True), 0.0)
    return normalize_heatmap(cam, h, w)


def normalize_heatmap(cam: np.ndarray, h: int, w: int) -> np.ndarray:
    """Min-max normalise, resize bilinearly to (h, w) and clip to [0, 1]."""
    cam = np.asarray(cam, dtype=np.float64).reshape((1, 1) + np.shape(cam)[-2:])
    lo, hi = cam.min(), cam.max()
    cam = (cam - lo) / (hi - lo) if hi > lo else np.zeros_like(cam)
    res = ops.interpolate_bilinear(Tensor(cam), h, w).data[0, 0]
    return np.clip(res, 0.0, 1.0)


def save_heatmap_png(heatmap: np.ndarray, path) -> None:
    arr = np.clip(np.rint(np.asarray(heatmap) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def top_fraction_mask(heatmap: np.ndarray, fraction: float = 0.1) -> np.ndarray:
    """Boolean mask of the highest-valued ``fraction`` of pixels."""
    flat = np.asarray(heatmap).reshape(-1)
    k = max(1, int(round(fraction * flat.size)))
    idx = np.argsort(-flat, kind="stable")[:k]
    out = np.zeros(flat.size, dtype=bool)
    out[idx] = True
    return out.reshape(np.shape(heatmap))


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0
