"""Adam and a reduce-on-plateau learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .params import ParamStore


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: ParamStore,
    state: AdamState,
    lr: float,
    betas=(0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, in place. Missing grads count as zero."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.named_parameters():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= lr * update
    return state


@dataclass
class PlateauState:
    lr: float
    factor: float = 0.5
    patience: int = 5
    min_lr: float = 1e-6
    threshold: float = 1e-4
    best: float = math.inf
    num_bad: int = 0


def plateau_step(state: PlateauState, val_loss: float) -> float:
    """Relative-threshold 'min' plateau rule; returns the new learning rate."""
    if val_loss < state.best * (1.0 - state.threshold):
        state.best = val_loss
        state.num_bad = 0
    else:
        state.num_bad += 1
    if state.num_bad > state.patience:
        new_lr = max(state.lr * state.factor, state.min_lr)
        if state.lr - new_lr > 1e-12:
            state.lr = new_lr
        state.num_bad = 0
    return state.lr
