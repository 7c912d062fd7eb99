"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .ops import record_branches
from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    errors: Dict[str, float] = field(default_factory=dict)
    tol: float = 1e-5
    checked: Dict[str, int] = field(default_factory=dict)
    skipped: Dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        """Every error below ``tol``, with at most half of any group's entries skipped."""
        ok = all(np.isfinite(e) and e < self.tol for e in self.errors.values())
        return ok and all(self.skipped.get(k, 0) <= n for k, n in self.checked.items())


def _scalar(out: Tensor, cotangent: Optional[np.ndarray]) -> Tensor:
    if out.size == 1:
        return out.reshape(())
    return (out * Tensor(cotangent.astype(out.dtype))).sum()


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tol: float = 1e-5,
    eps: Optional[float] = None,
    names: Optional[Sequence[str]] = None,
    max_entries=None,
    seed: int = 0,
    groups: Optional[Sequence[str]] = None,
    reference_dtype=None,
) -> GradCheckReport:
    """Compare backprop gradients of ``fn(*inputs)`` with central differences.

    Non-scalar outputs are contracted with a fixed random cotangent. For each
    input the error is ``max|analytic - numeric| / max(max|analytic|,
    max|numeric|)`` over the checked entries; ``max_entries`` (one value, or one per
    input) samples a subset of coordinates for large inputs. Inputs sharing a ``groups`` label
    are pooled into one error. With ``reference_dtype`` the finite differences
    run on copies of the inputs cast to that dtype, so a float32 backward can
    be judged against a float64 numeric derivative. Entries whose perturbation flips a ReLU or
    max decision are excluded and counted in ``report.skipped``. ``eps`` defaults to 1e-6 for float64 inputs
    and 1e-3 otherwise.
    """
    rng = np.random.default_rng([seed, 0x67726164])
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    groups = list(groups) if groups is not None else names
    if eps is None:
        wide = reference_dtype is not None and np.dtype(reference_dtype) == np.float64
        eps = 1e-6 if wide or all(t.dtype == np.float64 for t in inputs) else 1e-3
    probe = fn(*inputs)
    cot = rng.standard_normal(probe.shape) if probe.size != 1 else None

    for t in inputs:
        t.grad = None
    loss = _scalar(fn(*inputs), cot)
    loss.backward()
    analytic = [None if t.grad is None else t.grad.copy() for t in inputs]

    def evaluate():
        with no_grad(), record_branches() as log:
            out = fn(*inputs).data.astype(np.float64)
        value = float(out.reshape(())) if cot is None else float(np.sum(out * cot))
        return value, log

    def same_branches(a, b) -> bool:
        return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))

    saved = [t.data for t in inputs]
    if reference_dtype is not None:
        for t in inputs:
            t.data = t.data.astype(reference_dtype)
    try:
        pooled = _differences(inputs, groups, analytic, max_entries, eps, rng, evaluate, same_branches)
    finally:
        for t, d in zip(inputs, saved):
            t.data = d

    report = GradCheckReport(tol=tol)
    for name, (got, numeric, skipped) in pooled.items():
        report.skipped[name] = skipped
        got, numeric = np.concatenate(got), np.concatenate(numeric)
        report.checked[name] = int(got.size)
        scale = max(np.abs(got).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
        report.errors[name] = float(np.abs(got - numeric).max(initial=0.0) / scale)
    return report


def _differences(inputs, groups, analytic, max_entries, eps, rng, evaluate, same_branches):
    _, base_branches = evaluate()

    pooled: Dict[str, list] = {}
    if max_entries is None or np.isscalar(max_entries):
        max_entries = [max_entries] * len(inputs)
    for name, t, a, limit in zip(groups, inputs, analytic, max_entries):
        if not t.requires_grad:
            continue
        if a is None:
            a = np.zeros_like(t.data)
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if limit is not None and flat.size > limit:
            idx = np.sort(rng.choice(flat.size, size=limit, replace=False))
        numeric = np.empty(idx.size)
        smooth = np.ones(idx.size, dtype=bool)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp, bp = evaluate()
            flat[i] = orig - eps
            fm, bm = evaluate()
            flat[i] = orig
            numeric[k] = (fp - fm) / (2 * eps)
            # a ReLU/max switch inside [x - eps, x + eps] makes the difference meaningless
            smooth[k] = same_branches(bp, base_branches) and same_branches(bm, base_branches)
        got = a.reshape(-1)[idx].astype(np.float64)
        acc = pooled.setdefault(name, [[], [], 0])
        acc[0].append(got[smooth])
        acc[1].append(numeric[smooth])
        acc[2] += int((~smooth).sum())

    return pooled
