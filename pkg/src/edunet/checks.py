"""Registry of gradient checks over every differentiable op and block."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import blocks, ops
from .blocks import BlockConfig
from .gradcheck import GradCheckReport, grad_check
from .losses import dice_loss
from .model import EDUNetConfig, MCEGAInputs, edunet_forward, init_mc_ega, init_params, mc_ega
from .params import ParamStore
from .pyramid import build_pyramid
from .tensor import Tensor


@dataclass
class Case:
    fn: Callable[..., Tensor]
    inputs: List[Tensor]
    names: List[str]
    groups: Optional[List[str]] = None
    max_entries: Optional[list] = None


def _t(rng, shape, dtype, lo=None, hi=None) -> Tensor:
    if lo is not None:
        data = rng.uniform(lo, hi, size=shape)
    else:
        data = rng.standard_normal(shape)
    return Tensor(data.astype(dtype), requires_grad=True)


def _with_params(store: ParamStore, dtype, x: Sequence[Tensor], fn, x_names, max_entries=None) -> Case:
    p = store.copy(dtype)
    names = list(p.params)
    return Case(
        lambda *args: fn(*args[: len(x)], p),
        list(x) + [p.params[k] for k in names],
        list(x_names) + names,
        list(x_names) + ["params"] * len(names),
        None if max_entries is None else [None] * len(x) + [max_entries] * len(names),
    )


def _unary(op):
    def build(rng, dtype):
        return Case(op, [_t(rng, (2, 3, 4, 5), dtype)], ["x"])

    return build


def _binary(op, positive_b=False):
    def build(rng, dtype):
        a = _t(rng, (2, 3, 4, 5), dtype)
        b = _t(rng, (3, 1, 5), dtype, 0.5, 2.0) if positive_b else _t(rng, (3, 1, 5), dtype)
        return Case(op, [a, b], ["a", "b"])

    return build


def _log(rng, dtype):
    return Case(ops.log, [_t(rng, (2, 3, 4), dtype, 0.5, 2.0)], ["x"])


def _reshape(rng, dtype):
    return Case(lambda x: ops.reshape(x, (6, 10)), [_t(rng, (2, 3, 10), dtype)], ["x"])


def _getitem(rng, dtype):
    return Case(lambda x: x[:, 1:3, ::2], [_t(rng, (2, 4, 6), dtype)], ["x"])


def _concat(rng, dtype):
    return Case(lambda a, b: ops.concat([a, b], axis=1), [_t(rng, (2, 2, 3, 3), dtype), _t(rng, (2, 3, 3, 3), dtype)], ["a", "b"])


def _reduce(op, **kw):
    def build(rng, dtype):
        return Case(lambda x: op(x, **kw), [_t(rng, (2, 3, 4, 5), dtype)], ["x"])

    return build


def _linear(rng, dtype):
    return Case(ops.linear, [_t(rng, (4, 6), dtype), _t(rng, (3, 6), dtype), _t(rng, (3,), dtype)], ["x", "w", "b"])


def _conv(stride, padding, groups, k=3, cin=4, cout=6, size=7):
    def build(rng, dtype):
        x = _t(rng, (2, cin, size, size), dtype)
        w = _t(rng, (cout, cin // groups, k, k), dtype)
        b = _t(rng, (cout,), dtype)
        return Case(lambda x, w, b: ops.conv2d(x, w, b, stride, padding, groups), [x, w, b], ["x", "w", "b"])

    return build


def _conv_transpose(rng, dtype):
    x = _t(rng, (2, 3, 4, 4), dtype)
    w = _t(rng, (3, 5, 2, 2), dtype)
    b = _t(rng, (5,), dtype)
    return Case(lambda x, w, b: ops.conv_transpose2d(x, w, b, stride=2), [x, w, b], ["x", "w", "b"])


def _interp(rng, dtype):
    return Case(lambda x: ops.interpolate_bilinear(x, 7, 10), [_t(rng, (2, 2, 4, 5), dtype)], ["x"])


def _batch_norm(training):
    def build(rng, dtype):
        x = _t(rng, (3, 4, 3, 3), dtype)
        g = _t(rng, (4,), dtype, 0.5, 1.5)
        b = _t(rng, (4,), dtype)
        rm = rng.standard_normal(4).astype(dtype)
        rv = rng.uniform(0.5, 2.0, 4).astype(dtype)
        return Case(lambda x, g, b: ops.batch_norm(x, g, b, rm.copy(), rv.copy(), training), [x, g, b], ["x", "gamma", "beta"])

    return build


def _layer_norm(rng, dtype):
    x = _t(rng, (2, 5, 3, 3), dtype)
    return Case(ops.layer_norm, [x, _t(rng, (5,), dtype, 0.5, 1.5), _t(rng, (5,), dtype)], ["x", "gamma", "beta"])


def _pool(op, size=(5, 7)):
    def build(rng, dtype):
        return Case(op, [_t(rng, (2, 3) + size, dtype)], ["x"])

    return build


def _se(rng, dtype):
    store = ParamStore()
    blocks.init_se(store, 8, 2, rng)
    return _with_params(store, dtype, [_t(rng, (2, 8, 5, 5), dtype)], lambda x, p: blocks.se_block(x, p), ["x"])


def _mbconv(stride, expand):
    def build(rng, dtype):
        cfg = BlockConfig(4, 4 if stride == 1 else 6, 3, expand, stride)
        store = ParamStore()
        blocks.init_mbconv(store, cfg, rng)
        x = _t(rng, (2, 4, 6, 6), dtype)
        return _with_params(store, dtype, [x], lambda x, p: blocks.mbconv(x, cfg, p, True), ["x"])

    return build


def _lkec(rng, dtype):
    store = ParamStore()
    # a unit layer scale keeps the residual branch visible to finite differences
    blocks.init_lkec(store, 4, rng, layer_scale_init=1.0)
    x = _t(rng, (2, 4, 8, 8), dtype)
    return _with_params(store, dtype, [x], lambda x, p: blocks.lkec_block(x, p, False), ["x"])


def _cbam(rng, dtype):
    store = ParamStore()
    blocks.init_cbam(store, 16, rng)
    return _with_params(store, dtype, [_t(rng, (2, 16, 6, 6), dtype)], lambda x, p: blocks.cbam(x, p), ["x"])


def _mcega(rng, dtype):
    store = ParamStore()
    init_mc_ega(store, 4, rng)
    f_e = _t(rng, (2, 4, 6, 6), dtype)
    f_hf = _t(rng, (2, 1, 12, 12), dtype)
    pred = _t(rng, (2, 3, 3, 3), dtype)
    fn = lambda a, b, c, p: mc_ega(MCEGAInputs(a, b, c), p, 3)  # noqa: E731
    return _with_params(store, dtype, [f_e, f_hf, pred], fn, ["f_e", "f_hf", "f_pred"])


def _double_conv(rng, dtype):
    store = ParamStore()
    blocks.init_double_conv(store, 3, 4, rng)
    return _with_params(store, dtype, [_t(rng, (2, 3, 5, 5), dtype)], lambda x, p: blocks.double_conv(x, p, True), ["x"])


def _dice(rng, dtype):
    mask = rng.integers(0, 3, size=(2, 5, 5))
    return Case(lambda x: dice_loss(x, mask), [_t(rng, (2, 3, 5, 5), dtype)], ["logits"])


def _model(rng, dtype):
    cfg = EDUNetConfig(num_classes=3, input_size=(16, 16), layer_scale_init=1.0)
    store = init_params(cfg, rng)
    image = Tensor(rng.uniform(0, 1, size=(1, 1, 16, 16)).astype(dtype), requires_grad=True)
    # the edge pyramid is fixed preprocessing of the image, so hold it constant
    pyr = build_pyramid(image.data, cfg.num_stages)

    def fn(x, p):
        return edunet_forward(x, p, cfg, training=False, pyramid=pyr)["fused_prob"]

    return _with_params(store, dtype, [image], fn, ["image"], max_entries=3)


REGISTRY: Dict[str, Callable[[np.random.Generator, type], Case]] = {
    "add": _binary(ops.add),
    "sub": _binary(ops.sub),
    "mul": _binary(ops.mul),
    "div": _binary(ops.div, positive_b=True),
    "exp": _unary(ops.exp),
    "log": _log,
    "reshape": _reshape,
    "getitem": _getitem,
    "concat": _concat,
    "sum": _reduce(ops.sum, axis=(1, 3)),
    "mean": _reduce(ops.mean, axis=2, keepdims=True),
    "amax": _reduce(ops.amax, axis=1, keepdims=True),
    "relu": _unary(ops.relu),
    "sigmoid": _unary(ops.sigmoid),
    "swish": _unary(ops.swish),
    "gelu": _unary(ops.gelu),
    "softmax": _unary(ops.softmax),
    "linear": _linear,
    "conv2d": _conv(1, 1, 1),
    "conv2d_strided": _conv(2, (0, 1, 0, 1), 1, size=8),
    "conv2d_grouped": _conv(1, 1, 2),
    "conv2d_depthwise": _conv(2, (1, 1, 1, 1), 4, k=3, cin=4, cout=4),
    "conv_transpose2d": _conv_transpose,
    "interpolate_bilinear": _interp,
    "batch_norm_train": _batch_norm(True),
    "batch_norm_eval": _batch_norm(False),
    "layer_norm": _layer_norm,
    "global_avg_pool": _pool(ops.global_avg_pool),
    "global_max_pool": _pool(ops.global_max_pool),
    "avg_pool2x2": _pool(ops.avg_pool2x2),
    "se": _se,
    "mbconv": _mbconv(1, 4),
    "mbconv_stride2": _mbconv(2, 1),
    "lkec": _lkec,
    "cbam": _cbam,
    "mc_ega": _mcega,
    "double_conv": _double_conv,
    "dice_loss": _dice,
    "edunet_forward": _model,
}


def fault_identity(x: Tensor, scale: float = 1.01) -> Tensor:
    """Identity forward whose backward deliberately scales the cotangent."""
    return Tensor.from_op(x.data, (x,), lambda g: (g * scale,), "fault_identity")


def run_check(
    name: str,
    seed: int = 0,
    dtype=np.float64,
    tol: Optional[float] = None,
    inject_fault: bool = False,
) -> GradCheckReport:
    if name not in REGISTRY:
        raise KeyError(f"unknown gradcheck case {name!r}")
    dtype = np.dtype(dtype).type
    if tol is None:
        tol = 1e-5 if dtype == np.float64 else 1e-3
    case = REGISTRY[name](np.random.default_rng([seed, len(name)]), dtype)
    fn = case.fn
    if inject_fault:
        base = fn
        fn = lambda first, *rest: base(fault_identity(first), *rest)  # noqa: E731
    # lower-precision backward passes are judged against float64 differences
    reference = np.float64 if dtype != np.float64 else None
    return grad_check(
        fn,
        case.inputs,
        tol=tol,
        names=case.names,
        groups=case.groups,
        max_entries=case.max_entries,
        seed=seed,
        reference_dtype=reference,
    )
