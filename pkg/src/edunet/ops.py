"""Differentiable primitives over :class:`~edunet.tensor.Tensor`.

All image tensors are NCHW. Every op returns a new tensor and, when grad
recording is active, attaches a backward rule mapping the output cotangent
to one gradient per input.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from functools import lru_cache
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .tensor import Tensor

GELU_COEF = 0.044715
_SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))

Padding = Union[int, Tuple[int, int, int, int]]

_branches = threading.local()


@contextmanager
def record_branches():
    """Collect the branch decisions (ReLU masks, argmax indices) of non-smooth ops.

    Two forward passes with equal records evaluate the same smooth piece of
    a piecewise-smooth function.
    """
    prev = getattr(_branches, "log", None)
    log: list = []
    _branches.log = log
    try:
        yield log
    finally:
        _branches.log = prev


def _note_branch(arr: np.ndarray) -> None:
    log = getattr(_branches, "log", None)
    if log is not None:
        log.append(np.array(arr, copy=True))


def _wrap(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return Tensor.from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return Tensor.from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(out, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor.from_op(np.log(xd), (x,), lambda g: (g / xd,), "log")


# -- shape ops -----------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def getitem(x: Tensor, index) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(src_shape, dtype=dtype)
        out[index] = g
        return (out,)

    return Tensor.from_op(np.ascontiguousarray(x.data[index]), (x,), backward, "getitem")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    xs = list(xs)
    if not xs:
        raise ValueError("concat needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in xs], axis=axis), xs, backward, "concat")


# -- reductions ----------------------------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor.from_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([src[a] for a in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src).copy(),)

    return Tensor.from_op(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), backward, "mean")


def amax(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximiser."""
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    _note_branch(idx)
    out = np.take_along_axis(x.data, idx, axis=axis)
    src, dtype = x.shape, x.dtype

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(src, dtype=dtype)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    return Tensor.from_op(out if keepdims else np.squeeze(out, axis), (x,), backward, "amax")


# -- activations ---------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_branch(mask)
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def swish(x: Tensor) -> Tensor:
    xd = x.data
    s = 0.5 * (1.0 + np.tanh(0.5 * xd))

    def backward(g):
        return (g * (s * (1.0 + xd * (1.0 - s))),)

    return Tensor.from_op(xd * s, (x,), backward, "swish")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation with cubic coefficient 0.044715."""
    xd = x.data
    inner = _SQRT_2_OVER_PI * (xd + GELU_COEF * xd**3)
    t = np.tanh(inner)

    def backward(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return Tensor.from_op(0.5 * xd * (1.0 + t), (x,), backward, "gelu")


_ACTIVATIONS = {"relu": relu, "gelu": gelu, "swish": swish, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward, "softmax")


# -- linear / conv -------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (N, Cin)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(out, parents, backward, "linear")


def _norm_padding(padding: Padding) -> Tuple[int, int, int, int]:
    if isinstance(padding, (int, np.integer)):
        p = int(padding)
        pads = (p, p, p, p)
    else:
        pads = tuple(int(v) for v in padding)
        if len(pads) != 4:
            raise ValueError(f"padding must be an int or (top, bottom, left, right), got {padding!r}")
    if min(pads) < 0:
        raise ValueError(f"padding must be non-negative, got {padding!r}")
    return pads


def conv_output_extent(size: int, kernel: int, stride: int, pad_lo: int, pad_hi: int) -> int:
    span = size + pad_lo + pad_hi - kernel
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if span < 0 or span % stride:
        raise ValueError(
            f"conv extent ({size} + {pad_lo} + {pad_hi} - {kernel}) / {stride} is not a non-negative integer"
        )
    return span // stride + 1


def _pad_nchw(x: np.ndarray, pads) -> np.ndarray:
    pt, pb, pl, pr = pads
    if not (pt or pb or pl or pr):
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))


def _window(xp: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    return xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]


# im2col is used when the column buffer stays below this many elements;
# larger problems fall back to per-offset accumulation.
_IM2COL_LIMIT = 1 << 24


def _dense_forward(xp, w, stride, ho, wo):
    n, ci = xp.shape[:2]
    co, _, kh, kw = w.shape
    hw = ho * wo
    if kh == 1 and kw == 1 and stride == 1:
        return w.reshape(co, ci) @ xp.reshape(n, ci, hw)
    if n * ci * kh * kw * hw <= _IM2COL_LIMIT:
        cols = np.empty((n, ci, kh, kw, ho, wo), dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = _window(xp, i, j, stride, ho, wo)
        return w.reshape(co, -1) @ cols.reshape(n, ci * kh * kw, hw)
    out = np.zeros((n, co, hw), dtype=xp.dtype)
    # contiguous operands keep matmul on the BLAS path
    wt = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
    for i in range(kh):
        for j in range(kw):
            xs = np.ascontiguousarray(_window(xp, i, j, stride, ho, wo)).reshape(n, ci, hw)
            out += wt[i, j] @ xs
    return out


def _dense_grad_input(g, w, xp_shape, stride, ho, wo):
    n = g.shape[0]
    co, ci, kh, kw = w.shape
    g3 = g.reshape(n, co, ho * wo)
    dxp = np.zeros(xp_shape, dtype=g.dtype)
    if kh == 1 and kw == 1 and stride == 1:
        return (w.reshape(co, ci).T @ g3).reshape(xp_shape)
    wt = w.reshape(co, ci * kh * kw).T
    dcols = (wt @ g3).reshape(n, ci, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            _window(dxp, i, j, stride, ho, wo)[...] += dcols[:, :, i, j]
    return dxp


def _dense_grad_weight(g, xp, w_shape, stride, ho, wo):
    n, ci = xp.shape[:2]
    co, _, kh, kw = w_shape
    g2 = g.reshape(n, co, ho * wo).transpose(1, 0, 2).reshape(co, n * ho * wo)
    if kh == 1 and kw == 1 and stride == 1:
        x2 = xp.reshape(n, ci, -1).transpose(1, 0, 2).reshape(ci, -1)
        return (g2 @ x2.T).reshape(w_shape)
    dw = np.empty(w_shape, dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = _window(xp, i, j, stride, ho, wo).transpose(1, 0, 2, 3).reshape(ci, -1)
            dw[:, :, i, j] = g2 @ xs.T
    return dw


def _depthwise_forward(xp, w, stride, ho, wo):
    n, c = xp.shape[:2]
    kh, kw = w.shape[2:]
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            out += _window(xp, i, j, stride, ho, wo) * w[:, 0, i, j][None, :, None, None]
    return out


def _depthwise_grad_input(g, w, xp_shape, stride, ho, wo):
    kh, kw = w.shape[2:]
    dxp = np.zeros(xp_shape, dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            _window(dxp, i, j, stride, ho, wo)[...] += g * w[:, 0, i, j][None, :, None, None]
    return dxp


def _depthwise_grad_weight(g, xp, w_shape, stride, ho, wo):
    kh, kw = w_shape[2:]
    dw = np.empty(w_shape, dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, _window(xp, i, j, stride, ho, wo))
    return dw


def _crop(xp, pads):
    pt, pb, pl, pr = pads
    h, w = xp.shape[2:]
    return xp[:, :, pt : h - pb, pl : w - pr]


def _grouped(fn_x_w, groups, x_axis_split, w_split, out_axis=1):
    parts = [fn_x_w(xg, wg) for xg, wg in zip(x_axis_split, w_split)]
    return np.concatenate(parts, axis=out_axis)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: Padding = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``padding`` is an int or a ``(top, bottom, left, right)`` tuple. The
    output extent must come out integral; there is no implicit flooring.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, ci, h, w_ = x.shape
    co, cig, kh, kw = weight.shape
    if groups < 1 or ci % groups or co % groups:
        raise ValueError(f"channels ({ci} in, {co} out) not divisible by groups={groups}")
    if cig != ci // groups:
        raise ValueError(f"weight expects {cig * groups} input channels, got {ci}")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"bias shape {bias.shape} != ({co},)")
    pads = _norm_padding(padding)
    ho = conv_output_extent(h, kh, stride, pads[0], pads[1])
    wo = conv_output_extent(w_, kw, stride, pads[2], pads[3])
    xp = _pad_nchw(x.data, pads)
    wd = weight.data
    depthwise = groups == ci and co == ci and cig == 1

    if groups == 1:
        out = _dense_forward(xp, wd, stride, ho, wo).reshape(n, co, ho, wo)
    elif depthwise:
        out = _depthwise_forward(xp, wd, stride, ho, wo)
    else:
        xs = np.split(xp, groups, axis=1)
        ws = np.split(wd, groups, axis=0)
        out = _grouped(
            lambda a, b: _dense_forward(a, b, stride, ho, wo).reshape(n, -1, ho, wo), groups, xs, ws
        )
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = gw = gb = None
        if groups == 1:
            if x.requires_grad:
                gx = _crop(_dense_grad_input(g, wd, xp.shape, stride, ho, wo), pads)
            if weight.requires_grad:
                gw = _dense_grad_weight(g, xp, wd.shape, stride, ho, wo)
        elif depthwise:
            if x.requires_grad:
                gx = _crop(_depthwise_grad_input(g, wd, xp.shape, stride, ho, wo), pads)
            if weight.requires_grad:
                gw = _depthwise_grad_weight(g, xp, wd.shape, stride, ho, wo)
        else:
            gs = np.split(g, groups, axis=1)
            xs_ = np.split(xp, groups, axis=1)
            ws_ = np.split(wd, groups, axis=0)
            if x.requires_grad:
                gx = _crop(
                    np.concatenate(
                        [_dense_grad_input(gg, ww, xx.shape, stride, ho, wo) for gg, ww, xx in zip(gs, ws_, xs_)],
                        axis=1,
                    ),
                    pads,
                )
            if weight.requires_grad:
                gw = np.concatenate(
                    [_dense_grad_weight(gg, xx, ww.shape, stride, ho, wo) for gg, ww, xx in zip(gs, ws_, xs_)],
                    axis=0,
                )
        if bias is not None:
            gb = g.sum(axis=(0, 2, 3))
            return gx, gw, gb
        return gx, gw

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(out, parents, backward, "conv2d")


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 2,
    padding: Padding = 0,
) -> Tensor:
    """Transposed convolution; weight layout is (Cin, Cout, kH, kW).

    Implemented as the input-adjoint of :func:`conv2d`, so its own input
    gradient is a plain forward convolution of the cotangent.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv_transpose2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, ci, h, w_ = x.shape
    wci, co, kh, kw = weight.shape
    if wci != ci:
        raise ValueError(f"weight expects {wci} input channels, got {ci}")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"bias shape {bias.shape} != ({co},)")
    pads = _norm_padding(padding)
    hout = (h - 1) * stride + kh - pads[0] - pads[1]
    wout = (w_ - 1) * stride + kw - pads[2] - pads[3]
    if hout < 1 or wout < 1:
        raise ValueError("conv_transpose2d output would be empty")
    xd, wd = np.ascontiguousarray(x.data), weight.data
    padded_shape = (n, co, hout + pads[0] + pads[1], wout + pads[2] + pads[3])
    out = _crop(_dense_grad_input(xd, wd, padded_shape, stride, h, w_), pads)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gp = _pad_nchw(np.ascontiguousarray(g), pads)
        gx = _dense_forward(gp, wd, stride, h, w_).reshape(n, ci, h, w_) if x.requires_grad else None
        gw = _dense_grad_weight(xd, gp, wd.shape, stride, h, w_) if weight.requires_grad else None
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(out, parents, backward, "conv_transpose2d")


def conv2d_reference(x: np.ndarray, w: np.ndarray, b=None, stride=1, padding: Padding = 0, groups=1) -> np.ndarray:
    """Direct loop convolution. Slow; used as the oracle for :func:`conv2d`."""
    pads = _norm_padding(padding)
    n, ci, h, wd = x.shape
    co, cig, kh, kw = w.shape
    ho = conv_output_extent(h, kh, stride, pads[0], pads[1])
    wo = conv_output_extent(wd, kw, stride, pads[2], pads[3])
    xp = _pad_nchw(x, pads)
    cog = co // groups
    out = np.zeros((n, co, ho, wo), dtype=x.dtype)
    for b_ in range(n):
        for o in range(co):
            grp = o // cog
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for c in range(cig):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[b_, grp * cig + c, y * stride + i, xx * stride + j] * w[o, c, i, j]
                    out[b_, o, y, xx] = acc
    if b is not None:
        out += b[None, :, None, None]
    return out


# -- resampling ----------------------------------------------------------------


@lru_cache(maxsize=256)
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, half-pixel centres, edge clamped."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for d in range(n_out):
        src = max((d + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[d, i0] += 1.0 - lam
        m[d, i1] += lam
    m.setflags(write=False)
    return m


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    return _bilinear_matrix(int(n_in), int(n_out)).astype(dtype, copy=False)


def interpolate_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with align_corners=False semantics."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got ({out_h}, {out_w})")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    mh = bilinear_matrix(h, out_h, x.dtype)
    mw = bilinear_matrix(w, out_w, x.dtype)
    out = mh @ x.data @ mw.T

    def backward(g):
        return (mh.T @ g @ mw,)

    return Tensor.from_op(out, (x,), backward, "interpolate_bilinear")


# -- normalisation -------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
    training: bool = True,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel normalisation over (N, H, W).

    In training mode the running buffers (if given) are updated in place
    with the unbiased batch variance, matching the usual convention.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    xd = x.data
    shape = (1, c, 1, 1)
    if training or running_mean is None:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if training and running_mean is not None:
            m = xd.size // c
            unbiased = var * (m / (m - 1)) if m > 1 else var
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
        batch_stats = True
    else:
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
        batch_stats = False
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(shape)) * inv.reshape(shape)
    gd = gamma.data.reshape(shape)
    out = xhat * gd + beta.data.reshape(shape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        if batch_stats:
            m = xd.size // c
            sdx = dxhat.sum(axis=(0, 2, 3)).reshape(shape)
            sdxx = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
            dx = (inv.reshape(shape) / m) * (m * dxhat - sdx - xhat * sdxx)
        else:
            dx = dxhat * inv.reshape(shape)
        return dx, dgamma, dbeta

    return Tensor.from_op(out, (x, gamma, beta), backward, "batch_norm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the channel axis independently at each (n, h, w)."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layer_norm: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    xd = x.data
    bshape = (1, c) + (1,) * (x.ndim - 2)
    mu = xd.mean(axis=1, keepdims=True)
    var = xd.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)
    red = tuple(a for a in range(x.ndim) if a != 1)

    def backward(g):
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        dxhat = g * gd
        dx = (inv / c) * (c * dxhat - dxhat.sum(axis=1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        return dx, dgamma, dbeta

    return Tensor.from_op(out, (x, gamma, beta), backward, "layer_norm")


# -- pooling -------------------------------------------------------------------


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3), keepdims=True)


def global_max_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return reshape(amax(reshape(x, (n, c, h * w)), axis=2, keepdims=True), (n, c, 1, 1))


def avg_pool2x2(x: Tensor) -> Tensor:
    """2x2 average pooling, ceil mode; partial edge windows average their valid cells."""
    n, c, h, w = x.shape
    ho, wo = -(-h // 2), -(-w // 2)
    xp = np.zeros((n, c, 2 * ho, 2 * wo), dtype=x.dtype)
    xp[:, :, :h, :w] = x.data
    ones = np.zeros((2 * ho, 2 * wo), dtype=x.dtype)
    ones[:h, :w] = 1
    count = ones.reshape(ho, 2, wo, 2).sum(axis=(1, 3))
    out = xp.reshape(n, c, ho, 2, wo, 2).sum(axis=(3, 5)) / count

    def backward(g):
        gg = g / count
        full = np.repeat(np.repeat(gg, 2, axis=2), 2, axis=3)
        return (np.ascontiguousarray(full[:, :, :h, :w]),)

    return Tensor.from_op(out, (x,), backward, "avg_pool2x2")


_POOLS = {"global_avg": global_avg_pool, "global_max": global_max_pool, "avg2x2": avg_pool2x2}


def pool(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _POOLS[kind]
    except KeyError:
        raise ValueError(f"unknown pool kind {kind!r}") from None
    return fn(x)
