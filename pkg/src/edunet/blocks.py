"""Composite blocks built from :mod:`edunet.ops`.

Each block is a pair: an ``init_*`` function that registers parameters in a
:class:`ParamStore` scope, and a forward function taking ``(x, params, ...)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import ops
from .params import ParamStore, bias_or_none, init_conv, init_linear, init_norm
from .tensor import Tensor


@dataclass(frozen=True)
class BlockConfig:
    in_channels: int
    out_channels: int
    kernel: int = 3
    expand_ratio: int = 1
    stride: int = 1
    se_ratio: float = 0.25
    drop_path_prob: float = 0.0
    layer_scale_init: float = 1e-6

    def __post_init__(self):
        if self.kernel not in (3, 5, 7):
            raise ValueError(f"kernel must be 3, 5 or 7, got {self.kernel}")
        if self.expand_ratio < 1:
            raise ValueError(f"expand_ratio must be >= 1, got {self.expand_ratio}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if not 0.0 <= self.drop_path_prob < 1.0:
            raise ValueError(f"drop_path_prob must be in [0, 1), got {self.drop_path_prob}")

    @property
    def hidden_channels(self) -> int:
        return self.in_channels * self.expand_ratio

    @property
    def se_channels(self) -> int:
        return max(1, int(round(self.in_channels * self.se_ratio)))

    @property
    def residual(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


def same_padding(h: int, w: int, k: int, stride: int) -> Tuple[int, int, int, int]:
    """TF-style 'same' padding: output extent ceil(size / stride)."""

    def one(n):
        total = max((-(-n // stride) - 1) * stride + k - n, 0)
        return total // 2, total - total // 2

    return one(h) + one(w)


# -- thin wrappers over params --------------------------------------------------


def conv(x: Tensor, p: ParamStore, name: str, stride: int = 1, padding=0, groups: int = 1) -> Tensor:
    return ops.conv2d(x, p[f"{name}.weight"], bias_or_none(p, name), stride=stride, padding=padding, groups=groups)


def bn(x: Tensor, p: ParamStore, name: str, training: bool) -> Tensor:
    s = p.scope(name)
    return ops.batch_norm(
        x, s["gamma"], s["beta"], s.buffer("running_mean"), s.buffer("running_var"), training=training
    )


def ln(x: Tensor, p: ParamStore, name: str) -> Tensor:
    s = p.scope(name)
    return ops.layer_norm(x, s["gamma"], s["beta"])


def dense(x: Tensor, p: ParamStore, name: str) -> Tensor:
    return ops.linear(x, p[f"{name}.weight"], bias_or_none(p, name))


# -- DropPath -------------------------------------------------------------------


def drop_path(x: Tensor, prob: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Stochastic depth: zero whole samples with probability ``prob``, rescale the rest."""
    if not training or prob <= 0.0:
        return x
    if prob >= 1.0:
        return ops.mul(x, np.zeros((x.shape[0],) + (1,) * (x.ndim - 1), dtype=x.dtype))
    if rng is None:
        raise ValueError("drop_path in training mode needs an rng")
    keep = (rng.random(x.shape[0]) < 1.0 - prob).astype(x.dtype) / (1.0 - prob)
    return ops.mul(x, keep.reshape((x.shape[0],) + (1,) * (x.ndim - 1)))


# -- squeeze-and-excitation -----------------------------------------------------


def init_se(store: ParamStore, channels: int, reduced: int, rng) -> None:
    init_linear(store, "fc1", channels, reduced, rng)
    init_linear(store, "fc2", reduced, channels, rng)


def se_block(x: Tensor, p: ParamStore) -> Tensor:
    n, c = x.shape[:2]
    if p["fc1.weight"].shape[1] != c:
        raise ValueError(f"SE expects {p['fc1.weight'].shape[1]} channels, got {c}")
    s = ops.reshape(ops.global_avg_pool(x), (n, c))
    s = ops.swish(dense(s, p, "fc1"))
    gate = ops.sigmoid(dense(s, p, "fc2"))
    return x * ops.reshape(gate, (n, c, 1, 1))


# -- MBConv ----------------------------------------------------------------------


def init_mbconv(store: ParamStore, cfg: BlockConfig, rng) -> None:
    hid = cfg.hidden_channels
    if cfg.expand_ratio != 1:
        init_conv(store, "expand", cfg.in_channels, hid, 1, rng, bias=False)
        init_norm(store, "expand_bn", hid, running=True)
    init_conv(store, "dw", hid, hid, cfg.kernel, rng, groups=hid, bias=False)
    init_norm(store, "dw_bn", hid, running=True)
    init_se(store.scope("se"), hid, cfg.se_channels, rng)
    init_conv(store, "project", hid, cfg.out_channels, 1, rng, bias=False)
    init_norm(store, "project_bn", cfg.out_channels, running=True)


def mbconv(
    x: Tensor,
    cfg: BlockConfig,
    p: ParamStore,
    training: bool,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Mobile inverted bottleneck: expand, depthwise, SE, project, residual."""
    if x.shape[1] != cfg.in_channels:
        raise ValueError(f"mbconv expects {cfg.in_channels} channels, got {x.shape[1]}")
    has_expand = "expand.weight" in p
    if has_expand != (cfg.expand_ratio != 1) or p["dw.weight"].shape[0] != cfg.hidden_channels:
        raise ValueError("mbconv config is inconsistent with its parameters")
    h = x
    if has_expand:
        h = ops.swish(bn(conv(h, p, "expand"), p, "expand_bn", training))
    if cfg.stride == 1:
        pad = cfg.kernel // 2
    else:
        pad = same_padding(h.shape[2], h.shape[3], cfg.kernel, cfg.stride)
    h = conv(h, p, "dw", stride=cfg.stride, padding=pad, groups=cfg.hidden_channels)
    h = ops.swish(bn(h, p, "dw_bn", training))
    h = se_block(h, p.scope("se"))
    h = bn(conv(h, p, "project"), p, "project_bn", training)
    if cfg.residual:
        return x + drop_path(h, cfg.drop_path_prob, training, rng)
    return h


# -- large-kernel efficient convolution (LKEC) ----------------------------------


def init_lkec(store: ParamStore, channels: int, rng, layer_scale_init: float = 1e-6, expansion: int = 4) -> None:
    init_conv(store, "dw", channels, channels, 7, rng, groups=channels)
    init_norm(store, "ln", channels)
    init_conv(store, "pw1", channels, expansion * channels, 1, rng)
    init_conv(store, "pw2", expansion * channels, channels, 1, rng)
    store.add("layer_scale", np.full(channels, layer_scale_init, dtype=np.float32))


def lkec_block(
    x: Tensor,
    p: ParamStore,
    training: bool,
    rng: Optional[np.random.Generator] = None,
    drop_prob: float = 0.0,
) -> Tensor:
    """x + DropPath(scale * pw2(GELU(pw1(LN(dw7x7(x))))))."""
    c = x.shape[1]
    if p["dw.weight"].shape[0] != c:
        raise ValueError(f"LKEC block expects {p['dw.weight'].shape[0]} channels, got {c}")
    h = conv(x, p, "dw", padding=3, groups=c)
    h = ln(h, p, "ln")
    h = ops.gelu(conv(h, p, "pw1"))
    h = conv(h, p, "pw2")
    h = h * ops.reshape(p["layer_scale"], (1, c, 1, 1))
    return x + drop_path(h, drop_prob, training, rng)


# -- CBAM ------------------------------------------------------------------------


def init_cbam(store: ParamStore, channels: int, rng, reduction: int = 16, spatial_kernel: int = 7) -> None:
    hidden = max(1, channels // reduction)
    init_linear(store, "mlp1", channels, hidden, rng)
    init_linear(store, "mlp2", hidden, channels, rng)
    init_conv(store, "spatial", 2, 1, spatial_kernel, rng)


def cbam(x: Tensor, p: ParamStore) -> Tensor:
    """Channel attention from pooled descriptors, then spatial attention."""
    n, c = x.shape[:2]
    if p["mlp1.weight"].shape[1] != c:
        raise ValueError(f"CBAM expects {p['mlp1.weight'].shape[1]} channels, got {c}")

    def mlp(v):
        return dense(ops.relu(dense(ops.reshape(v, (n, c)), p, "mlp1")), p, "mlp2")

    chan = ops.sigmoid(mlp(ops.global_avg_pool(x)) + mlp(ops.global_max_pool(x)))
    x1 = x * ops.reshape(chan, (n, c, 1, 1))
    desc = ops.concat([ops.mean(x1, axis=1, keepdims=True), ops.amax(x1, axis=1, keepdims=True)], axis=1)
    k = p["spatial.weight"].shape[-1]
    spatial = ops.sigmoid(conv(desc, p, "spatial", padding=k // 2))
    return x1 * spatial


# -- double conv -----------------------------------------------------------------


def init_double_conv(store: ParamStore, cin: int, cout: int, rng) -> None:
    init_conv(store, "conv1", cin, cout, 3, rng, bias=False)
    init_norm(store, "bn1", cout, running=True)
    init_conv(store, "conv2", cout, cout, 3, rng, bias=False)
    init_norm(store, "bn2", cout, running=True)


def conv_bn_relu(x: Tensor, p: ParamStore, conv_name: str, bn_name: str, training: bool) -> Tensor:
    return ops.relu(bn(conv(x, p, conv_name, padding=1), p, bn_name, training))


def double_conv(x: Tensor, p: ParamStore, training: bool) -> Tensor:
    x = conv_bn_relu(x, p, "conv1", "bn1", training)
    return conv_bn_relu(x, p, "conv2", "bn2", training)
