"""Dual-branch edge-guided encoder-decoder.

Local branch: EfficientNet-style MBConv encoder with a transposed-conv
decoder. Global branch: large-kernel (LKEC) encoder whose decoder is guided
at every scale by multi-category edge attention (MC-EGA). The two branch
softmax maps are averaged for inference.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import blocks, ops
from .blocks import BlockConfig
from .params import ParamStore, init_conv, init_conv_transpose, init_norm
from .pyramid import HighFreqPyramid, build_pyramid, edge_attention
from .tensor import Tensor

# (expand, kernel, channels, repeats, stride) per MBConv stage, EfficientNet-B0.
B0_STAGES: Tuple[Tuple[int, int, int, int, int], ...] = (
    (1, 3, 16, 1, 1),
    (6, 3, 24, 2, 2),
    (6, 5, 40, 2, 2),
    (6, 3, 80, 3, 2),
    (6, 5, 112, 3, 1),
    (6, 5, 192, 4, 2),
    (6, 3, 320, 1, 1),
)
B0_STEM_CHANNELS = 32

_PROFILE_DEFAULTS = {
    "tiny": dict(
        global_channels=(24, 48, 96, 192),
        lkec_blocks=(1, 1, 1, 1),
        local_decoder_channels=(32, 24, 16, 16),
        drop_path_rate=0.0,
    ),
    "b0": dict(
        global_channels=(96, 192, 384, 768),
        lkec_blocks=(3, 3, 9, 3),
        local_decoder_channels=(128, 64, 48, 32, 16),
        drop_path_rate=0.1,
    ),
}


@dataclass
class EDUNetConfig:
    num_classes: int = 3
    input_size: Tuple[int, int] = (64, 64)
    profile: str = "tiny"
    global_channels: Optional[Tuple[int, ...]] = None
    lkec_blocks: Optional[Tuple[int, ...]] = None
    local_decoder_channels: Optional[Tuple[int, ...]] = None
    stem_kernel: int = 4
    stem_stride: int = 2
    fg_attention_mode: str = "mean"
    use_global: bool = True
    use_local: bool = True
    use_mcega: bool = True
    fusion_mode: str = "avg_prob"
    drop_path_rate: Optional[float] = None
    layer_scale_init: float = 1e-6
    blur_sigma: float = 1.0
    blur_ksize: int = 5

    def __post_init__(self):
        if self.profile not in _PROFILE_DEFAULTS:
            raise ValueError(f"unknown profile {self.profile!r}")
        for key, value in _PROFILE_DEFAULTS[self.profile].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        self.input_size = tuple(int(v) for v in self.input_size)
        self.global_channels = tuple(int(v) for v in self.global_channels)
        self.lkec_blocks = tuple(int(v) for v in self.lkec_blocks)
        self.local_decoder_channels = tuple(int(v) for v in self.local_decoder_channels)
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2 (background + at least one lesion class)")
        if not (self.use_global or self.use_local):
            raise ValueError("at least one branch must be enabled")
        if len(self.global_channels) != len(self.lkec_blocks):
            raise ValueError("global_channels and lkec_blocks must have one entry per stage")
        if self.stem_stride not in (2, 4) or (self.stem_kernel - self.stem_stride) % 2:
            raise ValueError(f"unsupported stem kernel/stride {self.stem_kernel}/{self.stem_stride}")
        if self.fg_attention_mode not in ("mean", "one_minus_bg"):
            raise ValueError(f"unknown fg_attention_mode {self.fg_attention_mode!r}")
        if self.fusion_mode != "avg_prob":
            raise ValueError(f"unknown fusion_mode {self.fusion_mode!r}")
        if len(self.local_decoder_channels) != len(self.local_strides_to_skips()):
            raise ValueError("local_decoder_channels needs one entry per local skip level")

    @property
    def num_stages(self) -> int:
        return len(self.global_channels)

    def local_stages(self) -> List[Tuple[int, int, int, int, int]]:
        if self.profile == "b0":
            return list(B0_STAGES)
        stages = []
        for idx, (e, k, c, _, s) in enumerate(B0_STAGES):
            # the sixth stage keeps full resolution so the tiny encoder stops at /16
            stride = 1 if idx == 5 else s
            stages.append((e, k, max(1, c // 4), 1, stride))
        return stages

    @property
    def local_stem_channels(self) -> int:
        return B0_STEM_CHANNELS if self.profile == "b0" else B0_STEM_CHANNELS // 4

    def local_strides_to_skips(self) -> List[int]:
        """Downsampling factor of each skip tap: [2, 4, 8, 16(, 32)]."""
        n_down = 1 + sum(1 for st in self.local_stages() if st[4] == 2)
        return [2 ** (i + 1) for i in range(n_down)]

    @property
    def local_factor(self) -> int:
        return self.local_strides_to_skips()[-1]

    @property
    def global_factor(self) -> int:
        return self.stem_stride * 2 ** (self.num_stages - 1)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EDUNetConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown EDUNetConfig keys: {sorted(unknown)}")
        return cls(**d)


# -- parameter construction ------------------------------------------------------


def _local_block_configs(cfg: EDUNetConfig) -> List[BlockConfig]:
    out = []
    cin = cfg.local_stem_channels
    stages = cfg.local_stages()
    total = sum(r for *_, r, _ in stages)
    k = 0
    for e, ks, c, r, s in stages:
        for rep in range(r):
            dp = cfg.drop_path_rate * k / max(total - 1, 1)
            out.append(BlockConfig(cin, c, ks, e, s if rep == 0 else 1, 0.25, dp))
            cin = c
            k += 1
    return out


def _local_skip_channels(cfg: EDUNetConfig) -> List[int]:
    chans = []
    cur = cfg.local_stem_channels
    for bc in _local_block_configs(cfg):
        if bc.stride == 2:
            chans.append(cur)
        cur = bc.out_channels
    chans.append(cur)
    return chans


def _global_drop_rates(cfg: EDUNetConfig) -> List[List[float]]:
    total = sum(cfg.lkec_blocks)
    rates, k = [], 0
    for n in cfg.lkec_blocks:
        rates.append([cfg.drop_path_rate * (k + j) / max(total - 1, 1) for j in range(n)])
        k += n
    return rates


def init_params(cfg: EDUNetConfig, rng: np.random.Generator) -> ParamStore:
    """Create every parameter and buffer the active configuration uses."""
    store = ParamStore()
    if cfg.use_global:
        _init_global(store.scope("global"), cfg, rng)
    if cfg.use_local:
        _init_local(store.scope("local"), cfg, rng)
    return store


def _init_local(p: ParamStore, cfg: EDUNetConfig, rng) -> None:
    init_conv(p, "stem", 1, cfg.local_stem_channels, 3, rng, bias=False)
    init_norm(p, "stem_bn", cfg.local_stem_channels, running=True)
    for i, bc in enumerate(_local_block_configs(cfg)):
        blocks.init_mbconv(p.scope(f"block{i}"), bc, rng)
    skips = _local_skip_channels(cfg)
    dec = cfg.local_decoder_channels
    cur = skips[-1]
    # decoder levels run deep -> shallow; the last one reaches full resolution
    skip_in = list(reversed(skips[:-1])) + [1]
    for j, (cout, cskip) in enumerate(zip(dec, skip_in)):
        s = p.scope(f"dec{j}")
        init_conv_transpose(s, "up", cur, cout, 2, rng, bias=False)
        init_norm(s, "up_bn", cout, running=True)
        blocks.init_double_conv(s.scope("fuse"), cout + cskip, cout, rng)
        cur = cout
    init_conv(p, "head", cur, cfg.num_classes, 1, rng)


def _init_global(p: ParamStore, cfg: EDUNetConfig, rng) -> None:
    ch = cfg.global_channels
    init_conv(p, "stem", 1, ch[0], cfg.stem_kernel, rng)
    init_norm(p, "stem_ln", ch[0])
    for i, n in enumerate(cfg.lkec_blocks):
        s = p.scope(f"stage{i}")
        if i > 0:
            init_norm(s, "down_ln", ch[i - 1])
            init_conv(s, "down", ch[i - 1], ch[i], 2, rng)
        for j in range(n):
            blocks.init_lkec(s.scope(f"block{j}"), ch[i], rng, cfg.layer_scale_init)
    for i in reversed(range(cfg.num_stages)):
        d = p.scope(f"dec{i}")
        if cfg.use_mcega:
            init_coarse_head(d.scope("head"), ch[i], cfg.num_classes, rng)
            init_mc_ega(d.scope("mcega"), ch[i], rng)
        cout = ch[i - 1] if i > 0 else ch[0]
        init_conv(d, "up_conv", 2 * ch[i], cout, 3, rng, bias=False)
        init_norm(d, "up_bn", cout, running=True)
    init_conv(p, "final", ch[0], cfg.num_classes, 1, rng)


def init_coarse_head(p: ParamStore, channels: int, num_classes: int, rng) -> None:
    init_conv(p, "conv1", channels, channels, 3, rng)
    init_conv(p, "conv2", channels, num_classes, 1, rng)


def init_mc_ega(p: ParamStore, channels: int, rng) -> None:
    init_conv(p, "fuse_mask", 3 * channels, channels, 3, rng)
    init_conv(p, "fuse_value", 3 * channels, channels, 1, rng)
    blocks.init_cbam(p.scope("cbam"), channels, rng)


# -- forward pieces ----------------------------------------------------------------


def _tap(taps: Optional[dict], name: str, t: Tensor) -> Tensor:
    if taps is not None:
        if t.requires_grad:
            t.retain_grad()
        taps[name] = t
    return t


def _check_input(image: Tensor, factor: int) -> None:
    if image.ndim != 4 or image.shape[1] != 1:
        raise ValueError(f"expected an (N, 1, H, W) image, got {image.shape}")
    h, w = image.shape[2:]
    if h % factor or w % factor:
        raise ValueError(f"input extents {(h, w)} must be divisible by {factor}")


def local_branch_forward(
    image: Tensor,
    params: ParamStore,
    cfg: EDUNetConfig,
    training: bool,
    rng: Optional[np.random.Generator] = None,
    taps: Optional[dict] = None,
) -> Tuple[Tensor, List[Tensor]]:
    """Return full-resolution local logits and the encoder skip features."""
    _check_input(image, cfg.local_factor)
    p = params.scope("local") if params.prefix != "local" else params
    h, w = image.shape[2:]
    x = blocks.conv(image, p, "stem", stride=2, padding=blocks.same_padding(h, w, 3, 2))
    x = ops.swish(blocks.bn(x, p, "stem_bn", training))
    skips: List[Tensor] = []
    for i, bc in enumerate(_local_block_configs(cfg)):
        if bc.stride == 2:
            skips.append(_tap(taps, f"local.skip{len(skips)}", x))
        x = blocks.mbconv(x, bc, p.scope(f"block{i}"), training, rng)
    skips.append(_tap(taps, f"local.skip{len(skips)}", x))

    skip_in = list(reversed(skips[:-1])) + [image]
    for j, skip in enumerate(skip_in):
        s = p.scope(f"dec{j}")
        x = ops.conv_transpose2d(x, s["up.weight"], None, stride=2)
        x = ops.relu(blocks.bn(x, s, "up_bn", training))
        x = blocks.double_conv(ops.concat([x, skip], axis=1), s.scope("fuse"), training)
        _tap(taps, f"local.dec{j}", x)
    return blocks.conv(x, p, "head"), skips


def global_encoder_forward(
    image: Tensor,
    params: ParamStore,
    cfg: EDUNetConfig,
    training: bool,
    rng: Optional[np.random.Generator] = None,
    taps: Optional[dict] = None,
) -> List[Tensor]:
    _check_input(image, cfg.global_factor)
    p = params.scope("global") if params.prefix != "global" else params
    pad = (cfg.stem_kernel - cfg.stem_stride) // 2
    x = blocks.conv(image, p, "stem", stride=cfg.stem_stride, padding=pad)
    x = blocks.ln(x, p, "stem_ln")
    rates = _global_drop_rates(cfg)
    feats = []
    for i, n in enumerate(cfg.lkec_blocks):
        s = p.scope(f"stage{i}")
        if i > 0:
            x = blocks.conv(blocks.ln(x, s, "down_ln"), s, "down", stride=2)
        for j in range(n):
            x = blocks.lkec_block(x, s.scope(f"block{j}"), training, rng, rates[i][j])
        feats.append(_tap(taps, f"global.stage{i}", x))
    return feats


def coarse_head(feature: Tensor, p: ParamStore) -> Tensor:
    """3x3 conv then 1x1 conv to class logits (no activation)."""
    return blocks.conv(blocks.conv(feature, p, "conv1", padding=1), p, "conv2")


@dataclass
class MCEGAInputs:
    f_e: Tensor
    f_hf: Tensor
    f_pred: Tensor


def attention_maps(f_pred: Tensor, h: int, w: int, fg_mode: str = "mean") -> Tuple[Tensor, Tensor]:
    """Background and foreground attention from coarse class logits."""
    prob = ops.softmax(ops.interpolate_bilinear(f_pred, h, w), axis=1)
    a_bg = prob[:, 0:1]
    if fg_mode == "mean":
        a_fg = ops.mean(prob[:, 1:], axis=1, keepdims=True)
    elif fg_mode == "one_minus_bg":
        a_fg = 1.0 - a_bg
    else:
        raise ValueError(f"unknown fg_attention_mode {fg_mode!r}")
    return a_bg, a_fg


def mc_ega(
    inputs: MCEGAInputs,
    p: ParamStore,
    num_classes: int,
    fg_mode: str = "mean",
    taps: Optional[dict] = None,
    tag: str = "mcega",
) -> Tensor:
    f_e, f_hf, f_pred = inputs.f_e, inputs.f_hf, inputs.f_pred
    if f_pred.shape[1] != num_classes:
        raise ValueError(f"coarse prediction has {f_pred.shape[1]} channels, expected {num_classes}")
    if f_hf.shape[1] != 1:
        raise ValueError(f"high-frequency level must have one channel, got {f_hf.shape[1]}")
    h, w = f_e.shape[2:]
    a_bg, a_fg = attention_maps(f_pred, h, w, fg_mode)
    a_edge = edge_attention(f_hf, h, w)
    if taps is not None:
        taps[f"{tag}.a_bg"], taps[f"{tag}.a_fg"], taps[f"{tag}.a_edge"] = a_bg, a_fg, a_edge
    x = ops.concat([f_e * a_bg, f_e * a_fg, f_e * a_edge], axis=1)
    mask = ops.sigmoid(blocks.conv(x, p, "fuse_mask", padding=1))
    f_a = f_e + mask * blocks.conv(x, p, "fuse_value")
    return blocks.cbam(f_a, p.scope("cbam"))


def global_decoder_forward(
    features: Sequence[Tensor],
    pyramid: HighFreqPyramid,
    params: ParamStore,
    cfg: EDUNetConfig,
    training: bool,
    out_size: Tuple[int, int],
    taps: Optional[dict] = None,
) -> Tensor:
    if len(features) != cfg.num_stages:
        raise ValueError(f"expected {cfg.num_stages} encoder features, got {len(features)}")
    if cfg.use_mcega and len(pyramid) != len(features):
        raise ValueError(f"pyramid has {len(pyramid)} levels but there are {len(features)} stages")
    p = params.scope("global") if params.prefix != "global" else params
    dtype = features[0].dtype
    d = features[-1]
    for i in reversed(range(cfg.num_stages)):
        s = p.scope(f"dec{i}")
        f_e = features[i]
        if cfg.use_mcega:
            pred = coarse_head(d, s.scope("head"))
            _tap(taps, f"global.coarse{i}", pred)
            e = mc_ega(
                MCEGAInputs(f_e, pyramid.level(i, dtype), pred),
                s.scope("mcega"),
                cfg.num_classes,
                cfg.fg_attention_mode,
                taps,
                f"global.mcega{i}",
            )
            _tap(taps, f"global.mcega{i}", e)
        else:
            e = f_e
        x = ops.concat([d, e], axis=1)
        x = ops.interpolate_bilinear(x, 2 * x.shape[2], 2 * x.shape[3])
        x = blocks.conv(x, s, "up_conv", padding=1)
        d = ops.gelu(blocks.bn(x, s, "up_bn", training))
        _tap(taps, f"global.dec{i}", d)
    d = ops.interpolate_bilinear(d, *out_size)
    return blocks.conv(d, p, "final")


def edunet_forward(
    image,
    params: ParamStore,
    cfg: EDUNetConfig,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    pyramid: Optional[HighFreqPyramid] = None,
    taps: Optional[dict] = None,
) -> Dict[str, Tensor]:
    """Run the enabled branches and fuse their class probabilities.

    Returns a dict with ``fused_prob`` and whichever of ``logits_global`` /
    ``logits_local`` are enabled. The edge pyramid is built from ``image``
    unless one is supplied.
    """
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image, dtype=np.float32))
    out: Dict[str, Tensor] = {}
    probs = []
    if cfg.use_global:
        if pyramid is None:
            pyramid = build_pyramid(image, cfg.num_stages, cfg.blur_sigma, cfg.blur_ksize)
        feats = global_encoder_forward(image, params, cfg, training, rng, taps)
        logits = global_decoder_forward(feats, pyramid, params, cfg, training, image.shape[2:], taps)
        out["logits_global"] = logits
        probs.append(ops.softmax(logits, axis=1))
    if cfg.use_local:
        logits, _ = local_branch_forward(image, params, cfg, training, rng, taps)
        out["logits_local"] = logits
        probs.append(ops.softmax(logits, axis=1))
    fused = probs[0]
    for q in probs[1:]:
        fused = fused + q
    out["fused_prob"] = fused * (1.0 / len(probs)) if len(probs) > 1 else fused
    return out


def predict_mask(fused_prob: Tensor) -> np.ndarray:
    return np.argmax(fused_prob.data, axis=1).astype(np.uint8)


def layer_names(cfg: EDUNetConfig) -> List[str]:
    """Names accepted by Grad-CAM (taps recorded during forward)."""
    names = []
    if cfg.use_global:
        names += [f"global.stage{i}" for i in range(cfg.num_stages)]
        if cfg.use_mcega:
            names += [f"global.mcega{i}" for i in range(cfg.num_stages)]
        names += [f"global.dec{i}" for i in range(cfg.num_stages)]
    if cfg.use_local:
        n = len(cfg.local_strides_to_skips())
        names += [f"local.skip{j}" for j in range(n)]
        names += [f"local.dec{j}" for j in range(n)]
    return names
