"""High-frequency (difference-of-Gaussians) pyramid used for edge attention."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

from . import ops
from .tensor import Tensor, no_grad


def gaussian_kernel1d(sigma: float, ksize: int) -> np.ndarray:
    if ksize < 1 or ksize % 2 == 0:
        raise ValueError(f"ksize must be a positive odd integer, got {ksize}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = ksize // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _blur_array(img: np.ndarray, sigma: float, ksize: int) -> np.ndarray:
    """Separable blur with reflect (mirror, edge not repeated) borders, in float64."""
    k = gaussian_kernel1d(sigma, ksize)
    r = ksize // 2
    x = img.astype(np.float64)
    x = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(r, r), (0, 0)], mode="reflect")
    h = img.shape[-2]
    x = sum(k[i] * x[..., i : i + h, :] for i in range(ksize))
    x = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(0, 0), (r, r)], mode="reflect")
    w = img.shape[-1]
    return sum(k[i] * x[..., :, i : i + w] for i in range(ksize))


def gaussian_blur(image, sigma: float = 1.0, ksize: int = 5) -> Tensor:
    """Gaussian blur of an (N, 1, H, W) image; result rounded to float32."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    return Tensor(_blur_array(data, sigma, ksize).astype(np.float32))


@dataclass
class HighFreqPyramid:
    """``levels[0] = I - G(I)``; ``levels[i] = avg2x2(levels[i-1])``.

    Levels are float64 so that ``blurred + levels[0]`` reproduces the float32
    input exactly (this holds whenever non-zero pixels are >= 2**-29, which
    covers every 8-bit image).
    """

    levels: List[Tensor]
    blurred: Tensor
    blur_sigma: float = 1.0
    blur_kernel_size: int = 5
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.levels)

    def level(self, i: int, dtype=np.float32) -> Tensor:
        key = (i, np.dtype(dtype).str)
        if key not in self._cache:
            self._cache[key] = Tensor(self.levels[i].data.astype(dtype))
        return self._cache[key]


def build_pyramid(image, num_levels: int, sigma: float = 1.0, ksize: int = 5) -> HighFreqPyramid:
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if num_levels < 1:
        raise ValueError(f"num_levels must be >= 1, got {num_levels}")
    if data.ndim != 4 or data.shape[1] != 1:
        raise ValueError(f"expected a single-channel (N, 1, H, W) image, got shape {data.shape}")
    if min(data.shape[-2:]) < 2 ** (num_levels - 1):
        raise ValueError(f"image {data.shape[-2:]} too small for {num_levels} pyramid levels")
    img = data.astype(np.float32)
    blurred = _blur_array(img, sigma, ksize).astype(np.float32)
    level0 = img.astype(np.float64) - blurred.astype(np.float64)
    levels = [Tensor(level0)]
    with no_grad():
        for _ in range(1, num_levels):
            levels.append(ops.avg_pool2x2(levels[-1]))
    return HighFreqPyramid(levels, Tensor(blurred), sigma, ksize)


def edge_attention(level: Tensor, h: int, w: int) -> Tensor:
    """Resize a pyramid level to an encoder feature's (H, W)."""
    return ops.interpolate_bilinear(level, h, w)
