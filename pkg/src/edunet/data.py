"""Dataset I/O, preprocessing, augmentation, fold splitting and synthetic data."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .ops import bilinear_matrix

LABEL_NAMES = {0: "background", 1: "IRF", 2: "SRF", 3: "PED"}
# red IRF, green SRF, blue PED
MASK_PALETTE = [0, 0, 0, 255, 0, 0, 0, 255, 0, 0, 0, 255] + [0, 0, 0] * 252


class DataError(ValueError):
    """Unreadable or inconsistent dataset content."""


@dataclass
class Sample:
    id: str
    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.image.ndim != 2 or self.image.shape != self.mask.shape:
            raise DataError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} must be equal 2-D extents")
        if not np.all(np.isfinite(self.image)):
            raise DataError(f"{self.id}: image contains non-finite values")

    def validate(self, num_classes: int) -> "Sample":
        if self.mask.size and int(self.mask.max()) >= num_classes:
            raise DataError(f"{self.id}: mask label {int(self.mask.max())} >= num_classes {num_classes}")
        return self


# -- file I/O ---------------------------------------------------------------------


def _read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                im = im.convert("L")
            return np.array(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def load_sample(image_path, mask_path, num_classes: Optional[int] = None, sample_id: Optional[str] = None) -> Sample:
    """Load an 8-bit grayscale image (scaled by 1/255) and an 8-bit label mask."""
    img = _read_png(image_path)
    mask = _read_png(mask_path)
    if img.shape != mask.shape:
        raise DataError(f"size mismatch: {image_path} {img.shape} vs {mask_path} {mask.shape}")
    sid = sample_id if sample_id is not None else Path(image_path).stem
    s = Sample(sid, img.astype(np.float32) / np.float32(255.0), mask.astype(np.uint8))
    if num_classes is not None:
        s.validate(num_classes)
    return s


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_mask_png(mask: np.ndarray, path) -> None:
    im = Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="P")
    im.putpalette(MASK_PALETTE)
    im.save(path)


def save_sample(sample: Sample, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    Image.fromarray(image_to_uint8(sample.image), mode="L").save(root / "images" / f"{sample.id}.png")
    save_mask_png(sample.mask, root / "masks" / f"{sample.id}.png")


def load_dataset(root, num_classes: Optional[int] = None) -> List[Sample]:
    """Read ``root/images/<id>.png`` + ``root/masks/<id>.png`` pairs, sorted by id."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DataError(f"{root} must contain images/ and masks/ directories")
    out = []
    for img_path in sorted(img_dir.glob("*.png")):
        mask_path = mask_dir / img_path.name
        if not mask_path.exists():
            raise DataError(f"missing mask for {img_path.name}")
        out.append(load_sample(img_path, mask_path, num_classes))
    return out


def read_manifest(path) -> Dict[str, str]:
    """Parse an ``id,split`` CSV (header optional)."""
    out: Dict[str, str] = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            if len(row) != 2:
                raise DataError(f"manifest rows must be 'id,split', got {row!r}")
            sid, split = row[0].strip(), row[1].strip()
            if (sid, split) == ("id", "split"):
                continue
            out[sid] = split
    return out


# -- geometry -----------------------------------------------------------------------


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    res = bilinear_matrix(h, out_h) @ image.astype(np.float64) @ bilinear_matrix(w, out_w).T
    return res.astype(image.dtype)


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape
    rows = np.minimum(np.floor((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    cols = np.minimum(np.floor((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return mask[rows[:, None], cols[None, :]]


def center_crop_offset(h: int, w: int) -> Tuple[int, int]:
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2


def center_crop_resize(sample: Sample, target: Tuple[int, int] = (512, 512)) -> Sample:
    """Crop the centred min(H, W) square, then resize (bilinear image, nearest mask)."""
    h, w = sample.image.shape
    if h < 1 or w < 1 or target[0] < 1 or target[1] < 1:
        raise DataError(f"{sample.id}: degenerate extents {sample.image.shape} -> {target}")
    side = min(h, w)
    oy, ox = center_crop_offset(h, w)
    img = sample.image[oy : oy + side, ox : ox + side]
    mask = sample.mask[oy : oy + side, ox : ox + side]
    return Sample(sample.id, resize_bilinear(img, *target), resize_nearest(mask, *target))


# -- augmentation --------------------------------------------------------------------


@dataclass
class AugmentConfig:
    hflip_prob: float = 0.5
    rotate_prob: float = 0.5
    rotate_max_deg: float = 15.0
    brightness_prob: float = 0.5
    brightness_delta: float = 0.2
    contrast_prob: float = 0.5
    contrast_delta: float = 0.2

    def __post_init__(self):
        for name in ("hflip_prob", "rotate_prob", "brightness_prob", "contrast_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.rotate_max_deg < 0:
            raise ValueError("rotate_max_deg must be >= 0")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def hflip(sample: Sample) -> Sample:
    return Sample(sample.id, sample.image[:, ::-1].copy(), sample.mask[:, ::-1].copy())


def rotate(sample: Sample, degrees: float) -> Sample:
    """Rotate about the image centre; zero fill, bilinear image, nearest mask."""
    h, w = sample.image.shape
    t = np.deg2rad(degrees)
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - rot @ centre
    img = ndimage.affine_transform(sample.image.astype(np.float64), rot, offset, order=1, mode="constant", cval=0.0)
    mask = ndimage.affine_transform(sample.mask, rot, offset, order=0, mode="constant", cval=0)
    return Sample(sample.id, img.astype(np.float32), mask)


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Random flip/rotation (image and mask) and brightness/contrast (image only).

    One uniform draw is taken per transform whether or not it fires, so the
    rng stream advances identically for every sample.
    """
    u = rng.random(4)
    angle = rng.uniform(-cfg.rotate_max_deg, cfg.rotate_max_deg)
    shift = rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)
    gain = rng.uniform(1.0 - cfg.contrast_delta, 1.0 + cfg.contrast_delta)
    out = sample
    if u[0] < cfg.hflip_prob:
        out = hflip(out)
    if u[1] < cfg.rotate_prob and angle != 0.0:
        out = rotate(out, angle)
    img = out.image
    photometric = False
    if u[2] < cfg.brightness_prob:
        img = img + np.float32(shift)
        photometric = True
    if u[3] < cfg.contrast_prob:
        m = img.mean(dtype=np.float64)
        img = ((img - m) * gain + m).astype(np.float32)
        photometric = True
    if photometric:
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
    if out is sample and not photometric:
        return sample
    return Sample(sample.id, img, out.mask)


# -- folds -------------------------------------------------------------------------


@dataclass
class FoldSpec:
    k: int
    seed: int
    assignment: Dict[str, int] = field(default_factory=dict)

    def fold_ids(self, fold: int) -> List[str]:
        return sorted(i for i, f in self.assignment.items() if f == fold)

    def train_ids(self, fold: int) -> List[str]:
        if self.k == 1:
            return sorted(self.assignment)
        return sorted(i for i, f in self.assignment.items() if f != fold)

    def sizes(self) -> List[int]:
        return [len(self.fold_ids(f)) for f in range(self.k)]


def make_folds(ids: Iterable[str], k: int = 5, seed: int = 0) -> FoldSpec:
    """Seeded shuffle, then round-robin assignment to ``k`` folds."""
    ids = sorted(ids)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(set(ids)) != len(ids):
        raise ValueError("sample ids must be unique")
    perm = np.random.default_rng(seed).permutation(len(ids))
    return FoldSpec(k, seed, {ids[p]: j % k for j, p in enumerate(perm)})


# -- synthetic OCT-like data --------------------------------------------------------

SPECKLE_STRENGTH = 0.15


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def _synth_one(rng: np.random.Generator, size: int, class_count: int, sid: str) -> Sample:
    s = float(size)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi)
    tilt = rng.uniform(-0.04, 0.04)
    top = s * (0.26 + 0.03 * np.sin(2 * np.pi * xx / s + phase) + tilt * (xx / s - 0.5))
    thick = s * rng.uniform(0.40, 0.46)
    depth = (yy - top) / thick  # 0 at inner retina surface, 1 at the RPE

    img = np.full((size, size), 0.06)
    # (start, end, intensity) in relative retinal depth
    bands = [
        (0.00, 0.10, 0.78),  # nerve fibre layer
        (0.10, 0.30, 0.55),  # ganglion / inner plexiform
        (0.30, 0.48, 0.38),  # inner nuclear
        (0.48, 0.58, 0.60),  # outer plexiform
        (0.58, 0.90, 0.34),  # outer nuclear
        (0.90, 1.00, 0.92),  # ellipsoid zone / RPE
    ]
    for lo, hi, val in bands:
        img[(depth >= lo) & (depth < hi)] = val
    choroid = depth >= 1.0
    img[choroid] = 0.50 * np.exp(-(depth[choroid] - 1.0) * 2.5)
    mask = np.zeros((size, size), dtype=np.uint8)

    if class_count > 1:
        n_cysts = int(rng.integers(2, 6))
        for _ in range(n_cysts):
            cx = rng.uniform(0.15 * s, 0.85 * s)
            ry = s * rng.uniform(0.025, 0.045)
            rx = s * rng.uniform(0.03, 0.06)
            d = rng.uniform(0.32, 0.62)
            cy = float(np.interp(cx, xx[0], top[0])) + d * thick
            region = _ellipse(yy, xx, cy, cx, ry, rx, rng.uniform(-0.4, 0.4))
            img[region] = 0.05
            mask[region] = 1
    if class_count > 2:
        cx = rng.uniform(0.3 * s, 0.7 * s)
        half_w = s * rng.uniform(0.14, 0.22)
        height = s * rng.uniform(0.07, 0.11)
        rpe = top + 0.9 * thick
        frac = 1.0 - ((xx - cx) / half_w) ** 2
        region = (frac > 0) & (yy <= rpe) & (yy >= rpe - height * np.clip(frac, 0, None))
        img[region] = 0.08
        mask[region] = 2
    if class_count > 3:
        cx = rng.uniform(0.25 * s, 0.75 * s)
        half_w = s * rng.uniform(0.08, 0.14)
        height = s * rng.uniform(0.05, 0.08)
        base = top + 1.0 * thick + height
        frac = 1.0 - ((xx - cx) / half_w) ** 2
        region = (frac > 0) & (yy >= top + thick) & (yy <= base - height * (1 - np.clip(frac, 0, None)))
        region &= mask == 0
        img[region] = 0.22
        mask[region] = 3

    noise = rng.standard_normal((size, size))
    img = np.clip(img * (1.0 + SPECKLE_STRENGTH * noise), 0.0, 1.0)
    img = image_to_uint8(img).astype(np.float32) / np.float32(255.0)
    return Sample(sid, img, mask)


def synth_generate(n: int, size: int = 64, seed: int = 0, class_count: int = 3) -> List[Sample]:
    """Layered retina-like B-scans with exactly labelled fluid regions.

    IRF: a few small dark ellipses in the middle layers. SRF: one larger dark
    lens above the RPE. PED (class_count >= 4): a dome beneath the RPE.
    Sample ``i`` depends only on ``(seed, i)``.
    """
    if size < 32:
        raise ValueError(f"synthetic size must be >= 32, got {size}")
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    return [_synth_one(np.random.default_rng([seed, i]), size, min(class_count, 4), f"synth_{i:04d}") for i in range(n)]
