"""Patch grids, random masking and the weak augmentation pipeline."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class InvalidInputError(ValueError):
    """Raised when an operation receives arguments violating its preconditions."""


@dataclass(frozen=True)
class PatchGrid:
    image_h: int = 64
    image_w: int = 64
    mask_patch: int = 32
    token_patch: int = 16

    def __post_init__(self):
        for name in ("image_h", "image_w", "mask_patch", "token_patch"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.mask_patch % self.token_patch:
            raise InvalidInputError("mask_patch must be divisible by token_patch")
        for side in (self.image_h, self.image_w):
            if side % self.mask_patch or side % self.token_patch:
                raise InvalidInputError(
                    f"image side {side} not divisible by mask_patch/token_patch")

    @property
    def grid_h(self) -> int:
        return self.image_h // self.mask_patch

    @property
    def grid_w(self) -> int:
        return self.image_w // self.mask_patch

    @property
    def num_cells(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def token_h(self) -> int:
        return self.image_h // self.token_patch

    @property
    def token_w(self) -> int:
        return self.image_w // self.token_patch

    @property
    def scale(self) -> int:
        """Tokens per mask cell along one side."""
        return self.mask_patch // self.token_patch


@dataclass
class Mask:
    cells: np.ndarray  # bool, (grid_h, grid_w); True = masked
    ratio: float

    @property
    def num_masked(self) -> int:
        return int(self.cells.sum())


def masked_count(ratio: float, num_cells: int) -> int:
    # np.rint rounds half to even
    return int(np.rint(ratio * num_cells))


def generate_mask(grid: PatchGrid, ratio: float, rng: np.random.Generator) -> Mask:
    if not 0.0 <= ratio <= 1.0 or not math.isfinite(ratio):
        raise InvalidInputError(f"mask ratio must lie in [0, 1], got {ratio}")
    n = grid.num_cells
    if n == 0:
        raise InvalidInputError("patch grid has no cells")
    flat = np.zeros(n, dtype=bool)
    flat[rng.choice(n, size=masked_count(ratio, n), replace=False)] = True
    return Mask(flat.reshape(grid.grid_h, grid.grid_w), ratio)


def generate_masks(grid: PatchGrid, ratio: float, batch: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Independent masks for a batch, stacked to (batch, grid_h, grid_w)."""
    return np.stack([generate_mask(grid, ratio, rng).cells for _ in range(batch)])


def expand_to_tokens(mask, grid: PatchGrid) -> np.ndarray:
    """Blow mask cells up to the encoder token grid.

    Accepts a `Mask` or a bool array whose last two axes are (grid_h, grid_w).
    """
    cells = mask.cells if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)
    if cells.shape[-2:] != (grid.grid_h, grid.grid_w):
        raise InvalidInputError(
            f"mask shape {cells.shape[-2:]} != grid {(grid.grid_h, grid.grid_w)}")
    s = grid.scale
    return cells.repeat(s, axis=-2).repeat(s, axis=-1)


def expand_to_pixels(token_mask, token_patch: int):
    """Token-level mask to pixel-level mask (works for numpy arrays and tensors)."""
    if isinstance(token_mask, torch.Tensor):
        return token_mask.repeat_interleave(token_patch, -2).repeat_interleave(token_patch, -1)
    return np.asarray(token_mask).repeat(token_patch, axis=-2).repeat(token_patch, axis=-1)


@dataclass
class AugmentationConfig:
    output_size: int = 64
    crop_scale: tuple[float, float] = (0.67, 1.0)
    aspect_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    hflip_prob: float = 0.5
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD
    # Off by default; stage-1 may enable them to break color shortcuts.
    color_jitter: float = 0.0
    grayscale_prob: float = 0.0
    min_input_size: int = 8

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not (0 < lo <= hi <= 1):
            raise InvalidInputError(f"crop_scale must be within (0, 1], got {self.crop_scale}")
        a_lo, a_hi = self.aspect_ratio
        if not (0 < a_lo <= a_hi):
            raise InvalidInputError(f"aspect_ratio bounds must be positive, got {self.aspect_ratio}")
        if not 0 <= self.hflip_prob <= 1:
            raise InvalidInputError("hflip_prob must lie in [0, 1]")
        if len(self.mean) != len(self.std) or any(s <= 0 for s in self.std):
            raise InvalidInputError("normalization mean/std malformed")
        self.crop_scale = (float(lo), float(hi))
        self.aspect_ratio = (float(a_lo), float(a_hi))
        self.mean = tuple(float(m) for m in self.mean)
        self.std = tuple(float(s) for s in self.std)

    @classmethod
    def identity(cls, output_size: int, channels: int = 3) -> "AugmentationConfig":
        return cls(output_size=output_size, crop_scale=(1.0, 1.0), aspect_ratio=(1.0, 1.0),
                   hflip_prob=0.0, mean=(0.0,) * channels, std=(1.0,) * channels)


def _sample_crop(h: int, w: int, cfg: AugmentationConfig, rng: np.random.Generator):
    area = h * w
    log_lo, log_hi = math.log(cfg.aspect_ratio[0]), math.log(cfg.aspect_ratio[1])
    for _ in range(10):
        target = area * rng.uniform(*cfg.crop_scale)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # fallback: central crop clamped to the aspect range
    in_ratio = w / h
    if in_ratio < cfg.aspect_ratio[0]:
        cw, ch = w, int(round(w / cfg.aspect_ratio[0]))
    elif in_ratio > cfg.aspect_ratio[1]:
        ch, cw = h, int(round(h * cfg.aspect_ratio[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def apply_weak_augmentation(image, cfg: AugmentationConfig,
                            rng: np.random.Generator) -> np.ndarray:
    """Random resized crop, horizontal flip and per-channel normalization.

    `image` is channels-first (C, H, W); uint8 inputs are scaled to [0, 1].
    Returns float32 (C, output_size, output_size).
    """
    img = np.asarray(image)
    if img.ndim != 3:
        raise InvalidInputError(f"expected (C, H, W) image, got shape {img.shape}")
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    else:
        img = img.astype(np.float32, copy=False)
    c, h, w = img.shape
    if min(h, w) < cfg.min_input_size:
        raise InvalidInputError(f"image {h}x{w} smaller than minimum crop {cfg.min_input_size}")
    if c != len(cfg.mean):
        raise InvalidInputError(f"image has {c} channels, normalization expects {len(cfg.mean)}")

    top, left, ch, cw = _sample_crop(h, w, cfg, rng)
    crop = img[:, top:top + ch, left:left + cw]
    size = cfg.output_size
    if (ch, cw) != (size, size):
        t = torch.from_numpy(np.ascontiguousarray(crop))[None]
        crop = F.interpolate(t, size=(size, size), mode="bilinear",
                             align_corners=False)[0].numpy()
    if rng.random() < cfg.hflip_prob:
        crop = crop[:, :, ::-1]
    if cfg.color_jitter > 0:
        gains = rng.uniform(1 - cfg.color_jitter, 1 + cfg.color_jitter, size=(c, 1, 1))
        crop = np.clip(crop * gains.astype(np.float32), 0.0, 1.0)
    if cfg.grayscale_prob > 0 and rng.random() < cfg.grayscale_prob:
        crop = np.broadcast_to(crop.mean(axis=0, keepdims=True), crop.shape)
    mean = np.asarray(cfg.mean, dtype=np.float32)[:, None, None]
    std = np.asarray(cfg.std, dtype=np.float32)[:, None, None]
    return np.ascontiguousarray((crop - mean) / std, dtype=np.float32)


def augment_batch(images, cfg: AugmentationConfig, rng: np.random.Generator) -> torch.Tensor:
    return torch.from_numpy(np.stack([apply_weak_augmentation(im, cfg, rng) for im in images]))



def normalize_images(images, mean, std) -> torch.Tensor:
    """uint8 or [0, 1] float batch (N, C, H, W) -> normalized float32 tensor, no augmentation."""
    x = np.asarray(images)
    x = x.astype(np.float32) / 255.0 if x.dtype == np.uint8 else x.astype(np.float32)
    m = np.asarray(mean, dtype=np.float32)[:, None, None]
    s = np.asarray(std, dtype=np.float32)[:, None, None]
    return torch.from_numpy((x - m) / s)
