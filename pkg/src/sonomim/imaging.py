"""Patch decomposition, random masking, mask-token substitution, and the
augmentation pipeline.

Masking depends only on (patch count, ratio, seed), never on image content.
Augmentation draws a fixed number of randoms per call so the rng stream stays
aligned regardless of which transforms fire.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from sonomim.autodiff import Tensor, ops


class ImagingError(ValueError):
    pass


@dataclass
class ImageSample:
    pixels: np.ndarray  # (H, W, C) float32 in [0, 1]
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    source_id: str = ""

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] not in (1, 3):
            raise ImagingError(
                f"expected (H, W, C) pixels with C in {{1, 3}}, got {self.pixels.shape}"
            )
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ImagingError("pixel values must lie in [0, 1]")
        self.labels = np.asarray(self.labels, dtype=bool)


@dataclass(frozen=True)
class PatchGrid:
    patches: np.ndarray  # (N, p*p*C)
    grid: tuple[int, int]
    patch_size: int
    channels: int

    @property
    def count(self) -> int:
        return self.patches.shape[0]


@dataclass(frozen=True)
class MaskSpec:
    masked: np.ndarray  # sorted unique indices into [0, N)
    ratio: float
    seed: int
    total: int

    def __post_init__(self):
        object.__setattr__(self, "masked", np.asarray(self.masked, dtype=np.int64))

    def bool_mask(self) -> np.ndarray:
        m = np.zeros(self.total, dtype=bool)
        m[self.masked] = True
        return m


@dataclass(frozen=True)
class AugmentConfig:
    p_vflip: float = 0.5
    p_hflip: float = 0.5
    p_crop: float = 0.5
    p_jitter: float = 0.2
    crop_scale: tuple[float, float] = (0.6, 1.0)
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05

    def __post_init__(self):
        for name in ("p_vflip", "p_hflip", "p_crop", "p_jitter"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ImagingError(f"{name} must be a probability, got {p}")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ImagingError(f"invalid crop scale range {self.crop_scale}")


IDENTITY_AUGMENT = AugmentConfig(p_vflip=0.0, p_hflip=0.0, p_crop=0.0, p_jitter=0.0)


# ---------------------------------------------------------------------------
# patches

def patchify_array(pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """(..., H, W, C) -> (..., N, p*p*C) in row-major patch order. Lossless."""
    p = patch_size
    *lead, h, w, c = pixels.shape
    if h % p or w % p:
        raise ImagingError(f"patch size {p} must divide image size {(h, w)}")
    gh, gw = h // p, w // p
    x = pixels.reshape(*lead, gh, p, gw, p, c)
    x = np.moveaxis(x, -4, -3)  # (..., gh, gw, p, p, c)
    return np.ascontiguousarray(x.reshape(*lead, gh * gw, p * p * c))


def unpatchify_array(
    patches: np.ndarray, grid: tuple[int, int], patch_size: int, channels: int
) -> np.ndarray:
    p = patch_size
    gh, gw = grid
    *lead, n, d = patches.shape
    if n != gh * gw or d != p * p * channels:
        raise ImagingError("patch array inconsistent with grid/patch size")
    x = patches.reshape(*lead, gh, gw, p, p, channels)
    x = np.moveaxis(x, -3, -4)  # (..., gh, p, gw, p, c)
    return np.ascontiguousarray(x.reshape(*lead, gh * p, gw * p, channels))


def patchify(img: ImageSample, patch_size: int) -> PatchGrid:
    h, w, c = img.pixels.shape
    patches = patchify_array(img.pixels, patch_size)
    return PatchGrid(
        patches=patches,
        grid=(h // patch_size, w // patch_size),
        patch_size=patch_size,
        channels=c,
    )


def unpatchify(grid: PatchGrid) -> np.ndarray:
    return unpatchify_array(grid.patches, grid.grid, grid.patch_size, grid.channels)


# ---------------------------------------------------------------------------
# masking

def sample_mask(n_patches: int, ratio: float, seed: int) -> MaskSpec:
    """Uniform sample of round(ratio*N) patch indices, without replacement."""
    if n_patches < 2:
        raise ImagingError(f"need at least 2 patches to mask, got {n_patches}")
    if not 0.0 < ratio < 1.0:
        raise ImagingError(f"mask ratio must be in (0, 1), got {ratio}")
    k = int(round(ratio * n_patches))
    rng = np.random.default_rng(seed)
    masked = np.sort(rng.choice(n_patches, size=k, replace=False))
    return MaskSpec(masked=masked, ratio=ratio, seed=seed, total=n_patches)


def masks_to_bool(specs: Sequence[MaskSpec]) -> np.ndarray:
    return np.stack([s.bool_mask() for s in specs], axis=0)


def substitute_mask_token(embeddings: Tensor, mask, mask_token: Tensor) -> Tensor:
    """Replace masked rows of (N, D) or (B, N, D) embeddings with the learnable
    mask token. Unmasked rows come through bit-identical; the token sits on the
    tape so it receives the summed gradient of all masked rows."""
    if isinstance(mask, MaskSpec):
        mask = mask.bool_mask()
    elif isinstance(mask, (list, tuple)) and mask and isinstance(mask[0], MaskSpec):
        mask = masks_to_bool(mask)
    return ops.mask_rows_replace(embeddings, np.asarray(mask, dtype=bool), mask_token)


# ---------------------------------------------------------------------------
# augmentation

def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resize of an (H, W, C) float image."""
    h, w, _ = pixels.shape
    if (h, w) == (out_h, out_w):
        return pixels.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(pixels.dtype)[:, None, None]
    wx = (xs - x0).astype(pixels.dtype)[None, :, None]
    top = pixels[y0][:, x0] * (1 - wx) + pixels[y0][:, x1] * wx
    bot = pixels[y1][:, x0] * (1 - wx) + pixels[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def _to_grayscale(px: np.ndarray) -> np.ndarray:
    luma = 0.299 * px[..., 0] + 0.587 * px[..., 1] + 0.114 * px[..., 2]
    return np.repeat(luma[..., None], 3, axis=-1).astype(px.dtype)


def _adjust_hue(px: np.ndarray, shift: float) -> np.ndarray:
    """Rotate chroma in YIQ space by shift (fraction of a full turn)."""
    r, g, b = px[..., 0], px[..., 1], px[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    i = 0.596 * r - 0.274 * g - 0.322 * b
    q = 0.211 * r - 0.523 * g + 0.312 * b
    theta = 2.0 * math.pi * shift
    ci, cq = math.cos(theta), math.sin(theta)
    i2 = ci * i - cq * q
    q2 = cq * i + ci * q
    out = np.stack(
        [
            y + 0.956 * i2 + 0.621 * q2,
            y - 0.272 * i2 - 0.647 * q2,
            y - 1.106 * i2 + 1.703 * q2,
        ],
        axis=-1,
    )
    return out.astype(px.dtype)


def augment(img: ImageSample, cfg: AugmentConfig, rng: np.random.Generator) -> ImageSample:
    """vflip -> hflip -> random-resized-crop -> jitter.

    The jitter step converts 3-channel images to grayscale before adjusting
    brightness/contrast/saturation/hue. Labels are untouched and output
    pixels are clamped back to [0, 1].
    """
    u = rng.random(11)
    px = img.pixels
    h, w, c = px.shape

    if u[0] < cfg.p_vflip:
        px = px[::-1, :, :]
    if u[1] < cfg.p_hflip:
        px = px[:, ::-1, :]
    if u[2] < cfg.p_crop:
        lo, hi = cfg.crop_scale
        scale = lo + (hi - lo) * u[3]
        side_h = max(1, int(round(h * math.sqrt(scale))))
        side_w = max(1, int(round(w * math.sqrt(scale))))
        top = int(u[4] * (h - side_h + 1))
        left = int(u[5] * (w - side_w + 1))
        px = resize_bilinear(
            np.ascontiguousarray(px[top : top + side_h, left : left + side_w]), h, w
        )
    if u[6] < cfg.p_jitter:
        if c == 3:
            px = _to_grayscale(px)
        px = px * np.float32(1.0 + cfg.brightness * (2.0 * u[7] - 1.0))
        m = px.mean()
        px = m + (1.0 + cfg.contrast * (2.0 * u[8] - 1.0)) * (px - m)
        if c == 3:
            gray = _to_grayscale(px)
            px = gray + (1.0 + cfg.saturation * (2.0 * u[9] - 1.0)) * (px - gray)
            px = _adjust_hue(px, cfg.hue * (2.0 * u[10] - 1.0))

    px = np.clip(px, 0.0, 1.0).astype(np.float32)
    return ImageSample(
        pixels=np.ascontiguousarray(px), labels=img.labels, source_id=img.source_id
    )


def load_image(path) -> np.ndarray:
    """Decode an 8-bit PNG/JPG/BMP to (H, W, C) float32 in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return np.ascontiguousarray(arr)


def save_image(pixels: np.ndarray, path) -> None:
    from PIL import Image

    arr = np.clip(np.asarray(pixels), 0.0, 1.0)
    arr = (arr * 255.0).round().astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)
