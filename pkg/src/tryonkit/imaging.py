"""Pixel-space types, PNG I/O and the texture highlighting map.

Images are ``float64`` numpy arrays shaped ``[C, H, W]`` with ``C`` in {1, 3}
and values in [0, 1]. Masks are ``uint8`` arrays shaped ``[H, W]`` holding
only 0 and 1.
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .tensorio import atomic_write_bytes

LUMA = (0.299, 0.587, 0.114)
MASK_THRESHOLD = 128

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()
SMOOTH = (1.0, 2.0, 1.0)  # SOBEL_X == outer(SMOOTH, [-1, 0, 1])


@dataclass(frozen=True)
class SobelKernels:
    kx: np.ndarray = field(default_factory=lambda: SOBEL_X.copy())
    ky: np.ndarray = field(default_factory=lambda: SOBEL_Y.copy())
    erosion_radius: int = 2


def as_image(arr) -> np.ndarray:
    img = np.asarray(arr, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"image must be [C, H, W] with C in (1, 3), got shape {img.shape}")
    if img.shape[1] < 1 or img.shape[2] < 1:
        raise ValueError("image extents must be positive")
    if not np.isfinite(img).all() or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must be finite and lie in [0, 1]")
    return img


def as_mask(arr) -> np.ndarray:
    m = np.asarray(arr)
    if m.ndim == 3 and m.shape[0] == 1:
        m = m[0]
    if m.ndim != 2:
        raise ValueError(f"mask must be [H, W], got shape {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask must be strictly binary (0/1)")
    return m.astype(np.uint8)


def luminance(img: np.ndarray) -> np.ndarray:
    img = as_image(img)
    if img.shape[0] == 1:
        return img[0]
    return LUMA[0] * img[0] + LUMA[1] * img[1] + LUMA[2] * img[2]


def sobel_gradients(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cross-correlation with ``SOBEL_X`` and ``SOBEL_Y`` under replicate borders.

    Evaluated as weighted mirror-pair differences (weights 1, 2, 1 in order),
    so constant regions give exactly zero.
    """
    h, w = gray.shape
    p = np.pad(gray, 1, mode="edge")
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    for d, weight in enumerate(SMOOTH):
        gx = gx + weight * (p[d : d + h, 2 : 2 + w] - p[d : d + h, 0:w])
        gy = gy + weight * (p[2 : 2 + h, d : d + w] - p[0:h, d : d + w])
    return gx, gy


def sobel_magnitude(img) -> np.ndarray:
    """``0.5 * (|Gx| + |Gy|)`` of the luminance, clamped to [0, 1]; shape ``[1, H, W]``."""
    gray = luminance(img)
    if gray.shape[0] < 3 or gray.shape[1] < 3:
        raise ValueError(f"sobel needs at least 3x3 pixels, got {gray.shape}")
    gx, gy = sobel_gradients(gray)
    return np.clip(0.5 * (np.abs(gx) + np.abs(gy)), 0.0, 1.0)[None]


def erode(mask, radius: int) -> np.ndarray:
    """Binary erosion by a ``(2r+1)`` square; pixels outside the image count as 0."""
    m = as_mask(mask)
    if radius < 0:
        raise ValueError("erosion radius must be >= 0")
    if radius == 0:
        return m.copy()
    h, w = m.shape
    p = np.pad(m, radius, mode="constant", constant_values=0)
    out = np.ones_like(m)
    side = 2 * radius + 1
    for di in range(side):
        for dj in range(side):
            out &= p[di : di + h, dj : dj + w]
    return out


def default_erosion_radius(height: int, width: int) -> int:
    # 2 px at 512x384, proportional elsewhere (half-up rounding)
    return int(np.floor(2.0 * min(height, width) / 384.0 + 0.5))


def texture_highlight_map(warped_garment, warped_mask, radius: int) -> np.ndarray:
    """Sobel magnitude of the warped garment kept only inside the eroded warp mask."""
    img = as_image(warped_garment)
    m = as_mask(warped_mask)
    if img.shape[1:] != m.shape:
        raise ValueError(f"garment extents {img.shape[1:]} != mask extents {m.shape}")
    return sobel_magnitude(img) * erode(m, radius)[None]


# --------------------------------------------------------------------------
# resampling


def resize_image(img, size: tuple[int, int], mode: str = "bilinear") -> np.ndarray:
    img = as_image(img)
    if img.shape[1:] == tuple(size):
        return img.copy()
    t = torch.from_numpy(img)[None]
    if mode == "bilinear":
        out = F.interpolate(t, size=size, mode="bilinear", align_corners=False, antialias=True)
    elif mode == "nearest":
        out = F.interpolate(t, size=size, mode="nearest")
    else:
        raise ValueError(f"unknown resize mode {mode!r}")
    return np.clip(out[0].numpy(), 0.0, 1.0)


def resize_nearest(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resample of a 2-D integer/binary map (exact selection)."""
    h, w = arr.shape
    rows = np.minimum((np.arange(size[0]) * h) // size[0], h - 1)
    cols = np.minimum((np.arange(size[1]) * w) // size[1], w - 1)
    return arr[np.ix_(rows, cols)]


def resize_mask(mask, size: tuple[int, int]) -> np.ndarray:
    return as_mask(resize_nearest(as_mask(mask), size))


# --------------------------------------------------------------------------
# PNG I/O


def png_bytes(pil: Image.Image) -> bytes:
    buf = io.BytesIO()
    pil.save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def to_uint8(img) -> np.ndarray:
    img = as_image(img)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def image_png_bytes(img) -> bytes:
    u8 = to_uint8(img)
    if u8.shape[0] == 1:
        return png_bytes(Image.fromarray(u8[0], mode="L"))
    return png_bytes(Image.fromarray(np.moveaxis(u8, 0, -1), mode="RGB"))


def write_image(path: str | os.PathLike, img) -> None:
    atomic_write_bytes(path, image_png_bytes(img))


def read_image(path: str | os.PathLike, channels: int | None = None) -> np.ndarray:
    with Image.open(Path(path)) as pil:
        if channels == 1 or (channels is None and pil.mode in ("L", "1", "I;16")):
            arr = np.asarray(pil.convert("L"), dtype=np.float64)[None]
        else:
            arr = np.moveaxis(np.asarray(pil.convert("RGB"), dtype=np.float64), -1, 0)
    return arr / 255.0


def write_mask(path: str | os.PathLike, mask) -> None:
    m = as_mask(mask)
    atomic_write_bytes(path, png_bytes(Image.fromarray((m * 255).astype(np.uint8), mode="L")))


def read_mask(path: str | os.PathLike) -> np.ndarray:
    """8-bit grayscale PNG; gray value >= 128 maps to 1."""
    with Image.open(Path(path)) as pil:
        gray = np.asarray(pil.convert("L"))
    return (gray >= MASK_THRESHOLD).astype(np.uint8)
