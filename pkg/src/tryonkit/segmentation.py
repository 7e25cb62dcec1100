"""Training-free target segmentation recomposition and MIoU scoring.

Label maps are integer ``[H, W]`` arrays over the fixed :class:`Label`
palette. Densepose maps use the same palette (arm/body labels).

Merge precedence: warped-cloth pixels override agnostic labels; the filtered
densepose residue only fills pixels that are background after that merge.
Components use 4-connectivity and are filtered per label.
"""
from __future__ import annotations

import enum
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .imaging import as_mask, png_bytes
from .tensorio import atomic_write_bytes

DEFAULT_MIN_COMPONENT = 12


class Label(enum.IntEnum):
    BACKGROUND = 0
    HAIR = 1
    FACE = 2
    NECK = 3
    CLOTH = 4
    LEFT_ARM = 5
    RIGHT_ARM = 6
    LOWER_BODY = 7
    LEGS = 8


PALETTE: dict[Label, tuple[int, int, int]] = {
    Label.BACKGROUND: (0, 0, 0),
    Label.HAIR: (254, 85, 0),
    Label.FACE: (0, 0, 254),
    Label.NECK: (85, 51, 0),
    Label.CLOTH: (254, 0, 0),
    Label.LEFT_ARM: (51, 169, 220),
    Label.RIGHT_ARM: (0, 254, 254),
    Label.LOWER_BODY: (0, 128, 0),
    Label.LEGS: (169, 254, 85),
}

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def as_labelmap(arr) -> np.ndarray:
    lab = np.asarray(arr)
    if lab.ndim != 2:
        raise ValueError(f"label map must be [H, W], got shape {lab.shape}")
    if not np.issubdtype(lab.dtype, np.integer):
        if not np.all(np.mod(lab, 1) == 0):
            raise ValueError("label map must hold integer labels")
    lab = lab.astype(np.int64)
    bad = np.setdiff1d(np.unique(lab), [int(x) for x in Label])
    if bad.size:
        raise ValueError(f"labels outside the palette: {bad.tolist()}")
    return lab


def _same_extents(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: extents {a.shape} and {b.shape} differ")


def binarize(labels) -> np.ndarray:
    return (as_labelmap(labels) != Label.BACKGROUND).astype(np.uint8)


@dataclass(frozen=True)
class Component:
    label: int
    coords: np.ndarray  # [n, 2] (row, col)

    @property
    def size(self) -> int:
        return len(self.coords)


def components(mask, label: int = 1) -> list[Component]:
    """4-connected components of a binary mask, in scan order of first pixel."""
    m = as_mask(mask)
    ids, n = ndimage.label(m, structure=FOUR_CONNECTED)
    out = []
    for k in range(1, n + 1):
        out.append(Component(label, np.argwhere(ids == k)))
    return out


def connectivity_filter(mask, l: int = DEFAULT_MIN_COMPONENT) -> np.ndarray:
    """Keep exactly the pixels whose 4-connected component has at least ``l`` pixels."""
    m = as_mask(mask)
    if l < 0:
        raise ValueError("component threshold must be >= 0")
    if l <= 1:
        return m.copy()
    ids, n = ndimage.label(m, structure=FOUR_CONNECTED)
    if n == 0:
        return m.copy()
    sizes = np.bincount(ids.ravel())
    keep = sizes >= l
    keep[0] = False
    return keep[ids].astype(np.uint8)


def filter_labels(labels, l: int = DEFAULT_MIN_COMPONENT) -> np.ndarray:
    """Apply :func:`connectivity_filter` to each label's support independently."""
    lab = as_labelmap(labels)
    out = np.zeros_like(lab)
    for value in np.unique(lab):
        if value == Label.BACKGROUND:
            continue
        kept = connectivity_filter((lab == value).astype(np.uint8), l)
        out[kept.astype(bool)] = value
    return out


def compose_agnostic_with_warp(agnostic, warp_mask) -> np.ndarray:
    lab = as_labelmap(agnostic)
    m = as_mask(warp_mask)
    _same_extents(lab, m, "compose_agnostic_with_warp")
    out = lab.copy()
    out[m == 1] = Label.CLOTH
    return out


def refine_densepose(densepose, caw, l: int = DEFAULT_MIN_COMPONENT) -> np.ndarray:
    dp = as_labelmap(densepose)
    c = as_labelmap(caw)
    _same_extents(dp, c, "refine_densepose")
    residue = np.where(c != Label.BACKGROUND, Label.BACKGROUND, dp)
    return filter_labels(residue, l)


def recompose_segmentation(agnostic, warp_mask, densepose, l: int = DEFAULT_MIN_COMPONENT) -> np.ndarray:
    caw = compose_agnostic_with_warp(agnostic, warp_mask)
    dp = refine_densepose(densepose, caw, l)
    return np.where(caw != Label.BACKGROUND, caw, dp)


def evaluated_labels(region: str, present: np.ndarray) -> list[int]:
    if region == "cloth_only":
        candidates = [Label.CLOTH]
    elif region == "all_excluding_neck":
        candidates = [x for x in Label if x not in (Label.BACKGROUND, Label.NECK)]
    else:
        raise ValueError(f"unknown MIoU region {region!r}")
    return [int(x) for x in candidates if int(x) in present]


def miou(pred, truth, region: str = "cloth_only") -> float:
    """Mean IoU over the region's labels; labels absent from both maps are skipped."""
    p = as_labelmap(pred)
    t = as_labelmap(truth)
    _same_extents(p, t, "miou")
    labels = evaluated_labels(region, np.union1d(np.unique(p), np.unique(t)))
    if not labels:
        raise ValueError(f"no labels to evaluate for region {region!r}")
    ious = []
    for value in labels:
        a, b = p == value, t == value
        ious.append(np.logical_and(a, b).sum() / np.logical_or(a, b).sum())
    return float(np.mean(ious))


def labelmap_to_image(labels) -> np.ndarray:
    """Palette colours as a ``[3, H, W]`` float image (condition for the seg adapter)."""
    lab = as_labelmap(labels)
    lut = np.zeros((max(int(x) for x in Label) + 1, 3), dtype=np.float64)
    for key, rgb in PALETTE.items():
        lut[int(key)] = rgb
    return np.moveaxis(lut[lab] / 255.0, -1, 0)


def _flat_palette() -> list[int]:
    flat = []
    for key in sorted(PALETTE):
        flat.extend(PALETTE[key])
    return flat + [0] * (768 - len(flat))


def write_labelmap(path: str | os.PathLike, labels) -> None:
    lab = as_labelmap(labels).astype(np.uint8)
    pil = Image.fromarray(lab, mode="P")
    pil.putpalette(_flat_palette())
    atomic_write_bytes(path, png_bytes(pil))


def read_labelmap(path: str | os.PathLike) -> np.ndarray:
    with Image.open(Path(path)) as pil:
        if pil.mode != "P" and pil.mode != "L":
            raise ValueError(f"label map PNG must be indexed or grayscale, got mode {pil.mode}")
        arr = np.asarray(pil)
    return as_labelmap(arr)
