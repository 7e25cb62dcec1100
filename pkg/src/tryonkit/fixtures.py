"""Procedural fixtures: stick-figure persons, striped garments, toy label maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .segmentation import Label

CHAR_LABELS = {
    ".": Label.BACKGROUND,
    "h": Label.HAIR,
    "f": Label.FACE,
    "n": Label.NECK,
    "c": Label.CLOTH,
    "l": Label.LEFT_ARM,
    "r": Label.RIGHT_ARM,
    "b": Label.LOWER_BODY,
    "g": Label.LEGS,
}


def parse_art(rows: list[str]) -> np.ndarray:
    """Label map from character art (see ``CHAR_LABELS``); ``#`` reads as 1 in masks."""
    if len({len(r) for r in rows}) != 1:
        raise ValueError("art rows must have equal length")
    return np.array([[int(CHAR_LABELS[ch]) for ch in row] for row in rows], dtype=np.int64)


def parse_mask_art(rows: list[str]) -> np.ndarray:
    return np.array([[1 if ch == "#" else 0 for ch in row] for row in rows], dtype=np.uint8)


# Long-sleeve person (sleeves and torso removed in the agnostic parse), short-sleeve
# warped garment, densepose arms and a 2-pixel speck of densepose noise.
SLEEVE_AGNOSTIC = [
    "......hhhh......",
    ".....hhhhhh.....",
    ".....hffffh.....",
    "......ffff......",
    ".......nn.......",
    *["................"] * 8,
    *["....bbbbbbbb...."] * 3,
]
SLEEVE_WARP = [
    *["................"] * 5,
    *["..############.."] * 3,
    *["....########...."] * 5,
    *["................"] * 3,
]
SLEEVE_DENSEPOSE = [
    "................",
    "................",
    "......ffff......",
    "......ffff......",
    "................",
    *[".lll........rrr."] * 8,
    "....bbbbbbbb....",
    "ll..bbbbbbbb....",
    "....bbbbbbbb....",
]
SLEEVE_EXPECTED = [
    "......hhhh......",
    ".....hhhhhh.....",
    ".....hffffh.....",
    "......ffff......",
    ".......nn.......",
    *[".lccccccccccccr."] * 3,
    *[".lllccccccccrrr."] * 5,
    *["....bbbbbbbb...."] * 3,
]


@dataclass(frozen=True)
class SleeveFixture:
    agnostic: np.ndarray
    warp_mask: np.ndarray
    densepose: np.ndarray
    expected: np.ndarray


def sleeve_fixture() -> SleeveFixture:
    return SleeveFixture(
        parse_art(SLEEVE_AGNOSTIC),
        parse_mask_art(SLEEVE_WARP),
        parse_art(SLEEVE_DENSEPOSE),
        parse_art(SLEEVE_EXPECTED),
    )


# --------------------------------------------------------------------------
# stick-figure persons

SKIN = (0.93, 0.76, 0.62)
HAIR = (0.25, 0.15, 0.08)
PANTS = (0.15, 0.18, 0.35)
OLD_SHIRT = (0.2, 0.55, 0.3)


@dataclass(frozen=True)
class PersonFixture:
    person: np.ndarray  # [3, H, W] I_p
    parse: np.ndarray  # full parse of I_p
    agnostic_parse: np.ndarray  # cloth and arms removed
    garment_mask: np.ndarray  # m: inpaint region (1 = clothing / arms)
    agnostic: np.ndarray  # I_a = I_p * (1 - m)
    densepose: np.ndarray
    reference: np.ndarray  # I_c, target garment on white
    warped: np.ndarray  # I_c^w
    warp_mask: np.ndarray  # I_m^w


def _box(h: int, w: int, top: float, bottom: float, left: float, right: float) -> np.ndarray:
    yy, xx = np.mgrid[:h, :w]
    return (yy >= top * h) & (yy < bottom * h) & (xx >= left * w) & (xx < right * w)


def _ellipse(h: int, w: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[:h, :w]
    return ((yy - cy * h) / (ry * h)) ** 2 + ((xx - cx * w) / (rx * w)) ** 2 <= 1.0


def garment_texture(h: int, w: int, seed: int) -> np.ndarray:
    """Striped garment fabric with a square logo, ``[3, H, W]``."""
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.3, 0.9, 3)
    accent = rng.uniform(0.0, 0.4, 3)
    period = max(2, int(round(h / 16)))
    yy, xx = np.mgrid[:h, :w]
    stripes = ((yy // period) % 2).astype(np.float64)
    tex = base[:, None, None] * (1 - stripes) + accent[:, None, None] * stripes
    logo = _box(h, w, 0.42, 0.52, 0.42, 0.58)
    checker = ((yy // max(1, period // 2) + xx // max(1, period // 2)) % 2).astype(np.float64)
    tex[:, logo] = checker[logo] * 0.95
    return np.clip(tex, 0.0, 1.0)


def _paint(img: np.ndarray, region: np.ndarray, rgb) -> None:
    img[:, region] = np.asarray(rgb, dtype=np.float64)[:, None]


def person_fixture(height: int = 256, width: int = 192, seed: int = 0) -> PersonFixture:
    h, w = height, width
    yy, xx = np.mgrid[:h, :w]
    bg = np.stack([0.85 + 0.1 * yy / h, 0.85 + 0.05 * xx / w, np.full((h, w), 0.8)])
    person = bg.copy()

    hair = _ellipse(h, w, 0.10, 0.5, 0.08, 0.13)
    face = _ellipse(h, w, 0.14, 0.5, 0.07, 0.10)
    neck = _box(h, w, 0.19, 0.25, 0.45, 0.55)
    torso = _box(h, w, 0.25, 0.62, 0.30, 0.70)
    left_arm = _box(h, w, 0.25, 0.60, 0.18, 0.30)
    right_arm = _box(h, w, 0.25, 0.60, 0.70, 0.82)
    lower = _box(h, w, 0.62, 0.80, 0.31, 0.69)
    legs = _box(h, w, 0.80, 0.98, 0.33, 0.67) & ~_box(h, w, 0.80, 0.98, 0.47, 0.53)
    long_sleeves = (left_arm | right_arm) & (yy < 0.55 * h)

    parse = np.zeros((h, w), dtype=np.int64)
    for region, label in (
        (left_arm, Label.LEFT_ARM),
        (right_arm, Label.RIGHT_ARM),
        (torso | long_sleeves, Label.CLOTH),
        (lower, Label.LOWER_BODY),
        (legs, Label.LEGS),
        (neck, Label.NECK),
        (hair, Label.HAIR),
        (face & ~(hair & (yy < 0.11 * h)), Label.FACE),
    ):
        parse[region] = label

    colours = {
        Label.LEFT_ARM: SKIN,
        Label.RIGHT_ARM: SKIN,
        Label.CLOTH: OLD_SHIRT,
        Label.LOWER_BODY: PANTS,
        Label.LEGS: PANTS,
        Label.NECK: SKIN,
        Label.HAIR: HAIR,
        Label.FACE: SKIN,
    }
    for label, rgb in colours.items():
        _paint(person, parse == label, rgb)

    garment_mask = np.isin(parse, [Label.CLOTH, Label.LEFT_ARM, Label.RIGHT_ARM]).astype(np.uint8)
    agnostic_parse = np.where(garment_mask == 1, Label.BACKGROUND, parse)
    agnostic = person * (1 - garment_mask)[None]

    densepose = np.zeros((h, w), dtype=np.int64)
    densepose[left_arm] = Label.LEFT_ARM
    densepose[right_arm] = Label.RIGHT_ARM
    densepose[face] = Label.FACE
    speck = _box(h, w, 0.90, 0.91, 0.05, 0.06)
    densepose[speck] = Label.LEFT_ARM

    short_sleeves = (left_arm | right_arm) & (yy < 0.35 * h)
    warp_mask = (torso | short_sleeves).astype(np.uint8)
    fabric = garment_texture(h, w, seed)
    warped = fabric * warp_mask[None]

    reference = np.ones((3, h, w))
    ref_shape = _box(h, w, 0.15, 0.85, 0.25, 0.75) | _box(h, w, 0.15, 0.40, 0.10, 0.90)
    reference[:, ref_shape] = fabric[:, ref_shape]

    return PersonFixture(
        person=np.clip(person, 0.0, 1.0),
        parse=parse,
        agnostic_parse=agnostic_parse,
        garment_mask=garment_mask,
        agnostic=np.clip(agnostic, 0.0, 1.0),
        densepose=densepose,
        reference=reference,
        warped=warped,
        warp_mask=warp_mask,
    )
