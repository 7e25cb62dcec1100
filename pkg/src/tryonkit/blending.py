"""Frozen toy autoencoder, background-preserving latent blending, and SSIM.

The autoencoder stub is a fixed 3-stage conv encoder/decoder with f = 8.
Its first three channels at every stage carry a tent-blurred copy of RGB, so
``decode(encode(x))`` is a blurry reconstruction of ``x``; the remaining
channels are seeded random ``tanh`` features. Blending adds learnable
masked skip paths from encoder stage ``E_i`` into decoder stage ``D_i``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import as_image, as_mask, resize_nearest
from .numerics import (
    DTYPE,
    ConvParams,
    NumericError,
    ParamStore,
    Rng,
    Tensor,
    as_tensor,
    check_finite,
    conv2d,
    gradient_step,
    init_conv,
    silu,
)

TENT = torch.tensor([1.0, 2.0, 1.0], dtype=DTYPE)
TENT2D = torch.outer(TENT, TENT) / 16.0
RGB = 3


def _structured_conv(rng: Rng, c_in: int, c_out: int, kernel: int) -> ConvParams:
    """Identity-on-RGB (times a tent blur) plus seeded random mixing for extra channels."""
    mix = rng.normal((c_out, c_in)) / math.sqrt(c_in)
    mix[:RGB] = 0.0
    mix[:RGB, :RGB] = torch.eye(RGB, dtype=DTYPE)
    spatial = TENT2D if kernel == 3 else torch.ones(1, 1, dtype=DTYPE)
    return ConvParams(mix[:, :, None, None] * spatial, torch.zeros(c_out, dtype=DTYPE))


def _activate(x: Tensor) -> Tensor:
    return torch.cat([x[:RGB], torch.tanh(x[RGB:])], dim=0)


def _upsample(x: Tensor) -> Tensor:
    return F.interpolate(x.unsqueeze(0), scale_factor=2, mode="nearest")[0]


@dataclass(frozen=True)
class AutoencoderStub:
    enc: tuple[ConvParams, ...]  # 3 stride-2 stages
    to_latent: ConvParams
    from_latent: ConvParams
    dec: tuple[ConvParams, ...]  # D_3 -> D_2, D_2 -> D_1
    out: ConvParams
    latent_channels: int = 4

    @classmethod
    def create(cls, seed: int, channels: Sequence[int] = (8, 16, 32), latent_channels: int = 4) -> "AutoencoderStub":
        if len(channels) != 3 or min(channels) < RGB or latent_channels < RGB:
            raise ValueError("need 3 stage widths >= 3 and at least 3 latent channels")
        rng = Rng(seed).child("autoencoder")
        c = [RGB, *channels]
        enc = tuple(_structured_conv(rng.child(f"enc{i}"), c[i], c[i + 1], 3) for i in range(3))
        to_latent = _structured_conv(rng.child("to_latent"), c[3], latent_channels, 1)
        from_latent = _structured_conv(rng.child("from_latent"), latent_channels, c[3], 1)
        dec = (
            _structured_conv(rng.child("dec2"), c[3], c[2], 3),
            _structured_conv(rng.child("dec1"), c[2], c[1], 3),
        )
        out = _structured_conv(rng.child("out"), c[1], RGB, 3)
        return cls(enc, to_latent, from_latent, dec, out, latent_channels)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(p.weight.shape[0] for p in self.enc)

    def encode(self, img) -> tuple[Tensor, list[Tensor]]:
        """Returns ``(latent, [E_1, E_2, E_3])`` at strides 2, 4, 8."""
        x = as_tensor(img if isinstance(img, Tensor) else as_image(img))
        if x.shape[0] != RGB or x.shape[1] % 8 or x.shape[2] % 8:
            raise ValueError(f"autoencoder needs a 3-channel image with extents divisible by 8, got {tuple(x.shape)}")
        feats = []
        for stage in self.enc:
            x = _activate(conv2d(x, stage, stride=2, padding=1, padding_mode="replicate"))
            feats.append(x)
        return conv2d(x, self.to_latent), feats

    def decoder_stages(self, latent: Tensor) -> Tensor:
        return _activate(conv2d(latent, self.from_latent))

    def decode(self, latent: Tensor) -> np.ndarray:
        return decode_with_elbm(latent, None, None, self, None)


@dataclass(frozen=True)
class StageBlend:
    nl_in: ConvParams
    nl_out: ConvParams
    lin: ConvParams


@dataclass(frozen=True)
class BlendParams:
    stages: tuple[StageBlend, ...]  # ordered E_1/D_1, E_2/D_2, E_3/D_3


def init_blend(store: ParamStore, rng: Rng, channels: Sequence[int], kernel: int = 3, prefix: str = "elbm") -> None:
    """Seeded first conv of each non-linear branch; the closing convs start at zero."""
    for i, c in enumerate(channels):
        p = f"{prefix}.{i}"
        store.put(f"{p}.nl_in", init_conv(rng.child(f"{p}.nl_in"), c, c, kernel))
        store.put(f"{p}.nl_out", init_conv(rng, c, c, kernel, zero=True))
        store.put(f"{p}.lin", init_conv(rng, c, c, kernel, zero=True))


def blend_view(store: ParamStore, prefix: str = "elbm") -> BlendParams:
    stages = []
    i = 0
    while f"{prefix}.{i}.lin.weight" in store:
        p = f"{prefix}.{i}"
        stages.append(StageBlend(store.conv(f"{p}.nl_in"), store.conv(f"{p}.nl_out"), store.conv(f"{p}.lin")))
        i += 1
    return BlendParams(tuple(stages))


def elbm_fuse(d: Tensor, e: Tensor, m_tilde: Tensor, params: StageBlend) -> Tensor:
    """``D + f_NL(E) * m~`` followed by ``D + f_L(D)``, in that order."""
    if d.shape != e.shape:
        raise ValueError(f"decoder feature {tuple(d.shape)} and encoder feature {tuple(e.shape)} differ")
    if m_tilde.shape[-2:] != d.shape[1:]:
        raise ValueError(f"mask extents {tuple(m_tilde.shape[-2:])} != feature extents {tuple(d.shape[1:])}")
    pad_nl = params.nl_in.kernel // 2
    branch = conv2d(silu(conv2d(e, params.nl_in, padding=pad_nl)), params.nl_out, padding=params.nl_out.kernel // 2)
    d = d + branch * m_tilde
    return d + conv2d(d, params.lin, padding=params.lin.kernel // 2)


def _stage_masks(mask, sizes: Sequence[tuple[int, int]]) -> list[Tensor]:
    background = 1 - as_mask(mask)
    return [torch.from_numpy(resize_nearest(background, s).astype(np.float64)) for s in sizes]


def decode_raw(
    latent: Tensor,
    enc_feats: Sequence[Tensor] | None,
    mask,
    ae: AutoencoderStub,
    params: BlendParams | None,
) -> Tensor:
    """Unclamped decoder output; blending is skipped when ``params`` is None."""
    d = ae.decoder_stages(latent)
    if params is not None:
        if enc_feats is None or len(enc_feats) != len(params.stages) or len(enc_feats) != len(ae.enc):
            raise ValueError(
                f"need {len(ae.enc)} encoder features and blend stages, got "
                f"{None if enc_feats is None else len(enc_feats)} and {len(params.stages)}"
            )
        masks = _stage_masks(mask, [tuple(f.shape[1:]) for f in enc_feats])
    for k, stage in enumerate((None, *ae.dec)):
        i = len(ae.enc) - 1 - k  # stage index: 2, 1, 0
        if stage is not None:
            d = _activate(conv2d(_upsample(d), stage, padding=1, padding_mode="replicate"))
        if params is not None:
            d = elbm_fuse(d, enc_feats[i], masks[i], params.stages[i])
    out = conv2d(_upsample(d), ae.out, padding=1, padding_mode="replicate")
    return check_finite(out, "decoded image")


def decode_with_elbm(latent: Tensor, enc_feats, mask, ae: AutoencoderStub, params: BlendParams | None) -> np.ndarray:
    with torch.no_grad():
        out = decode_raw(latent, enc_feats, mask, ae, params)
    return np.clip(out.numpy(), 0.0, 1.0)


# --------------------------------------------------------------------------
# training


# Squared smoothing scale of the pyramid term. Small values make the loss
# nearly non-differentiable where the plain decoder is already exact.
CHARBONNIER_EPS = 1e-3


def _charbonnier(x: Tensor) -> Tensor:
    return torch.sqrt(x * x + CHARBONNIER_EPS).mean()


def reconstruction_loss(pred: Tensor, target: Tensor, levels: int = 3, pyramid_weight: float = 0.1) -> Tensor:
    """MSE plus a smooth-L1 image-pyramid term (stand-in for a perceptual loss)."""
    loss = ((pred - target) ** 2).mean()
    p, t = pred.unsqueeze(0), target.unsqueeze(0)
    for _ in range(levels):
        p, t = F.avg_pool2d(p, 2), F.avg_pool2d(t, 2)
        loss = loss + pyramid_weight * _charbonnier(p - t)
    return loss


@dataclass(frozen=True)
class BlendExample:
    image: np.ndarray  # [3, H, W]
    mask: np.ndarray  # [H, W] garment mask (1 = foreground)


def elbm_loss(store: ParamStore, dataset: Sequence[BlendExample], ae: AutoencoderStub, prefix: str = "elbm") -> Tensor:
    params = blend_view(store, prefix)
    total = torch.zeros((), dtype=DTYPE)
    for ex in dataset:
        img = torch.from_numpy(as_image(ex.image))
        latent, feats = ae.encode(img)
        total = total + reconstruction_loss(decode_raw(latent, feats, ex.mask, ae, params), img)
    return total / len(dataset)


def train_elbm(
    store: ParamStore,
    dataset: Sequence[BlendExample],
    ae: AutoencoderStub,
    learning_rate: float,
    epochs: int,
    prefix: str = "elbm",
) -> tuple[ParamStore, list[float]]:
    """Full-batch gradient descent on the blending convs; the autoencoder stays fixed.

    Returns the trained parameters and the loss recorded before each epoch.
    """
    if not dataset:
        raise ValueError("empty dataset")
    history: list[float] = []
    for _ in range(epochs):
        try:
            store, loss = gradient_step(lambda p: elbm_loss(p, dataset, ae, prefix), store, learning_rate)
        except NumericError as exc:
            raise NumericError(f"blending training diverged: {exc}") from exc
        if history and loss > 10.0 * history[0]:
            raise NumericError(f"blending training diverged: loss {loss:.4g} > 10x initial {history[0]:.4g}")
        history.append(loss)
    return store, history


def background_mse(pred, target, mask) -> float:
    """Mean squared error over pixels where the garment mask is 0."""
    p, t, m = as_image(pred), as_image(target), as_mask(mask)
    bg = m == 0
    if not bg.any():
        raise ValueError("mask has no background pixels")
    return float(((p - t) ** 2)[:, bg].mean())


# --------------------------------------------------------------------------
# SSIM

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = len(g)
    x = sliding_window_view(x, n, axis=0) @ g
    return sliding_window_view(x, n, axis=1) @ g


def ssim(a, b) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), valid windows only, channels averaged."""
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"image extents {a.shape} and {b.shape} differ")
    if min(a.shape[1:]) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    g = gaussian_window()
    scores = []
    for x, y in zip(a, b):
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        scores.append((num / den).mean())
    return float(np.mean(scores))
