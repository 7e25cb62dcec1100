"""Toy conditional UNet noise predictor and its training objective.

Layout: a 4-scale encoder whose per-scale features receive the adapter
pyramids (``F_enc + omega*F_seg + (1-omega)*F_HF``), a 3-stage decoder with
skip connections, and a three-layer attention block (self, gated self over
``h_patch``, cross over ``h_cls``) after every resblock.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .adapters import (
    NUM_SCALES,
    adapter_tower,
    attention_block,
    attention_block_view,
    class_mlp_view,
    encode_class_token,
    fuse_conditions,
    init_attention_block,
    init_class_mlp,
    init_style_adapter,
    init_tower,
    style_adapter,
    style_adapter_view,
    tower_view,
)
from .diffusion import ConditionBundle, NoiseSchedule, denoiser_input, forward_noise
from .numerics import (
    DTYPE,
    NumericError,
    ParamStore,
    Rng,
    Tensor,
    as_tensor,
    check_finite,
    conv2d,
    gradient_step,
    init_conv,
    init_linear,
    linear,
    silu,
)


@dataclass(frozen=True)
class ModelConfig:
    latent_channels: int = 4
    channels: tuple[int, ...] = (16, 32, 32, 32)
    heads: int = 2
    clip_dim: int = 1024
    vae_channels: int = 4
    time_dim: int = 32
    hf_channels: int = 1
    seg_channels: int = 3
    mlp_layers: int = 3

    def __post_init__(self):
        if len(self.channels) != NUM_SCALES:
            raise ValueError(f"need {NUM_SCALES} channel counts, got {self.channels}")
        if any(c % self.heads for c in self.channels) or self.clip_dim % self.heads:
            raise ValueError("all widths must be divisible by the head count")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")


@dataclass(frozen=True)
class RawConditions:
    """Encoder outputs and pixel-space conditions before any learnable adapter."""

    cls_token: Tensor  # [1, clip_dim]
    patch_tokens: Tensor  # [N, clip_dim]
    vae_feature: Tensor  # [vae_channels, g, g]
    hf_map: Tensor  # [hf_channels, 8h, 8w]
    seg_map: Tensor  # [seg_channels, 8h, 8w]
    z_inpaint: Tensor  # [latent_channels, h, w]
    mask: Tensor  # [1, h, w]
    omega: float = 0.5


@dataclass(frozen=True)
class TrainingSample:
    raw: RawConditions
    z0: Tensor
    t: int
    eps: Tensor


def _block_names(cfg: ModelConfig) -> list[tuple[str, int]]:
    enc = [(f"unet.enc{i}", c) for i, c in enumerate(cfg.channels)]
    dec = [(f"unet.dec{i}", cfg.channels[i]) for i in range(NUM_SCALES - 2, -1, -1)]
    return enc + dec


def init_params(cfg: ModelConfig, seed: int) -> ParamStore:
    rng = Rng(seed)
    p = ParamStore()
    init_class_mlp(rng, p, "style.cls_mlp", cfg.clip_dim, cfg.mlp_layers)
    init_style_adapter(rng, p, "style.adapter", cfg.clip_dim, cfg.heads, cfg.vae_channels)
    init_tower(rng, p, "tower.hf", cfg.hf_channels, cfg.channels)
    init_tower(rng, p, "tower.seg", cfg.seg_channels, cfg.channels)

    p.put("unet.time.0", init_linear(rng.child("unet.time.0"), cfg.time_dim, cfg.time_dim))
    p.put("unet.time.1", init_linear(rng.child("unet.time.1"), cfg.time_dim, cfg.time_dim))
    c_in = 2 * cfg.latent_channels + 1
    p.put("unet.conv_in", init_conv(rng.child("unet.conv_in"), c_in, cfg.channels[0], 3))
    for i in range(1, NUM_SCALES):
        p.put(f"unet.enc{i}.down", init_conv(rng.child(f"unet.enc{i}.down"), cfg.channels[i - 1], cfg.channels[i], 3))
    for i in range(NUM_SCALES - 1):
        c_merge = cfg.channels[i + 1] + cfg.channels[i]
        p.put(f"unet.dec{i}.merge", init_conv(rng.child(f"unet.dec{i}.merge"), c_merge, cfg.channels[i], 3))
    for prefix, c in _block_names(cfg):
        p.put(f"{prefix}.res.conv1", init_conv(rng.child(f"{prefix}.res.conv1"), c, c, 3))
        p.put(f"{prefix}.res.conv2", init_conv(rng.child(f"{prefix}.res.conv2"), c, c, 3))
        p.put(f"{prefix}.res.temb", init_linear(rng.child(f"{prefix}.res.temb"), cfg.time_dim, c))
        p.put(f"{prefix}.ctx_patch", init_linear(rng.child(f"{prefix}.ctx_patch"), cfg.clip_dim, c))
        p.put(f"{prefix}.ctx_cls", init_linear(rng.child(f"{prefix}.ctx_cls"), cfg.clip_dim, c))
        init_attention_block(rng, p, f"{prefix}.attn", c, cfg.heads)
    p.put("unet.conv_out", init_conv(rng.child("unet.conv_out"), cfg.channels[0], cfg.latent_channels, 3))
    return p


def build_conditions(params: ParamStore, cfg: ModelConfig, raw: RawConditions) -> ConditionBundle:
    """Run the class-token MLP, style adapter and both adapter towers."""
    h_cls = encode_class_token(raw.cls_token, class_mlp_view(params, "style.cls_mlp"))
    h_patch = style_adapter(raw.patch_tokens, raw.vae_feature, style_adapter_view(params, "style.adapter", cfg.heads))
    latent_size = tuple(raw.z_inpaint.shape[1:])
    hf = adapter_tower(as_tensor(raw.hf_map), tower_view(params, "tower.hf"), latent_size)
    seg = adapter_tower(as_tensor(raw.seg_map), tower_view(params, "tower.seg"), latent_size)
    return ConditionBundle(h_cls, h_patch, hf, seg, raw.z_inpaint, raw.mask, raw.omega)


def timestep_embedding(t: int, dim: int) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / half)
    args = float(t) * freqs
    return torch.cat([torch.cos(args), torch.sin(args)])


def _resblock(params: ParamStore, prefix: str, h: Tensor, temb: Tensor) -> Tensor:
    r = conv2d(silu(h), params.conv(f"{prefix}.conv1"), padding=1)
    r = r + linear(temb, params.linear(f"{prefix}.temb"))[:, None, None]
    return h + conv2d(silu(r), params.conv(f"{prefix}.conv2"), padding=1)


def _attend(params: ParamStore, cfg: ModelConfig, prefix: str, h: Tensor, cond: ConditionBundle) -> Tensor:
    c, hh, ww = h.shape
    tokens = h.reshape(c, -1).T
    h_patch = linear(cond.h_patch, params.linear(f"{prefix}.ctx_patch"))
    h_cls = linear(cond.h_cls, params.linear(f"{prefix}.ctx_cls"))
    block, gate = attention_block_view(params, f"{prefix}.attn", cfg.heads)
    tokens = attention_block(tokens, h_patch, h_cls, gate, block)
    return tokens.T.reshape(c, hh, ww)


def predict_noise(params: ParamStore, cfg: ModelConfig, z_t: Tensor, t: int, cond: ConditionBundle) -> Tensor:
    x = denoiser_input(z_t, cond)
    temb = silu(linear(timestep_embedding(t, cfg.time_dim), params.linear("unet.time.0")))
    temb = linear(temb, params.linear("unet.time.1"))

    h = conv2d(x, params.conv("unet.conv_in"), padding=1)
    skips = []
    for i in range(NUM_SCALES):
        if i:
            h = conv2d(h, params.conv(f"unet.enc{i}.down"), stride=2, padding=1)
        h = _resblock(params, f"unet.enc{i}.res", h, temb)
        (h,) = fuse_conditions([h], [cond.seg[i]], [cond.hf[i]], cond.omega)
        h = _attend(params, cfg, f"unet.enc{i}", h, cond)
        skips.append(h)
    for i in range(NUM_SCALES - 2, -1, -1):
        skip = skips[i]
        h = F.interpolate(h.unsqueeze(0), size=skip.shape[1:], mode="nearest")[0]
        h = conv2d(torch.cat([h, skip], dim=0), params.conv(f"unet.dec{i}.merge"), padding=1)
        h = _resblock(params, f"unet.dec{i}.res", h, temb)
        h = _attend(params, cfg, f"unet.dec{i}", h, cond)
    return check_finite(conv2d(silu(h), params.conv("unet.conv_out"), padding=1), "eps prediction")


def make_denoiser(params: ParamStore, cfg: ModelConfig):
    def denoiser(z_t: Tensor, t: int, cond: ConditionBundle) -> Tensor:
        with torch.no_grad():
            return predict_noise(params, cfg, z_t, t, cond)

    return denoiser


def training_loss(
    params: ParamStore, cfg: ModelConfig, batch: Sequence[TrainingSample], sched: NoiseSchedule, denoiser=None
) -> Tensor:
    """Mean squared noise-prediction error, averaged over elements and batch.

    ``denoiser`` optionally replaces the UNet with any
    ``(params, z_t', t, bundle) -> eps`` callable (used for oracle checks).
    """
    if not batch:
        raise ValueError("empty batch")
    total = torch.zeros((), dtype=DTYPE)
    for s in batch:
        if s.eps.shape != s.z0.shape:
            raise ValueError("noise and latent shapes differ")
        z_t = forward_noise(s.z0, s.t, s.eps, sched)
        cond = build_conditions(params, cfg, s.raw)
        if denoiser is None:
            pred = predict_noise(params, cfg, z_t, s.t, cond)
        else:
            pred = denoiser(params, z_t, s.t, cond)
        total = total + ((s.eps - pred) ** 2).mean()
    return total / len(batch)


def train_step(
    params: ParamStore,
    cfg: ModelConfig,
    batch: Sequence[TrainingSample],
    sched: NoiseSchedule,
    learning_rate: float,
) -> tuple[ParamStore, float]:
    """One plain gradient-descent update of every parameter.

    Returns ``(new_params, loss_before_update)``.
    """
    try:
        return gradient_step(lambda p: training_loss(p, cfg, batch, sched), params, learning_rate)
    except NumericError as exc:
        raise NumericError(f"training aborted: {exc}") from exc


def random_raw_conditions(
    rng: Rng, cfg: ModelConfig, latent_size: tuple[int, int], n_patch: int = 4, vae_grid: int = 2
) -> RawConditions:
    """Random conditions with the shapes the model expects (for toy training)."""
    h, w = latent_size
    mask = (rng.uniform(0, 1, (1, h, w)) > 0.5).to(DTYPE)
    return RawConditions(
        cls_token=rng.normal((1, cfg.clip_dim)),
        patch_tokens=rng.normal((n_patch, cfg.clip_dim)),
        vae_feature=rng.normal((cfg.vae_channels, vae_grid, vae_grid)),
        hf_map=rng.uniform(0, 1, (cfg.hf_channels, 8 * h, 8 * w)),
        seg_map=rng.uniform(0, 1, (cfg.seg_channels, 8 * h, 8 * w)),
        z_inpaint=rng.normal((cfg.latent_channels, h, w)),
        mask=mask,
    )


def make_toy_batch(
    rng: Rng, cfg: ModelConfig, sched: NoiseSchedule, size: int, latent_size: tuple[int, int], **kwargs
) -> list[TrainingSample]:
    batch = []
    for _ in range(size):
        raw = random_raw_conditions(rng, cfg, latent_size, **kwargs)
        z0 = rng.normal((cfg.latent_channels, *latent_size))
        t = int(rng.integers(1, sched.T + 1))
        batch.append(TrainingSample(raw, z0, t, rng.normal(z0.shape)))
    return batch
