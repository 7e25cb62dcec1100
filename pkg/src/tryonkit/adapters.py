"""Identity-injection machinery: style tokens, gated attention, adapter towers.

Everything here is a pure function of explicit parameter dataclasses. The
``*_view`` helpers build those dataclasses from a flat :class:`ParamStore`
and the ``init_*`` helpers populate one with seeded weights.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .imaging import as_image
from .numerics import (
    DTYPE,
    AttnParams,
    ConvParams,
    FFNParams,
    LinearParams,
    ParamStore,
    Rng,
    Tensor,
    as_tensor,
    check_finite,
    conv2d,
    feed_forward,
    init_attention,
    init_conv,
    init_ffn,
    init_linear,
    linear,
    multi_head_attention,
    silu,
    softmax,
)

LATENT_FACTOR = 8
NUM_SCALES = 4
CLIP_DIM = 1024
CLIP_PATCH = 14
REFERENCE_SIZE = 224
VAE_CHANNELS = 4


@dataclass(frozen=True)
class StyleTokens:
    cls: Tensor  # [1, D]
    patch: Tensor  # [N, D]


@dataclass(frozen=True)
class GateParams:
    gamma: Tensor  # scalar, learnable, starts at 0
    beta: float = 1.0


@dataclass(frozen=True)
class StyleAdapterParams:
    vae_proj: LinearParams  # vae channels -> D
    attn: AttnParams
    ffn: FFNParams


@dataclass(frozen=True)
class AttentionBlockParams:
    self_attn: AttnParams
    gated_attn: AttnParams
    cross_attn: AttnParams


@dataclass(frozen=True)
class PAMParams:
    query: ConvParams
    key: ConvParams
    value: ConvParams
    scale: Tensor  # scalar residual scale, starts at 0


@dataclass(frozen=True)
class ResUnitParams:
    conv1: ConvParams
    conv2: ConvParams


@dataclass(frozen=True)
class TowerBlockParams:
    down: ConvParams
    res: tuple[ResUnitParams, ResUnitParams]
    pam: tuple[PAMParams, PAMParams]


@dataclass(frozen=True)
class TowerParams:
    blocks: tuple[TowerBlockParams, ...]


def _check_tokens(x: Tensor, dim: int, what: str) -> None:
    if x.dim() != 2 or x.shape[1] != dim:
        raise ValueError(f"{what} must be [N, {dim}], got {tuple(x.shape)}")


# --------------------------------------------------------------------------
# style preserving path


def encode_class_token(cls: Tensor, layers: Sequence[LinearParams]) -> Tensor:
    """Stack of linear layers with SiLU between consecutive layers."""
    if not layers:
        raise ValueError("class-token MLP needs at least one layer")
    _check_tokens(cls, layers[0].in_features, "class token")
    h = cls
    for i, layer in enumerate(layers):
        if i:
            h = silu(h)
        h = linear(h, layer)
    return check_finite(h, "h_cls")


def flatten_vae_feature(vae: Tensor) -> Tensor:
    """``[C, H, W]`` grid to ``[H*W, C]`` spatial tokens (row-major positions)."""
    if vae.dim() != 3:
        raise ValueError(f"VAE feature must be [C, H, W], got {tuple(vae.shape)}")
    return vae.reshape(vae.shape[0], -1).T


def style_adapter(patch: Tensor, vae: Tensor, params: StyleAdapterParams) -> Tensor:
    """Fuse CLIP patch tokens with projected VAE tokens (two residual stages)."""
    dim = params.attn.q.in_features
    _check_tokens(patch, dim, "patch tokens")
    tokens = flatten_vae_feature(vae)
    if tokens.shape[1] != params.vae_proj.in_features:
        raise ValueError(
            f"VAE feature has {tokens.shape[1]} channels, projection expects {params.vae_proj.in_features}"
        )
    vae_tokens = linear(tokens, params.vae_proj)
    fused = multi_head_attention(patch, vae_tokens, vae_tokens, params.attn) + patch
    return check_finite(feed_forward(fused, params.ffn) + fused, "h_patch")


def attention_block(
    v: Tensor,
    h_patch: Tensor,
    h_cls: Tensor,
    gate: GateParams | None,
    params: AttentionBlockParams,
) -> Tensor:
    """Self-attention, gated self-attention over ``[v, h_patch]``, cross-attention on ``h_cls``.

    ``gate=None`` drops the gated layer entirely (the ungated reference block).
    Only the ``v`` rows of the gated layer's output are used, so it is computed
    with ``v`` as queries against the concatenated keys/values.
    """
    dim = params.self_attn.q.in_features
    _check_tokens(v, dim, "visual tokens")
    _check_tokens(h_patch, dim, "h_patch")
    _check_tokens(h_cls, dim, "h_cls")
    v = v + multi_head_attention(v, v, v, params.self_attn)
    if gate is not None:
        ctx = torch.cat([v, h_patch], dim=0)
        v = v + gate.beta * torch.tanh(gate.gamma) * multi_head_attention(v, ctx, ctx, params.gated_attn)
    v = v + multi_head_attention(v, h_cls, h_cls, params.cross_attn)
    return check_finite(v, "attention block output")


# --------------------------------------------------------------------------
# texture / segmentation adapter towers


def position_attention(feat: Tensor, params: PAMParams) -> Tensor:
    """Spatial self-attention over pixel positions with a scaled residual."""
    if feat.dim() != 3:
        raise ValueError(f"position attention expects [C, H, W], got {tuple(feat.shape)}")
    c, h, w = feat.shape
    q = conv2d(feat, params.query).reshape(-1, h * w)  # [Cq, N]
    k = conv2d(feat, params.key).reshape(-1, h * w)
    val = conv2d(feat, params.value).reshape(c, h * w)
    affinity = softmax(q.T @ k, dim=-1)  # [N, N], row i attends over positions j
    out = (val @ affinity.T).reshape(c, h, w)
    return check_finite(params.scale * out + feat, "position attention output")


def res_unit(x: Tensor, params: ResUnitParams) -> Tensor:
    return x + conv2d(silu(conv2d(x, params.conv1, padding=1)), params.conv2, padding=1)


def pixel_unshuffle(x: Tensor, factor: int) -> Tensor:
    return F.pixel_unshuffle(x.unsqueeze(0), factor)[0]


def adapter_tower(cond, params: TowerParams, latent_size: tuple[int, int] | None = None) -> tuple[Tensor, ...]:
    """Encode a pixel-space condition into features at strides 1, 2, 4, 8 of the latent grid.

    The first block sees the condition pixel-unshuffled by 8 (so it already
    sits on the latent grid); later blocks downsample by stride-2 convs.
    """
    x = as_tensor(cond if isinstance(cond, torch.Tensor) else as_image(cond))
    if x.dim() != 3:
        raise ValueError(f"condition must be [C, H, W], got {tuple(x.shape)}")
    h, w = x.shape[1:]
    step = LATENT_FACTOR * 2 ** (len(params.blocks) - 1)
    if h % step or w % step:
        raise ValueError(f"condition extents {h}x{w} must be multiples of {step}")
    if latent_size is not None and (h, w) != (latent_size[0] * LATENT_FACTOR, latent_size[1] * LATENT_FACTOR):
        raise ValueError(f"condition extents {h}x{w} do not match latent grid {latent_size} x {LATENT_FACTOR}")
    x = pixel_unshuffle(x, LATENT_FACTOR)
    feats = []
    for i, block in enumerate(params.blocks):
        x = conv2d(x, block.down, stride=1 if i == 0 else 2, padding=block.down.kernel // 2)
        for unit in block.res:
            x = res_unit(x, unit)
        for pam in block.pam:
            x = position_attention(x, pam)
        feats.append(x)
    return tuple(feats)


def fuse_conditions(enc: Sequence[Tensor], seg: Sequence[Tensor], hf: Sequence[Tensor], omega: float) -> tuple[Tensor, ...]:
    """``F_enc + omega * F_seg + (1 - omega) * F_HF`` at every scale."""
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"omega must lie in [0, 1], got {omega}")
    if not len(enc) == len(seg) == len(hf):
        raise ValueError("feature pyramids have different numbers of scales")
    out = []
    for i, (e, s, t) in enumerate(zip(enc, seg, hf)):
        if e.shape != s.shape or e.shape != t.shape:
            raise ValueError(
                f"scale {i}: shapes {tuple(e.shape)}, {tuple(s.shape)}, {tuple(t.shape)} differ"
            )
        out.append(e + omega * s + (1.0 - omega) * t)
    return tuple(out)


# --------------------------------------------------------------------------
# seeded encoder stand-ins


def _patchify(img: np.ndarray, patch: int) -> np.ndarray:
    c, h, w = img.shape
    gh, gw = h // patch, w // patch
    x = img.reshape(c, gh, patch, gw, patch).transpose(1, 3, 0, 2, 4)
    return x.reshape(gh * gw, c * patch * patch)


def _check_reference(img, size: int) -> np.ndarray:
    img = as_image(img)
    if img.shape != (3, size, size):
        raise ValueError(f"reference image must be 3x{size}x{size}, got {img.shape}")
    return img


def clip_stub(
    img, seed: int, dim: int = CLIP_DIM, patch: int = CLIP_PATCH, size: int = REFERENCE_SIZE
) -> StyleTokens:
    """Deterministic CLIP-shaped tokens: patch projection plus a pooled class token."""
    img = _check_reference(img, size)
    patches = torch.from_numpy(_patchify(img, patch))
    rng = Rng(seed)
    fan = patches.shape[1]
    w_patch = rng.child("clip.patch").normal((fan, dim)) / math.sqrt(fan)
    pos = rng.child("clip.pos").normal((patches.shape[0], dim)) * 0.02
    w_cls = rng.child("clip.cls").normal((fan, dim)) / math.sqrt(fan)
    tokens = patches @ w_patch + pos
    cls = patches.mean(dim=0, keepdim=True) @ w_cls
    return StyleTokens(cls=cls, patch=tokens)


def vae_stub(img, seed: int, channels: int = VAE_CHANNELS, factor: int = LATENT_FACTOR, size: int = REFERENCE_SIZE) -> Tensor:
    """Deterministic VAE-shaped feature ``[channels, size/f, size/f]``."""
    img = _check_reference(img, size)
    g = size // factor
    patches = torch.from_numpy(_patchify(img, factor))
    fan = patches.shape[1]
    w = Rng(seed).child("vae.proj").normal((fan, channels)) / math.sqrt(fan)
    return (patches @ w).T.reshape(channels, g, g).contiguous()


# --------------------------------------------------------------------------
# initialization and views


def init_class_mlp(rng: Rng, store: ParamStore, prefix: str, dim: int, layers: int = 3) -> None:
    for i in range(layers):
        store.put(f"{prefix}.{i}", init_linear(rng.child(f"{prefix}.{i}"), dim, dim))


def class_mlp_view(store: ParamStore, prefix: str) -> tuple[LinearParams, ...]:
    n = 0
    while f"{prefix}.{n}.weight" in store:
        n += 1
    return tuple(store.linear(f"{prefix}.{i}") for i in range(n))


def init_style_adapter(
    rng: Rng, store: ParamStore, prefix: str, dim: int, heads: int, vae_channels: int = VAE_CHANNELS
) -> None:
    store.put(f"{prefix}.vae_proj", init_linear(rng.child(f"{prefix}.vae_proj"), vae_channels, dim))
    store.put(f"{prefix}.attn", init_attention(rng.child(f"{prefix}.attn"), dim, heads))
    store.put(f"{prefix}.ffn", init_ffn(rng.child(f"{prefix}.ffn"), dim, dim))


def style_adapter_view(store: ParamStore, prefix: str, heads: int) -> StyleAdapterParams:
    return StyleAdapterParams(
        store.linear(f"{prefix}.vae_proj"), store.attention(f"{prefix}.attn", heads), store.ffn(f"{prefix}.ffn")
    )


def init_attention_block(rng: Rng, store: ParamStore, prefix: str, dim: int, heads: int) -> None:
    for name in ("self_attn", "gated_attn", "cross_attn"):
        store.put(f"{prefix}.{name}", init_attention(rng.child(f"{prefix}.{name}"), dim, heads))
    store[f"{prefix}.gamma"] = torch.zeros((), dtype=DTYPE)


def attention_block_view(store: ParamStore, prefix: str, heads: int) -> tuple[AttentionBlockParams, GateParams]:
    params = AttentionBlockParams(
        store.attention(f"{prefix}.self_attn", heads),
        store.attention(f"{prefix}.gated_attn", heads),
        store.attention(f"{prefix}.cross_attn", heads),
    )
    return params, GateParams(store[f"{prefix}.gamma"])


def init_pam(rng: Rng, store: ParamStore, prefix: str, channels: int) -> None:
    inner = max(1, channels // 8)
    store.put(f"{prefix}.query", init_conv(rng.child(f"{prefix}.query"), channels, inner, 1))
    store.put(f"{prefix}.key", init_conv(rng.child(f"{prefix}.key"), channels, inner, 1))
    store.put(f"{prefix}.value", init_conv(rng.child(f"{prefix}.value"), channels, channels, 1))
    store[f"{prefix}.scale"] = torch.zeros((), dtype=DTYPE)


def pam_view(store: ParamStore, prefix: str) -> PAMParams:
    return PAMParams(
        store.conv(f"{prefix}.query"), store.conv(f"{prefix}.key"), store.conv(f"{prefix}.value"), store[f"{prefix}.scale"]
    )


def init_tower(rng: Rng, store: ParamStore, prefix: str, in_channels: int, channels: Sequence[int]) -> None:
    if len(channels) != NUM_SCALES:
        raise ValueError(f"tower needs {NUM_SCALES} channel counts, got {len(channels)}")
    c_prev = in_channels * LATENT_FACTOR**2
    for b, c in enumerate(channels):
        p = f"{prefix}.{b}"
        store.put(f"{p}.down", init_conv(rng.child(f"{p}.down"), c_prev, c, 3))
        for r in range(2):
            store.put(f"{p}.res{r}.conv1", init_conv(rng.child(f"{p}.res{r}.conv1"), c, c, 3))
            store.put(f"{p}.res{r}.conv2", init_conv(rng.child(f"{p}.res{r}.conv2"), c, c, 3))
        for a in range(2):
            init_pam(rng, store, f"{p}.pam{a}", c)
        c_prev = c


def tower_view(store: ParamStore, prefix: str) -> TowerParams:
    blocks = []
    b = 0
    while f"{prefix}.{b}.down.weight" in store:
        p = f"{prefix}.{b}"
        res = tuple(ResUnitParams(store.conv(f"{p}.res{r}.conv1"), store.conv(f"{p}.res{r}.conv2")) for r in range(2))
        pam = tuple(pam_view(store, f"{p}.pam{a}") for a in range(2))
        blocks.append(TowerBlockParams(store.conv(f"{p}.down"), res, pam))
        b += 1
    return TowerParams(tuple(blocks))
