"""Forward noising, deterministic reverse steps and time-partial RePaint sampling.

A *denoiser* is any callable ``(z_t, t, cond) -> eps_hat``; the toy UNet in
:mod:`tryonkit.denoiser` provides one, and tests plug in oracle denoisers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .imaging import as_image, as_mask, resize_mask
from .numerics import DTYPE, Rng, Tensor, check_finite

DEFAULT_STEPS = 100
DEFAULT_REPAINT_CUTOFF = 50
DEFAULT_BETA_START = 0.0085
DEFAULT_BETA_END = 0.095


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: Tensor  # [T + 1], alpha_bar[0] == 1

    def __post_init__(self):
        ab = self.alpha_bar
        if ab.dim() != 1 or ab.numel() < 2:
            raise ValueError("alpha_bar must be a 1-D table with at least 2 entries")
        if ab[0].item() != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if (ab <= 0).any() or (ab > 1).any():
            raise ValueError("alpha_bar entries must lie in (0, 1]")
        if (ab[1:] > ab[:-1]).any():
            raise ValueError("alpha_bar must be non-increasing in t")

    @property
    def T(self) -> int:
        return self.alpha_bar.numel() - 1

    def __getitem__(self, t: int) -> float:
        return float(self.alpha_bar[t])


def make_schedule(
    T: int = DEFAULT_STEPS, beta_start: float = DEFAULT_BETA_START, beta_end: float = DEFAULT_BETA_END
) -> NoiseSchedule:
    """Linear beta ramp over ``T`` steps; ``alpha_bar_t = prod_{s<=t} (1 - beta_s)``."""
    if T < 1:
        raise ValueError("schedule needs T >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = torch.linspace(beta_start, beta_end, T, dtype=DTYPE) if T > 1 else torch.tensor([beta_start], dtype=DTYPE)
    ab = torch.cat([torch.ones(1, dtype=DTYPE), torch.cumprod(1.0 - betas, dim=0)])
    return NoiseSchedule(ab)


@dataclass(frozen=True)
class ConditionBundle:
    """All conditions for one sample: style tokens, adapter pyramids, inpaint latent and mask."""

    h_cls: Tensor  # [1, Dc]
    h_patch: Tensor  # [N, Dc]
    hf: tuple[Tensor, ...]
    seg: tuple[Tensor, ...]
    z_inpaint: Tensor  # [4, h, w]
    mask: Tensor  # [1, h, w] in {0, 1}
    omega: float = 0.5


@dataclass(frozen=True)
class RepaintConfig:
    t_prime: int
    z_cw_init: Tensor  # [C, h, w]
    keep_mask: Tensor  # [1, h, w] in {0, 1}

    def __post_init__(self):
        if self.t_prime < 1:
            raise ValueError("repaint cutoff must be >= 1")
        if self.keep_mask.dim() != 3 or self.keep_mask.shape[0] != 1:
            raise ValueError(f"keep mask must be [1, h, w], got {tuple(self.keep_mask.shape)}")
        if self.keep_mask.shape[1:] != self.z_cw_init.shape[1:]:
            raise ValueError(
                f"keep mask {tuple(self.keep_mask.shape[1:])} and warped latent "
                f"{tuple(self.z_cw_init.shape[1:])} extents differ"
            )
        if not ((self.keep_mask == 0) | (self.keep_mask == 1)).all():
            raise ValueError("keep mask must be binary")


Denoiser = Callable[[Tensor, int, ConditionBundle], Tensor]


def latent_mask(mask, latent_size: Sequence[int]) -> Tensor:
    """Nearest-neighbour resample of a pixel mask onto the latent grid, ``[1, h, w]``."""
    m = resize_mask(as_mask(mask), tuple(latent_size))
    return torch.from_numpy(m.astype(np.float64))[None]


def compose_inpaint_input(agnostic, warped, mask) -> np.ndarray:
    """Agnostic image plus the warped garment (restricted to its mask), clamped to [0, 1]."""
    a = as_image(agnostic)
    w = as_image(warped)
    m = as_mask(mask)
    if a.shape != w.shape or a.shape[1:] != m.shape:
        raise ValueError(f"extents differ: agnostic {a.shape}, warped {w.shape}, mask {m.shape}")
    return np.clip(a + w * m[None], 0.0, 1.0)


def denoiser_input(z_t: Tensor, cond: ConditionBundle) -> Tensor:
    """Channel concatenation ``[z_t, z_inpaint, mask]``."""
    if z_t.shape[1:] != cond.z_inpaint.shape[1:] or z_t.shape[1:] != cond.mask.shape[1:]:
        raise ValueError(
            f"latent {tuple(z_t.shape)}, inpaint latent {tuple(cond.z_inpaint.shape)} and mask "
            f"{tuple(cond.mask.shape)} disagree on extents"
        )
    return torch.cat([z_t, cond.z_inpaint, cond.mask], dim=0)


def forward_noise(z0: Tensor, t: int, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    if not 0 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [0, {sched.T}]")
    if z0.shape != eps.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z0.shape)}")
    ab = sched[t]
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def denoise_step(z_t: Tensor, cond: ConditionBundle, t: int, denoiser: Denoiser, sched: NoiseSchedule) -> Tensor:
    """Predict eps, reconstruct z0 and re-noise it to ``t - 1`` with the same eps."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")
    eps = denoiser(z_t, t, cond)
    ab_t, ab_prev = sched[t], sched[t - 1]
    z0_hat = (z_t - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    return check_finite(math.sqrt(ab_prev) * z0_hat + math.sqrt(1.0 - ab_prev) * eps, f"z_{t - 1}")


def sample(zT: Tensor, cond: ConditionBundle, denoiser: Denoiser, sched: NoiseSchedule) -> Tensor:
    z = zT
    for t in range(sched.T, 0, -1):
        z = denoise_step(z, cond, t, denoiser, sched)
    return z


def t_repaint_sample(
    zT: Tensor,
    cond: ConditionBundle,
    rp: RepaintConfig,
    denoiser: Denoiser,
    sched: NoiseSchedule,
    rng: Rng,
    trace: list | None = None,
) -> Tensor:
    """Reverse diffusion that pastes the re-noised warped latent under the keep
    mask for ``t_prime <= t < T`` and denoises freely afterwards.

    Fresh noise for the warped latent is drawn from ``rng`` at every composed
    step. If ``trace`` is a list, ``(t, z_{t-1}, z^cw_{t-1} or None)`` tuples
    are appended to it.
    """
    if rp.t_prime > sched.T:
        raise ValueError(f"repaint cutoff {rp.t_prime} exceeds T={sched.T}")
    if rp.z_cw_init.shape != zT.shape:
        raise ValueError(f"warped latent {tuple(rp.z_cw_init.shape)} != latent {tuple(zT.shape)}")
    keep = rp.keep_mask.bool()
    z = zT
    for t in range(sched.T, 0, -1):
        z_unkn = denoise_step(z, cond, t, denoiser, sched)
        z_cw = None
        if rp.t_prime <= t < sched.T:
            z_cw = forward_noise(rp.z_cw_init, t - 1, rng.normal(zT.shape), sched)
            z = torch.where(keep, z_cw, z_unkn)
        else:
            z = z_unkn
        if trace is not None:
            trace.append((t, z, z_cw))
    return z
