"""End-to-end orchestration: conditioning maps, sampling, blending and the self-test run."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .adapters import REFERENCE_SIZE, clip_stub, vae_stub
from .blending import AutoencoderStub, BlendExample, blend_view, decode_with_elbm, init_blend, ssim, train_elbm
from .config import PipelineConfig, save_config
from .denoiser import RawConditions, build_conditions, init_params, make_denoiser
from .diffusion import RepaintConfig, compose_inpaint_input, latent_mask, make_schedule, t_repaint_sample
from .fixtures import PersonFixture, person_fixture
from .imaging import (
    as_image,
    as_mask,
    default_erosion_radius,
    resize_image,
    texture_highlight_map,
    write_image,
    write_mask,
)
from .numerics import ParamStore, Rng, Tensor
from .segmentation import labelmap_to_image, miou, recompose_segmentation, write_labelmap
from .tensorio import atomic_write_bytes, save_checkpoint, write_tensor

BLEND_PREFIX = "elbm"
BLEND_LR = 3e-3


@dataclass(frozen=True)
class TryOnInputs:
    reference: np.ndarray  # target garment, any size (resized for the encoders)
    agnostic: np.ndarray  # person with the garment region removed
    warped: np.ndarray  # garment pre-warped onto the person
    warp_mask: np.ndarray
    mask: np.ndarray  # inpaint region
    segmap: np.ndarray  # recomposed label map

    def check_extents(self, cfg: PipelineConfig) -> None:
        expected = (cfg.height, cfg.width)
        for name in ("agnostic", "warped", "warp_mask", "mask", "segmap"):
            shape = np.shape(getattr(self, name))[-2:]
            if tuple(shape) != expected:
                raise ValueError(f"{name} is {shape[0]}x{shape[1]} but the config expects {expected[0]}x{expected[1]}")


def erosion_radius(cfg: PipelineConfig) -> int:
    if cfg.erosion_radius is not None:
        return cfg.erosion_radius
    return default_erosion_radius(cfg.height, cfg.width)


def hf_map(cfg: PipelineConfig, warped, warp_mask) -> np.ndarray:
    return texture_highlight_map(warped, warp_mask, erosion_radius(cfg))


def autoencoder(cfg: PipelineConfig) -> AutoencoderStub:
    return AutoencoderStub.create(cfg.seed, latent_channels=cfg.model.latent_channels)


def raw_conditions(cfg: PipelineConfig, inputs: TryOnInputs, ae: AutoencoderStub) -> RawConditions:
    inputs.check_extents(cfg)
    ref = resize_image(inputs.reference, (REFERENCE_SIZE, REFERENCE_SIZE))
    tokens = clip_stub(ref, cfg.seed, dim=cfg.model.clip_dim)
    vae = vae_stub(ref, cfg.seed, channels=cfg.model.vae_channels)
    inpaint = compose_inpaint_input(inputs.agnostic, inputs.warped, inputs.warp_mask)
    z_inpaint, _ = ae.encode(inpaint)
    return RawConditions(
        cls_token=tokens.cls,
        patch_tokens=tokens.patch,
        vae_feature=vae,
        hf_map=torch.from_numpy(hf_map(cfg, inputs.warped, inputs.warp_mask)),
        seg_map=torch.from_numpy(labelmap_to_image(inputs.segmap)),
        z_inpaint=z_inpaint,
        mask=latent_mask(inputs.mask, cfg.latent_size),
        omega=cfg.omega,
    )


def sample_latent(cfg: PipelineConfig, inputs: TryOnInputs, params: ParamStore | None = None) -> Tensor:
    """Stub encoders, adapters and fusion, then T-RePaint sampling; returns ``z_0``."""
    ae = autoencoder(cfg)
    if params is None:
        params = init_params(cfg.model, cfg.seed)
    with torch.no_grad():
        cond = build_conditions(params, cfg.model, raw_conditions(cfg, inputs, ae))
        z_cw, _ = ae.encode(as_image(inputs.warped))
        rp = RepaintConfig(cfg.repaint_cutoff, z_cw, latent_mask(inputs.warp_mask, cfg.latent_size))
        rng = Rng(cfg.seed)
        z_T = rng.child("sample.initial").normal(tuple(z_cw.shape))
        sched = make_schedule(cfg.steps)
        return t_repaint_sample(z_T, cond, rp, make_denoiser(params, cfg.model), sched, rng.child("sample.repaint"))


def blend_params(cfg: PipelineConfig, ae: AutoencoderStub, params: ParamStore | None = None) -> ParamStore:
    """Blending weights from ``params`` when they contain them, else the zero-residual init."""
    if params is not None and any(k.startswith(BLEND_PREFIX + ".") for k in params):
        return params
    store = ParamStore()
    init_blend(store, Rng(cfg.seed).child("blend"), ae.channels, prefix=BLEND_PREFIX)
    return store


def blend_image(cfg: PipelineConfig, image, latent: Tensor, mask, params: ParamStore | None = None) -> np.ndarray:
    """Decode ``latent`` with encoder skips from the original ``image`` outside ``mask``."""
    img = as_image(image)
    m = as_mask(mask)
    if img.shape[1:] != m.shape:
        raise ValueError(f"image {img.shape[1:]} and mask {m.shape} extents differ")
    ae = autoencoder(cfg)
    expected = (ae.latent_channels, img.shape[1] // 8, img.shape[2] // 8)
    if tuple(latent.shape) != expected:
        raise ValueError(f"latent {tuple(latent.shape)} does not match image-derived shape {expected}")
    _, feats = ae.encode(img)
    store = blend_params(cfg, ae, params)
    return decode_with_elbm(latent, feats, m, ae, blend_view(store, BLEND_PREFIX))


def fixture_inputs(cfg: PipelineConfig, fx: PersonFixture) -> TryOnInputs:
    seg = recompose_segmentation(fx.agnostic_parse, fx.warp_mask, fx.densepose, cfg.min_component)
    return TryOnInputs(fx.reference, fx.agnostic, fx.warped, fx.warp_mask, fx.garment_mask, seg)


def selftest(cfg: PipelineConfig, out_dir: str | os.PathLike, blend_epochs: int = 5) -> dict:
    """Run every stage on the procedural fixture and write all artifacts to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fx = person_fixture(cfg.height, cfg.width, cfg.seed)
    save_config(out / "config.json", cfg)
    write_image(out / "person.png", fx.person)
    write_image(out / "agnostic.png", fx.agnostic)
    write_image(out / "reference.png", fx.reference)
    write_image(out / "warped.png", fx.warped)
    write_mask(out / "warp_mask.png", fx.warp_mask)
    write_mask(out / "mask.png", fx.garment_mask)
    write_labelmap(out / "agnostic_parse.png", fx.agnostic_parse)
    write_labelmap(out / "densepose.png", fx.densepose)

    inputs = fixture_inputs(cfg, fx)
    write_image(out / "hfmap.png", hf_map(cfg, fx.warped, fx.warp_mask))
    write_labelmap(out / "segmap.png", inputs.segmap)

    z0 = sample_latent(cfg, inputs)
    write_tensor(out / "latent.ttf", z0)

    ae = autoencoder(cfg)
    store = blend_params(cfg, ae)
    store, history = train_elbm(store, [BlendExample(fx.person, fx.garment_mask)], ae, BLEND_LR, blend_epochs, BLEND_PREFIX)
    save_checkpoint(out / "blend", store)
    final = blend_image(cfg, fx.person, z0, fx.garment_mask, store)
    write_image(out / "final.png", final)

    metrics = {
        "ssim_final_vs_person": round(ssim(final, fx.person), 6),
        "miou_segmap_vs_parse": round(miou(inputs.segmap, fx.parse, "all_excluding_neck"), 6),
        "blend_loss": [round(x, 9) for x in history],
    }
    atomic_write_bytes(out / "metrics.json", (json.dumps(metrics, indent=2, sort_keys=True) + "\n").encode())
    return metrics
