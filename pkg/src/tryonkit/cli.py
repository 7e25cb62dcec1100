"""Command-line entry point: ``tryonkit <subcommand>``.

Exit status 0 on success, 2 for input errors (missing or malformed files,
inconsistent extents, invalid options) and 3 for numeric failures.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

from . import pipeline
from .blending import ssim
from .config import PipelineConfig, apply_env, load_config
from .diffusion import DEFAULT_STEPS
from .imaging import default_erosion_radius, read_image, read_mask, texture_highlight_map, write_image
from .numerics import NumericError
from .segmentation import DEFAULT_MIN_COMPONENT, miou, read_labelmap, recompose_segmentation, write_labelmap
from .tensorio import load_checkpoint, read_tensor, write_tensor

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

log = logging.getLogger("tryonkit")


class InputError(ValueError):
    pass


def _workers(n: int) -> int:
    return max(1, min(n, os.cpu_count() or 1))


def _map_pool(fn: Callable, items: Sequence) -> list:
    """Apply ``fn`` to independent items in a thread pool, preserving order."""
    if len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=_workers(len(items))) as pool:
        return list(pool.map(fn, items))


def _same_length(**lists: Sequence) -> int:
    lengths = {k: len(v) for k, v in lists.items()}
    if len(set(lengths.values())) != 1:
        raise InputError(f"options must be repeated the same number of times: {lengths}")
    return next(iter(lengths.values()))


def _config(args: argparse.Namespace) -> tuple[PipelineConfig, bool]:
    """Config from ``--config`` (or defaults), then TRYON_SEED, then explicit flags."""
    explicit = args.config is not None
    cfg = load_config(args.config) if explicit else PipelineConfig()
    cfg = apply_env(cfg)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        changes["steps"] = args.steps
        if getattr(args, "repaint_cutoff", None) is None:
            changes["repaint_cutoff"] = max(1, args.steps // 2)
    if getattr(args, "repaint_cutoff", None) is not None:
        changes["repaint_cutoff"] = args.repaint_cutoff
    if getattr(args, "omega", None) is not None:
        changes["omega"] = args.omega
    if getattr(args, "radius", None) is not None:
        changes["erosion_radius"] = args.radius
    if getattr(args, "threshold", None) is not None:
        changes["min_component"] = args.threshold
    return (cfg.replace(**changes) if changes else cfg), explicit


def _fit_extents(cfg: PipelineConfig, explicit: bool, shape: Sequence[int]) -> PipelineConfig:
    """Adopt the input extents unless a config file fixed them; then they must agree."""
    h, w = int(shape[-2]), int(shape[-1])
    if (cfg.height, cfg.width) == (h, w):
        return cfg
    if explicit:
        raise InputError(f"inputs are {h}x{w} but the config declares {cfg.height}x{cfg.width}")
    return cfg.replace(height=h, width=w)


# --------------------------------------------------------------------------
# subcommands


def cmd_hfmap(args: argparse.Namespace) -> int:
    n = _same_length(garment=args.garment, mask=args.mask, out=args.out)
    cfg, explicit = _config(args)

    def run(i: int) -> None:
        garment = read_image(args.garment[i])
        mask = read_mask(args.mask[i])
        if explicit:
            _fit_extents(cfg, True, mask.shape)
        radius = cfg.erosion_radius
        if radius is None:
            radius = default_erosion_radius(*mask.shape)
        write_image(args.out[i], texture_highlight_map(garment, mask, radius))

    _map_pool(run, range(n))
    return EXIT_OK


def cmd_segmap(args: argparse.Namespace) -> int:
    n = _same_length(agnostic=args.agnostic, warp_mask=args.warp_mask, densepose=args.densepose, out=args.out)
    cfg, explicit = _config(args)

    def run(i: int) -> None:
        agnostic = read_labelmap(args.agnostic[i])
        if explicit:
            _fit_extents(cfg, True, agnostic.shape)
        seg = recompose_segmentation(agnostic, read_mask(args.warp_mask[i]), read_labelmap(args.densepose[i]), cfg.min_component)
        write_labelmap(args.out[i], seg)

    _map_pool(run, range(n))
    return EXIT_OK


def cmd_sample(args: argparse.Namespace) -> int:
    cfg, explicit = _config(args)
    mask = read_mask(args.mask)
    cfg = _fit_extents(cfg, explicit, mask.shape)
    inputs = pipeline.TryOnInputs(
        reference=read_image(args.reference, channels=3),
        agnostic=read_image(args.agnostic, channels=3),
        warped=read_image(args.warped, channels=3),
        warp_mask=read_mask(args.warp_mask),
        mask=mask,
        segmap=read_labelmap(args.segmap),
    )
    params = load_checkpoint(args.params) if args.params else None
    z0 = pipeline.sample_latent(cfg, inputs, params)
    write_tensor(args.out, z0)
    return EXIT_OK


def cmd_blend(args: argparse.Namespace) -> int:
    cfg, explicit = _config(args)
    image = read_image(args.image, channels=3)
    cfg = _fit_extents(cfg, explicit, image.shape)
    latent = read_tensor(args.latent)
    params = load_checkpoint(args.params) if args.params else None
    write_image(args.out, pipeline.blend_image(cfg, image, latent, read_mask(args.mask), params))
    return EXIT_OK


def _score_pair(metric: str, region: str, a: str, b: str) -> float:
    if metric == "ssim":
        return ssim(read_image(a), read_image(b))
    return miou(read_labelmap(a), read_labelmap(b), region)


def cmd_eval(args: argparse.Namespace) -> int:
    if not args.pair:
        raise InputError("at least one --pair A B is required")
    scores = _map_pool(lambda p: _score_pair(args.metric, args.region, *p), args.pair)
    for s in scores:
        print(f"{s:.6f}")
    return EXIT_OK


def cmd_selftest(args: argparse.Namespace) -> int:
    cfg, _ = _config(args)
    metrics = pipeline.selftest(cfg, args.out, blend_epochs=args.blend_epochs)
    for key in sorted(metrics):
        value = metrics[key]
        if isinstance(value, float):
            print(f"{key} {value:.6f}")
    print(f"artifacts written to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", help="pipeline config JSON")
    if seed:
        p.add_argument("--seed", type=int, help="overrides the config seed and TRYON_SEED")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tryonkit", description="Desk-scale adapter-conditioned try-on pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("hfmap", help="texture highlighting map of a warped garment")
    p.add_argument("--garment", action="append", required=True, help="warped garment PNG (repeatable)")
    p.add_argument("--mask", action="append", required=True, help="warped garment mask PNG (repeatable)")
    p.add_argument("--out", action="append", required=True, help="output PNG (repeatable)")
    p.add_argument("--radius", type=int, help="erosion radius in pixels (default scales with image size)")
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_hfmap)

    p = sub.add_parser("segmap", help="recompose the target segmentation map")
    p.add_argument("--agnostic", action="append", required=True, help="agnostic parse PNG (repeatable)")
    p.add_argument("--warp-mask", action="append", required=True, help="warped garment mask PNG (repeatable)")
    p.add_argument("--densepose", action="append", required=True, help="densepose label PNG (repeatable)")
    p.add_argument("--out", action="append", required=True, help="output label PNG (repeatable)")
    p.add_argument("--threshold", type=int, help=f"minimum component size (default {DEFAULT_MIN_COMPONENT})")
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_segmap)

    p = sub.add_parser("sample", help="sample a try-on latent with time-partial repainting")
    p.add_argument("--reference", required=True, help="target garment PNG")
    p.add_argument("--agnostic", required=True, help="clothing-agnostic person PNG")
    p.add_argument("--warped", required=True, help="warped garment PNG")
    p.add_argument("--warp-mask", required=True, help="warped garment mask PNG")
    p.add_argument("--mask", required=True, help="inpaint mask PNG")
    p.add_argument("--segmap", required=True, help="recomposed label PNG")
    p.add_argument("--out", required=True, help="output latent (.ttf)")
    p.add_argument("--params", help="model checkpoint directory (default: seeded init)")
    p.add_argument("--steps", type=int, help=f"diffusion steps (default {DEFAULT_STEPS})")
    p.add_argument("--repaint-cutoff", type=int, help="last repainted step (default steps/2)")
    p.add_argument("--omega", type=float, help="segmentation vs texture weight (default 0.5)")
    p.add_argument("--radius", type=int, help="erosion radius for the texture map")
    _add_common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("blend", help="decode a latent with background blending")
    p.add_argument("--image", required=True, help="original person PNG")
    p.add_argument("--latent", required=True, help="generated latent (.ttf)")
    p.add_argument("--mask", required=True, help="garment mask PNG")
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--params", help="checkpoint directory with blending weights")
    _add_common(p)
    p.set_defaults(func=cmd_blend)

    p = sub.add_parser("eval", help="score image or label-map pairs")
    p.add_argument("--metric", choices=("ssim", "miou"), required=True)
    p.add_argument("--pair", nargs=2, action="append", metavar=("A", "B"), help="pair to score (repeatable)")
    p.add_argument("--region", choices=("cloth_only", "all_excluding_neck"), default="cloth_only", help="labels scored by miou")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", help="run the whole pipeline on the built-in fixture")
    p.add_argument("--out", required=True, help="artifact directory")
    p.add_argument("--blend-epochs", type=int, default=5, help="blending training epochs (default 5)")
    _add_common(p)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"tryonkit: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        # FileNotFoundError and PIL's UnidentifiedImageError are OSErrors;
        # JSONDecodeError is a ValueError
        log.debug("input error", exc_info=True)
        print(f"tryonkit: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
