"""Pipeline configuration: defaults, validation, JSON round-trip and seed override."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .adapters import LATENT_FACTOR
from .denoiser import ModelConfig
from .diffusion import DEFAULT_REPAINT_CUTOFF, DEFAULT_STEPS
from .segmentation import DEFAULT_MIN_COMPONENT
from .tensorio import atomic_write_bytes

SCHEMA_VERSION = 1
SEED_ENV = "TRYON_SEED"
# four stride-2 tower scales on top of the f = 8 latent grid
EXTENT_MULTIPLE = LATENT_FACTOR * 8


@dataclass(frozen=True)
class PipelineConfig:
    height: int = 256
    width: int = 192
    steps: int = DEFAULT_STEPS
    repaint_cutoff: int = DEFAULT_REPAINT_CUTOFF
    omega: float = 0.5
    erosion_radius: int | None = None  # None: scaled default for the image size
    min_component: int = DEFAULT_MIN_COMPONENT
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    paths: dict[str, str] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema {self.schema_version}; expected {SCHEMA_VERSION}")
        if self.height < EXTENT_MULTIPLE or self.width < EXTENT_MULTIPLE:
            raise ValueError(f"image extents must be at least {EXTENT_MULTIPLE}")
        if self.height % EXTENT_MULTIPLE or self.width % EXTENT_MULTIPLE:
            raise ValueError(f"image extents {self.height}x{self.width} must be multiples of {EXTENT_MULTIPLE}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 1 <= self.repaint_cutoff <= self.steps:
            raise ValueError(f"repaint cutoff must lie in [1, {self.steps}], got {self.repaint_cutoff}")
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError(f"omega must lie in [0, 1], got {self.omega}")
        if self.erosion_radius is not None and self.erosion_radius < 0:
            raise ValueError("erosion radius must be >= 0")
        if self.min_component < 0:
            raise ValueError("connectivity threshold must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def latent_size(self) -> tuple[int, int]:
        return self.height // LATENT_FACTOR, self.width // LATENT_FACTOR

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"]["channels"] = list(self.model.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "model" in d:
            model = dict(d["model"])
            if "channels" in model:
                model["channels"] = tuple(model["channels"])
            d["model"] = ModelConfig(**model)
        if "paths" in d:
            d["paths"] = {str(k): str(v) for k, v in d["paths"].items()}
        return cls(**d)


def dumps(cfg: PipelineConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def loads(text: str) -> PipelineConfig:
    d = json.loads(text)
    if not isinstance(d, dict):
        raise ValueError("config must be a JSON object")
    return PipelineConfig.from_dict(d)


def save_config(path: str | os.PathLike, cfg: PipelineConfig) -> None:
    atomic_write_bytes(path, dumps(cfg).encode("utf-8"))


def load_config(path: str | os.PathLike) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def apply_env(cfg: PipelineConfig, environ=os.environ) -> PipelineConfig:
    """``TRYON_SEED`` overrides the configured seed."""
    raw = environ.get(SEED_ENV)
    if raw is None or raw == "":
        return cfg
    try:
        seed = int(raw)
    except ValueError:
        raise ValueError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
    return cfg.replace(seed=seed)
