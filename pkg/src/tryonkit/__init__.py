"""Desk-scale virtual try-on pipeline with adapter conditioning.

Training-free conditioning maps (texture highlighting, segmentation
recomposition), adapter-conditioned toy latent diffusion with time-partial
repainting, and latent background blending, all on seeded synthetic weights.
"""
from .config import PipelineConfig
from .numerics import NumericError, ParamStore, Rng

__all__ = ["NumericError", "ParamStore", "PipelineConfig", "Rng"]
__version__ = "0.1.0"
