"""Adversarial hat stickers against face embedders, at desk scale."""

from .attack import AttackConfig, AttackProblem, JitterSpec, run_attack, tv_loss
from .embedder import EmbedderConfig, cosine_sim, embed, init_embedder
from .geometry import BendPitchParams, RenderPlan, StickerSpec, render
from .image import load_ppm, save_ppm

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackProblem", "BendPitchParams", "EmbedderConfig", "JitterSpec", "RenderPlan",
    "StickerSpec", "cosine_sim", "embed", "init_embedder", "load_ppm", "render", "run_attack",
    "save_ppm", "tv_loss",
]
