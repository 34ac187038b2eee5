"""Training-free multi-object composition by mask-blending several DDIM trajectories."""

from objcomposer.attnmask import (average_attention, binarize, make_masks, otsu_threshold, resample_bilinear,
                                  select_tokens)
from objcomposer.compose import ObjectSpec, SceneRequest, blend, compose_step, generate
from objcomposer.denoise import (Conditioning, DenoiserOutput, GMMDenoiser, MixtureComponent, NullReadout,
                                 PatternDenoiser, SyntheticAttentionDenoiser, cfg_combine)
from objcomposer.invert import AttentionRecord, InversionTrajectory, ddim_invert, null_text_optimize
from objcomposer.schedule import NoiseSchedule, ddim_invert_step, ddim_step, make_linear_schedule

__version__ = "0.1.0"

__all__ = [
    "AttentionRecord", "Conditioning", "DenoiserOutput", "GMMDenoiser", "InversionTrajectory",
    "MixtureComponent", "NoiseSchedule", "NullReadout", "ObjectSpec", "PatternDenoiser", "SceneRequest",
    "SyntheticAttentionDenoiser", "average_attention", "binarize", "blend", "cfg_combine", "compose_step",
    "ddim_invert", "ddim_invert_step", "ddim_step", "generate", "make_linear_schedule", "make_masks",
    "null_text_optimize", "otsu_threshold", "resample_bilinear", "select_tokens",
]
