"""N:M structured-sparsity training recipes on a small encoder-decoder transformer."""

from .nm import NmPattern, SparsityMask, SrSteConfig, build_mask, build_unstructured_mask
from .schedule import PhaseSpec, Recipe, RecipeSchedule, phase_at

__version__ = "0.1.0"

__all__ = [
    "NmPattern",
    "PhaseSpec",
    "Recipe",
    "RecipeSchedule",
    "SparsityMask",
    "SrSteConfig",
    "build_mask",
    "build_unstructured_mask",
    "phase_at",
]
