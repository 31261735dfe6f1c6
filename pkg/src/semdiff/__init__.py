"""Guidance-map conditioned diffusion for synthetic IHC field-of-view augmentation."""

__version__ = "0.1.0"

from .alignment import ToyEmbedder, condition_distance_matrix, toy_embed, wasserstein_empirical
from .condmaps import (GuidanceMapTransformer, assemble_guidance, compute_color_stats, compute_hv_map,
                       eccentricity, plan_augmentation, select_fovs)
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import cosine_schedule, ddim_sample, ddim_step, respace
from .estimator import SemanticDiffusionModel
from .exceptions import (ConfigError, ContractError, DatasetIOError, DimensionError, EmptyForegroundError,
                         PackingError, SemdiffError)
from .metrics import assd, dice, hungarian, match_centers, wilcoxon_signed_rank
from .toyforge import generate_corpus, generate_fov

__all__ = [
    "ToyEmbedder", "condition_distance_matrix", "toy_embed", "wasserstein_empirical",
    "GuidanceMapTransformer", "assemble_guidance", "compute_color_stats", "compute_hv_map",
    "eccentricity", "plan_augmentation", "select_fovs", "Denoiser", "DenoiserConfig",
    "cosine_schedule", "ddim_sample", "ddim_step", "respace", "SemanticDiffusionModel",
    "ConfigError", "ContractError", "DatasetIOError", "DimensionError", "EmptyForegroundError",
    "PackingError", "SemdiffError", "assd", "dice", "hungarian", "match_centers",
    "wilcoxon_signed_rank", "generate_corpus", "generate_fov",
]
