"""Inter-frame feature correlation and fusion of semantic and correspondence cues."""

from typing import List

import torch

from .encoder import ProjectionHeads
from .numerics import ContractError


def correlate(features_t: torch.Tensor, features_j: torch.Tensor) -> torch.Tensor:
    """C_tj = F_t F_j^T over trailing [HW, D] axes, raw inner products with no normalization.

    Leading axes broadcast, so a clip [.., T, HW, D] correlates against its
    partner frames in one call. Callers keep t != j.
    """
    if features_t.shape[-1] != features_j.shape[-1]:
        raise ContractError(
            f"feature dims differ: {features_t.shape[-1]} vs {features_j.shape[-1]}"
        )
    if features_t.shape[-2] != features_j.shape[-2]:
        raise ContractError(
            f"patch counts differ: {features_t.shape[-2]} vs {features_j.shape[-2]}"
        )
    return features_t @ features_j.transpose(-1, -2)


def fuse(
    features: torch.Tensor,
    correlation: torch.Tensor,
    heads: ProjectionHeads,
    feature_mode: str = "fused",
) -> torch.Tensor:
    """R_t = h_f(F_t) + h_c(C_tj) [.., HW, D]; ``rgb`` drops the correlation term, ``correlation`` the feature term."""
    if feature_mode == "rgb":
        return heads.project_semantic(features)
    if feature_mode == "correlation":
        return heads.project_correspondence(correlation)
    if feature_mode != "fused":
        raise ContractError(f"unknown feature mode {feature_mode!r}")
    return heads.project_semantic(features) + heads.project_correspondence(correlation)


def sample_partners(num_frames: int, generator: torch.Generator) -> List[int]:
    """For every t draw j != t uniformly from the other T - 1 clip indices."""
    if num_frames < 2:
        raise ContractError(f"need at least 2 frames to pick partners, got {num_frames}")
    draws = torch.randint(0, num_frames - 1, (num_frames,), generator=generator)
    return [int(d) + (1 if int(d) >= t else 0) for t, d in enumerate(draws)]


def adjacent_partners(num_frames: int) -> List[int]:
    """Deterministic partners for inference: the next frame, the previous one for the last."""
    if num_frames < 2:
        raise ContractError(f"need at least 2 frames to pick partners, got {num_frames}")
    return [t + 1 if t + 1 < num_frames else t - 1 for t in range(num_frames)]
