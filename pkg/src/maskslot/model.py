"""The full model: encoder, fusion heads and masked slot attention over a clip."""

from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
from torch import nn

from .config import ModelConfig
from .encoder import PatchEncoder, ProjectionHeads
from .fusion import correlate, fuse
from .numerics import ContractError, RngState
from .slots import MaskedSlotAttention, SlotOutput


@dataclass
class ClipOutput:
    """Per-frame results for frames [..., T, 3, H, W]; every tensor keeps the [..., T] lead."""

    features: torch.Tensor
    correlations: torch.Tensor
    fused: torch.Tensor
    slots: SlotOutput
    partners: List[int]

    @property
    def masks(self) -> torch.Tensor:
        return self.slots.semantic.masks

    @property
    def centers(self) -> torch.Tensor:
        return self.slots.semantic.centers


class SlotModel(nn.Module):
    """f, h_f, h_c and both attention stages; the student and the teacher are two instances."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = PatchEncoder(cfg)
        self.heads = ProjectionHeads(cfg)
        self.attention = MaskedSlotAttention(cfg)

    @property
    def num_semantics(self) -> int:
        return self.cfg.num_semantics

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        """[..., 3, H, W] -> F [..., HW, D]."""
        return self.encoder(frames)

    def all_pair_correlations(self, features: torch.Tensor) -> torch.Tensor:
        """C[..., t, j] = F_t F_j^T for features [..., T, HW, D] -> [..., T, T, HW, HW]."""
        return correlate(features.unsqueeze(-3), features.unsqueeze(-4))

    def semantic_generators(self, rng: RngState) -> List[torch.Generator]:
        return [rng.generator(0, n) for n in range(self.num_semantics)]

    def instance_generators(self, rng: RngState) -> List[torch.Generator]:
        return [rng.generator(1, n) for n in range(self.num_semantics)]

    def forward_clip(
        self,
        frames: torch.Tensor,
        partners: Sequence[int],
        rng: RngState,
        semantic_generators: Optional[Sequence[torch.Generator]] = None,
        instance_generators: Optional[Sequence[torch.Generator]] = None,
    ) -> ClipOutput:
        """Encode every frame, fuse with C_{t, partners[t]} and run both attention stages."""
        num_frames = frames.shape[-4]
        if len(partners) != num_frames:
            raise ContractError(f"need one partner per frame ({num_frames}), got {len(partners)}")
        for t, j in enumerate(partners):
            if j == t or not 0 <= j < num_frames:
                raise ContractError(f"invalid partner {j} for frame {t} of {num_frames}")
        features = self.encode(frames)
        index = torch.as_tensor(list(partners), dtype=torch.long)
        correlations = correlate(features, features.index_select(-3, index))
        fused = fuse(features, correlations, self.heads, self.cfg.feature_mode)
        slots = self.attention(
            fused,
            semantic_generators or self.semantic_generators(rng),
            instance_generators or self.instance_generators(rng),
        )
        return ClipOutput(
            features=features,
            correlations=correlations,
            fused=fused,
            slots=slots,
            partners=list(partners),
        )
