"""Desk-scale patch encoder and the two projection heads feeding fusion."""

import math
from dataclasses import dataclass
from typing import Tuple

import torch
from torch import nn

from .config import ConfigError, ModelConfig
from .numerics import ContractError


@dataclass(frozen=True)
class FeatureMap:
    """Per-frame patch features [HW, D]; row i is patch (i // W, i % W)."""

    values: torch.Tensor
    grid: Tuple[int, int]

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]


def check_frame_shape(height: int, width: int, patch_size: int) -> None:
    """Raise ConfigError naming the extent that does not tile into patches."""
    for name, extent in (("height", height), ("width", width)):
        if extent % patch_size != 0:
            raise ConfigError(
                f"frame {name} {extent} is not divisible by patch size {patch_size}"
            )


def patchify(frames: torch.Tensor, patch_size: int) -> torch.Tensor:
    """[..., 3, H, W] -> [..., HW, patch_size^2 * 3] in row-major patch order."""
    *lead, channels, height, width = frames.shape
    check_frame_shape(height, width, patch_size)
    gh, gw = height // patch_size, width // patch_size
    x = frames.reshape(*lead, channels, gh, patch_size, gw, patch_size)
    n = len(lead)
    # (..., gh, gw, p, p, C)
    x = x.permute(*range(n), n + 1, n + 3, n + 2, n + 4, n)
    return x.reshape(*lead, gh * gw, patch_size * patch_size * channels)


class MixerBlock(nn.Module):
    """Token-mixing linear over HW plus a channel MLP over D, both pre-normed and residual."""

    def __init__(self, num_patches: int, dim: int, hidden: int, residual_scale: float = 0.1):
        super().__init__()
        self.token_norm = nn.LayerNorm(dim)
        self.token_mix = nn.Linear(num_patches, num_patches)
        self.channel_norm = nn.LayerNorm(dim)
        self.channel_in = nn.Linear(dim, hidden)
        self.channel_out = nn.Linear(hidden, dim)
        with torch.no_grad():
            self.token_mix.weight.mul_(residual_scale)
            self.token_mix.bias.mul_(residual_scale)
            self.channel_out.weight.mul_(residual_scale)
            self.channel_out.bias.mul_(residual_scale)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mixed = self.token_mix(self.token_norm(x).transpose(-1, -2)).transpose(-1, -2)
        x = x + mixed
        return x + self.channel_out(nn.functional.gelu(self.channel_in(self.channel_norm(x))))


class PatchEncoder(nn.Module):
    """f: frame -> F_t [HW, D]; a linear patch embedding followed by B mixer blocks."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.image_size = cfg.image_size
        self.grid = (cfg.grid, cfg.grid)
        self.embed = nn.Linear(cfg.patch_size * cfg.patch_size * 3, cfg.dim)
        uniform_fan_in_(self.embed)
        self.blocks = nn.ModuleList(
            MixerBlock(cfg.num_patches, cfg.dim, cfg.mixer_hidden)
            for _ in range(cfg.mixer_blocks)
        )

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """[..., 3, H, W] -> [..., HW, D]."""
        height, width = frames.shape[-2], frames.shape[-1]
        if (height, width) != (self.image_size, self.image_size):
            check_frame_shape(height, width, self.patch_size)
            raise ConfigError(
                f"frame size {height}x{width} does not match configured resolution "
                f"{self.image_size}x{self.image_size}"
            )
        x = self.embed(patchify(frames, self.patch_size))
        for block in self.blocks:
            x = block(x)
        return x

    def encode(self, frame: torch.Tensor) -> FeatureMap:
        """Encode a single [3, H, W] frame."""
        if frame.dim() != 3 or frame.shape[0] != 3:
            raise ContractError(f"expected a [3, H, W] frame, got {tuple(frame.shape)}")
        return FeatureMap(values=self(frame), grid=self.grid)


class ProjectionHeads(nn.Module):
    """h_f: D -> D over features and h_c: HW -> D over correlation rows, both with bias."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_patches = cfg.num_patches
        self.h_f = nn.Linear(cfg.dim, cfg.dim)
        self.h_c = nn.Linear(cfg.num_patches, cfg.dim)
        uniform_fan_in_(self.h_f)
        uniform_fan_in_(self.h_c)

    def project_semantic(self, features: torch.Tensor) -> torch.Tensor:
        """h_f(F_t)."""
        return self.h_f(features)

    def project_correspondence(self, correlation: torch.Tensor) -> torch.Tensor:
        """h_c(C_tj); the head is bound to the configured HW."""
        if correlation.shape[-1] != self.num_patches or correlation.shape[-2] != self.num_patches:
            raise ConfigError(
                f"correlation map {tuple(correlation.shape[-2:])} does not match the "
                f"correspondence head's HW={self.num_patches}"
            )
        return self.h_c(correlation)


def uniform_fan_in_(module: nn.Linear) -> None:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias."""
    bound = 1.0 / math.sqrt(module.in_features)
    with torch.no_grad():
        module.weight.uniform_(-bound, bound)
        if module.bias is not None:
            module.bias.uniform_(-bound, bound)
