"""Semantic-aware masked slot attention.

Stage 1 decomposes the fused map into N semantics starting from the slot-bank
means. Stage 2 samples P slots per semantic from its Gaussian and runs the same
attention with the weighted-mean coefficient restricted to the binarized
semantic mask. Both stages share the bank, the q/k/v heads and the GRU.
"""

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import torch
from torch import nn

from .config import NUM_EPS, ModelConfig
from .numerics import ContractError, softmax_over_axis

SlotUpdate = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


class SlotBank(nn.Module):
    """N Gaussians with learnable means mu [N, D] and sigma = softplus(rho) > 0."""

    def __init__(self, num_semantics: int, dim: int, init_sigma: float = 0.5):
        super().__init__()
        if num_semantics < 1:
            raise ContractError(f"slot bank needs N >= 1, got {num_semantics}")
        self.mu = nn.Parameter(torch.randn(num_semantics, dim))
        rho = math.log(math.expm1(init_sigma))
        self.rho = nn.Parameter(torch.full((num_semantics, dim), rho))

    @property
    def num_semantics(self) -> int:
        return int(self.mu.shape[0])

    @property
    def sigma(self) -> torch.Tensor:
        return nn.functional.softplus(self.rho)

    def sample(
        self, n: int, count: int, generator: torch.Generator, lead: Sequence[int] = ()
    ) -> torch.Tensor:
        """Reparameterized draws mu_n + sigma_n * eps of shape [*lead, count, D]."""
        if count < 1:
            raise ContractError(f"need at least one slot per semantic, got P={count}")
        noise = torch.randn(
            (*lead, count, self.mu.shape[1]), generator=generator, dtype=self.mu.dtype
        )
        return self.mu[n] + self.sigma[n] * noise


class AttentionHeads(nn.Module):
    """W_q, W_k, W_v (D -> D, with bias) and the optional input/slot layer norms."""

    def __init__(self, dim: int, layer_norm: bool = True):
        super().__init__()
        self.dim = dim
        self.norm_input: nn.Module = nn.LayerNorm(dim) if layer_norm else nn.Identity()
        self.norm_slots: nn.Module = nn.LayerNorm(dim) if layer_norm else nn.Identity()
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)

    def keys_values(self, inputs: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        normed = self.norm_input(inputs)
        return self.to_k(normed), self.to_v(normed)

    def queries(self, slots: torch.Tensor) -> torch.Tensor:
        return self.to_q(self.norm_slots(slots))


@dataclass
class SemanticOutput:
    """Final stage-1 attention masks [.., N, HW], slot centers [.., N, D] and mean weights A."""

    masks: torch.Tensor
    centers: torch.Tensor
    weights: torch.Tensor


@dataclass
class InstanceOutput:
    """Instance slots [.., N, P, D], attention M [.., N, P, HW], masked weights A and initial draws."""

    slots: torch.Tensor
    attention: torch.Tensor
    weights: torch.Tensor
    init: torch.Tensor


def gru_update(gru: SlotUpdate, updates: torch.Tensor, slots: torch.Tensor) -> torch.Tensor:
    """Apply a per-slot recurrent cell over any leading shape."""
    dim = slots.shape[-1]
    return gru(updates.reshape(-1, dim), slots.reshape(-1, dim)).reshape(slots.shape)


def binarize(masks: torch.Tensor, tau: float) -> torch.Tensor:
    """1 where masks > tau, else 0."""
    return (masks > tau).to(masks.dtype)


def semantic_decompose(
    inputs: torch.Tensor,
    bank: SlotBank,
    heads: AttentionHeads,
    gru: SlotUpdate,
    iters: int = 3,
    init: Optional[torch.Tensor] = None,
    eps: float = NUM_EPS,
) -> SemanticOutput:
    """Stage 1 over R [.., HW, D]: softmax over the query axis, weighted mean, GRU update."""
    if iters < 1:
        raise ContractError(f"slot attention needs iters >= 1, got {iters}")
    lead = inputs.shape[:-2]
    if init is None:
        init = bank.mu
    slots = init.expand(*lead, *init.shape[-2:])
    keys, values = heads.keys_values(inputs)
    scale = heads.dim ** -0.5
    masks = weights = slots
    for _ in range(iters):
        logits = heads.queries(slots) @ keys.transpose(-1, -2) * scale
        masks = softmax_over_axis(logits, -2)
        weights = masks / (masks.sum(dim=-1, keepdim=True) + eps)
        slots = gru_update(gru, weights @ values, slots)
    return SemanticOutput(masks=masks, centers=slots, weights=weights)


def _instance_iterations(
    init: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    region: torch.Tensor,
    heads: AttentionHeads,
    gru: SlotUpdate,
    iters: int,
    eps: float,
) -> InstanceOutput:
    """Masked iterations for slots [.., P, D] against one region [.., HW] per leading index."""
    scale = heads.dim ** -0.5
    slots = init
    attention = weights = init
    region = region.unsqueeze(-2)
    for _ in range(iters):
        logits = heads.queries(slots) @ keys.transpose(-1, -2) * scale
        attention = softmax_over_axis(logits, -2)
        masked = attention * region
        weights = masked / (masked.sum(dim=-1, keepdim=True) + eps)
        slots = gru_update(gru, weights @ values, slots)
    return InstanceOutput(slots=slots, attention=attention, weights=weights, init=init)


def sample_slots(
    bank: SlotBank, n: int, count: int, generator: torch.Generator, lead: Sequence[int] = ()
) -> torch.Tensor:
    """P instance slots [*lead, P, D] for semantic n, drawn from its own generator."""
    if not 0 <= n < bank.num_semantics:
        raise ContractError(f"semantic index {n} outside [0, {bank.num_semantics})")
    return bank.sample(n, count, generator, lead)


def _draw_instance_init(
    bank: SlotBank,
    count: int,
    generators: Sequence[torch.Generator],
    lead: Sequence[int],
) -> torch.Tensor:
    if len(generators) != bank.num_semantics:
        raise ContractError(
            f"need one generator per semantic ({bank.num_semantics}), got {len(generators)}"
        )
    draws = [sample_slots(bank, n, count, generators[n], lead) for n in range(bank.num_semantics)]
    return torch.stack(draws, dim=-3)


def instance_identify(
    inputs: torch.Tensor,
    region: torch.Tensor,
    bank: SlotBank,
    heads: AttentionHeads,
    gru: SlotUpdate,
    num_instances: int,
    generators: Sequence[torch.Generator],
    iters: int = 3,
    eps: float = NUM_EPS,
) -> InstanceOutput:
    """Stage 2: P sampled slots per semantic, aggregation restricted to binarized masks [.., N, HW].

    Semantics run batched; each semantic draws from its own generator, so the
    result does not depend on the order semantics are processed in.
    """
    if iters < 1:
        raise ContractError(f"slot attention needs iters >= 1, got {iters}")
    lead = inputs.shape[:-2]
    init = _draw_instance_init(bank, num_instances, generators, lead)
    keys, values = heads.keys_values(inputs)
    return _instance_iterations(
        init, keys.unsqueeze(-3), values.unsqueeze(-3), region, heads, gru, iters, eps
    )


@dataclass
class SlotOutput:
    """Everything both stages produce for one or more frames."""

    semantic: SemanticOutput
    binarized: torch.Tensor
    instance: Optional[InstanceOutput]


class MaskedSlotAttention(nn.Module):
    """Both attention stages with shared bank, heads and GRU, plus the ablation switches."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_instances = cfg.num_instances
        self.iters = cfg.iters
        self.tau = cfg.tau
        self.slot_init = cfg.slot_init
        self.use_semantic = cfg.use_semantic
        self.use_instance = cfg.use_instance
        self.bank = SlotBank(cfg.num_semantics, cfg.dim)
        self.heads = AttentionHeads(cfg.dim, cfg.layer_norm)
        self.gru = nn.GRUCell(cfg.dim, cfg.dim)

    def forward(
        self,
        inputs: torch.Tensor,
        semantic_generators: Sequence[torch.Generator],
        instance_generators: Sequence[torch.Generator],
    ) -> SlotOutput:
        lead = inputs.shape[:-2]
        num_patches = inputs.shape[-2]
        if self.use_semantic:
            init = None
            if self.slot_init == "random":
                init = torch.stack(
                    [
                        self.bank.sample(n, 1, semantic_generators[n], lead)[..., 0, :]
                        for n in range(self.bank.num_semantics)
                    ],
                    dim=-2,
                )
            semantic = semantic_decompose(
                inputs, self.bank, self.heads, self.gru, self.iters, init
            )
            binarized = binarize(semantic.masks.detach(), self.tau)
        else:
            # instance-only: no decomposition, every semantic region is the whole frame
            ones = inputs.new_ones((*lead, self.bank.num_semantics, num_patches))
            centers = self.bank.mu.expand(*lead, *self.bank.mu.shape)
            semantic = SemanticOutput(masks=ones, centers=centers, weights=ones / num_patches)
            binarized = ones
        instance = None
        if self.use_instance:
            instance = instance_identify(
                inputs,
                binarized,
                self.bank,
                self.heads,
                self.gru,
                self.num_instances,
                instance_generators,
                self.iters,
            )
        return SlotOutput(semantic=semantic, binarized=binarized, instance=instance)
