"""Finite-difference checks of every training loss on a tiny model.

The tiny configuration has D=8, N=3, P=2 and HW=16 (16x16 frames in 4x4
patches) over T=2 frames, in 64-bit precision.
"""

import copy
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import torch

from .config import RunConfig, default_config
from .model import ClipOutput, SlotModel
from .numerics import ContractError, GradCheckResult, RngState, check_gradients, seed_everything, set_precision
from .objectives import (
    instance_consistency_loss,
    mask_regularization,
    match_all,
    ordered_pairs,
    semantic_alignment_loss,
    validity,
)
from .trainer import assemble_loss
from .transport import sinkhorn

LOSS_NAMES = ("L_sem", "L_reg", "L_obj", "total")


def tiny_config() -> RunConfig:
    cfg = default_config()
    m = cfg.model
    m.image_size, m.patch_size, m.dim = 16, 4, 8
    m.mixer_blocks, m.mixer_hidden = 0, 8
    m.num_semantics, m.num_instances = 3, 2
    cfg.train.frames = 2
    cfg.train.precision = "float64"
    # every instance counts as valid so L_obj has terms to differentiate
    cfg.loss.tau1, cfg.loss.tau2 = 0.0, 0.0
    cfg.sinkhorn.epsilon = 0.5
    return cfg


@dataclass
class GradCheckCase:
    """A student, a perturbed teacher, one clip [1, T, 3, H, W] and the teacher's targets."""

    cfg: RunConfig
    student: SlotModel
    teacher: SlotModel
    frames: torch.Tensor
    partners: List[int]
    teacher_out: ClipOutput
    plans: torch.Tensor
    seed: int


def build_case(seed: int = 0, cfg: Optional[RunConfig] = None) -> GradCheckCase:
    cfg = cfg or tiny_config()
    set_precision("float64")
    seed_everything(seed)
    student = SlotModel(cfg.model)
    teacher = copy.deepcopy(student)
    teacher.requires_grad_(False)
    with torch.no_grad():
        for param in teacher.parameters():
            param.add_(0.05 * torch.randn_like(param))
    gen = torch.Generator().manual_seed(seed)
    frames = torch.rand((1, cfg.train.frames, 3, cfg.model.image_size, cfg.model.image_size), generator=gen)
    partners = [1, 0] if cfg.train.frames == 2 else [(t + 1) % cfg.train.frames for t in range(cfg.train.frames)]
    with torch.no_grad():
        teacher_out = teacher.forward_clip(frames, partners, RngState(seed + 1))
        plans = sinkhorn(-teacher.all_pair_correlations(teacher_out.features), cfg.sinkhorn).plan
    return GradCheckCase(cfg, student, teacher, frames, partners, teacher_out, plans, seed)


def loss_functions(case: GradCheckCase) -> Dict[str, Callable[[], torch.Tensor]]:
    """Scalar closures over the student's parameters; every call replays the same random draws."""
    cfg = case.cfg

    def forward() -> ClipOutput:
        return case.student.forward_clip(case.frames, case.partners, RngState(case.seed))

    def sem() -> torch.Tensor:
        out = forward()
        pairs = {(t, j): case.plans[0, t, j] for t, j in ordered_pairs(cfg.train.frames)}
        return semantic_alignment_loss(out.masks[0], case.teacher_out.masks[0], pairs)

    def reg() -> torch.Tensor:
        return mask_regularization(forward().masks[0])

    def obj() -> torch.Tensor:
        out = forward()
        s_inst, t_inst = out.slots.instance, case.teacher_out.slots.instance
        if s_inst is None or t_inst is None:
            raise ContractError("L_obj needs the instance stage")
        s_valid = validity(out.slots.binarized[0], out.centers[0], s_inst.slots[0], cfg.loss.tau1, cfg.loss.tau2)
        t_valid = validity(
            case.teacher_out.slots.binarized[0],
            case.teacher_out.centers[0],
            t_inst.slots[0],
            cfg.loss.tau1,
            cfg.loss.tau2,
        )
        matches = match_all(s_inst.slots[0], t_inst.slots[0])
        return instance_consistency_loss(
            s_inst.slots[0], t_inst.slots[0], s_valid, t_valid, matches, cfg.loss.lambda_margin
        )

    def total() -> torch.Tensor:
        return assemble_loss(forward(), case.teacher_out, case.plans, cfg).total

    return {"L_sem": sem, "L_reg": reg, "L_obj": obj, "total": total}


def run_gradcheck(
    seed: int = 0,
    names: Sequence[str] = LOSS_NAMES,
    step: float = 1e-5,
    tol: float = 1e-4,
) -> List[GradCheckResult]:
    """Compare autograd with central differences for each named loss."""
    case = build_case(seed)
    functions = loss_functions(case)
    params = list(case.student.named_parameters())
    return [check_gradients(name, functions[name], params, step, tol) for name in names]


def teacher_gradients_are_zero(case: GradCheckCase) -> bool:
    """Backpropagate the total loss and confirm nothing reached the teacher or the plans."""
    loss = loss_functions(case)["total"]()
    loss.backward()
    if case.plans.requires_grad:
        return False
    return all(p.grad is None or bool((p.grad == 0).all()) for p in case.teacher.parameters())
