"""Training objectives: dense semantic alignment, mask regularization and instance consistency."""

import math
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Tuple

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .config import NUM_EPS, LossConfig
from .numerics import ContractError, pairwise_cosine

PairPlans = Mapping[Tuple[int, int], torch.Tensor]


class ObjectiveError(Exception):
    """A loss component was non-finite or given inconsistent inputs."""

    pass


@dataclass
class LossBreakdown:
    """Per-component losses and their unweighted sum."""

    total: torch.Tensor
    sem: torch.Tensor
    reg: torch.Tensor
    obj: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {
            "total": float(self.total),
            "sem": float(self.sem),
            "reg": float(self.reg),
            "obj": float(self.obj),
        }


def ordered_pairs(num_frames: int) -> Iterable[Tuple[int, int]]:
    """All (t, j) with t != j."""
    return ((t, j) for t in range(num_frames) for j in range(num_frames) if t != j)


def semantic_alignment_loss(
    student_masks: torch.Tensor,
    teacher_masks: torch.Tensor,
    plans: PairPlans,
    eps: float = NUM_EPS,
) -> torch.Tensor:
    """-sum_{t!=j} sum_{u,v,n} pi_tj[u,v] M_hat_j[n,v] log(M_t[n,u] + eps).

    Masks are [T, N, HW]; ``plans`` maps each ordered pair (t, j) to pi_tj [HW, HW].
    Teacher masks and plans are treated as constants.
    """
    if student_masks.shape != teacher_masks.shape:
        raise ContractError(
            f"student/teacher masks differ: {tuple(student_masks.shape)} vs {tuple(teacher_masks.shape)}"
        )
    for name, masks in (("student", student_masks), ("teacher", teacher_masks)):
        if bool((masks < 0).any()) or bool((masks > 1).any()):
            raise ContractError(f"{name} semantic masks must lie in [0, 1]")
    teacher = teacher_masks.detach()
    log_student = torch.log(student_masks + eps)
    total = student_masks.new_zeros(())
    for (t, j), plan in plans.items():
        # target[u, n] = sum_v pi[u, v] M_hat_j[n, v]
        target = plan.detach().to(teacher.dtype) @ teacher[j].transpose(0, 1)
        total = total - (target * log_student[t].transpose(0, 1)).sum()
    return total


def mask_regularization(masks: torch.Tensor, eps: float = NUM_EPS) -> torch.Tensor:
    """sum_t sum_{n != j} cos(M_t[n], M_t[j]) for masks [T, N, HW]."""
    if bool((masks < 0).any()):
        raise ContractError("semantic masks must be nonnegative")
    cos = pairwise_cosine(masks, masks, eps)
    off_diagonal = cos - torch.diag_embed(torch.diagonal(cos, dim1=-2, dim2=-1))
    return off_diagonal.sum()


def validity(
    binarized: torch.Tensor,
    centers: torch.Tensor,
    slots: torch.Tensor,
    tau1: float,
    tau2: float,
    eps: float = NUM_EPS,
) -> torch.Tensor:
    """I[n, p] = 1 iff mean(M~[n]) >= tau1 and cos(S[n], O[n, p]) >= tau2.

    Shapes: binarized [.., N, HW], centers [.., N, D], slots [.., N, P, D] -> [.., N, P].
    """
    area = binarized.mean(dim=-1)
    c = centers.detach().unsqueeze(-2)
    o = slots.detach()
    cos = (c * o).sum(-1) / (
        torch.linalg.vector_norm(c, dim=-1) * torch.linalg.vector_norm(o, dim=-1) + eps
    )
    valid = (area >= tau1).unsqueeze(-1) & (cos >= tau2)
    return valid.to(slots.dtype)


def _lexicographic_bias(size: int) -> np.ndarray:
    """Tiny score bonus that makes the lexicographically smallest optimum unique."""
    base = float(size) ** size
    weights = np.array(
        [[-(q * float(size) ** (size - 1 - p)) for q in range(size)] for p in range(size)]
    )
    return 1e-10 * weights / base


def hungarian_match(a: torch.Tensor, b: torch.Tensor) -> np.ndarray:
    """Permutation eps maximizing sum_p cos(a[p], b[eps(p)]) for a, b [P, D].

    Solved exactly with scipy's assignment solver; exact ties resolve to the
    lexicographically smallest permutation.
    """
    if a.shape != b.shape or a.dim() != 2:
        raise ContractError(f"matching needs two [P, D] tensors, got {tuple(a.shape)} and {tuple(b.shape)}")
    scores = pairwise_cosine(a.detach().to(torch.float64), b.detach().to(torch.float64)).numpy()
    size = scores.shape[0]
    rows, cols = linear_sum_assignment(scores + _lexicographic_bias(size), maximize=True)
    perm = np.empty(size, dtype=np.int64)
    perm[rows] = cols
    return perm


def match_all(student_slots: torch.Tensor, teacher_slots: torch.Tensor) -> Dict[Tuple[int, int], np.ndarray]:
    """Matches for every ordered pair and semantic: (t, j) -> [N, P] permutations."""
    num_frames, num_semantics = student_slots.shape[0], student_slots.shape[1]
    matches: Dict[Tuple[int, int], np.ndarray] = {}
    for t, j in ordered_pairs(num_frames):
        matches[(t, j)] = np.stack(
            [
                hungarian_match(student_slots[t, n], teacher_slots[j, n])
                for n in range(num_semantics)
            ]
        )
    return matches


def instance_consistency_loss(
    student_slots: torch.Tensor,
    teacher_slots: torch.Tensor,
    student_valid: torch.Tensor,
    teacher_valid: torch.Tensor,
    matches: Mapping[Tuple[int, int], np.ndarray],
    margin: float,
    eps: float = NUM_EPS,
) -> torch.Tensor:
    """Margin loss over valid instances for slots [T, N, P, D] and validity [T, N, P].

    Slots are L2-normalized first. Matched pairs are pulled together when both
    sides are valid; every non-matched teacher slot is pushed beyond the margin.
    """
    student = nn_normalize(student_slots, eps)
    teacher = nn_normalize(teacher_slots.detach(), eps)
    t_valid = teacher_valid.detach()
    num_instances = student.shape[2]
    total = student.new_zeros(())
    for (t, j), perm in matches.items():
        index = torch.as_tensor(perm, dtype=torch.long)  # [N, P]
        diff = student[t].unsqueeze(-2) - teacher[j].unsqueeze(-3)  # [N, P, Q, D]
        dist = torch.linalg.vector_norm(diff, dim=-1)  # [N, P, Q]
        matched = torch.nn.functional.one_hot(index, num_instances).to(dist.dtype)
        pull = (dist * matched).sum(-1) * torch.gather(t_valid[j], 1, index)
        push = (torch.relu(margin - dist) * (1.0 - matched)).sum(-1)
        total = total + (student_valid[t].detach() * (pull + push)).sum()
    return total


def nn_normalize(x: torch.Tensor, eps: float = NUM_EPS) -> torch.Tensor:
    """x / (|x| + eps) along the last axis."""
    return x / (torch.linalg.vector_norm(x, dim=-1, keepdim=True) + eps)


def total_loss(
    sem: torch.Tensor, obj: torch.Tensor, reg: torch.Tensor, cfg: LossConfig
) -> LossBreakdown:
    """Unweighted L_sem + L_obj + L_reg; disabled components contribute exactly 0."""
    parts = {
        "sem": sem if cfg.enable_sem else torch.zeros_like(sem),
        "obj": obj if cfg.enable_obj else torch.zeros_like(obj),
        "reg": reg if cfg.enable_reg else torch.zeros_like(reg),
    }
    for name, value in parts.items():
        if not math.isfinite(float(value)):
            raise ObjectiveError(f"loss component L_{name} is not finite ({float(value)})")
    total = parts["sem"] + parts["obj"] + parts["reg"]
    return LossBreakdown(total=total, sem=parts["sem"], reg=parts["reg"], obj=parts["obj"])
