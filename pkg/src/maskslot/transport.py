"""Entropic optimal transport between the patches of two frames (Sinkhorn-Knopp)."""

import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch

from .config import SinkhornConfig
from .numerics import DiagnosticWarning

# halvings tried by the Newton line search before giving up on a direction
LINE_SEARCH_STEPS = 30
ARMIJO = 1e-4


class TransportError(Exception):
    """Invalid cost matrix, marginals or solver configuration."""

    pass


@dataclass
class TransportPlan:
    """Coupling pi [.., n, m] with its target marginals and the achieved residuals.

    Residuals are the worst (over any leading batch) infinity-norm marginal
    violations. ``iterations`` counts every scaling iteration (annealing
    stages included) plus the Newton steps, so it never exceeds
    ``max_iters``. ``col_history`` holds the column L1 violation after each
    row update of the final-epsilon scaling loop and ``row_history`` the row
    L1 violation after each column update; each never increases.
    """

    plan: torch.Tensor
    row_marginal: torch.Tensor
    col_marginal: torch.Tensor
    row_residual: float
    col_residual: float
    iterations: int
    converged: bool
    log_domain: bool
    newton_steps: int = 0
    row_history: List[float] = field(default_factory=list)
    col_history: List[float] = field(default_factory=list)


@dataclass
class _Potentials:
    """Log scalings (u, v) of the current epsilon and the iterations spent on them."""

    log_u: torch.Tensor
    log_v: torch.Tensor
    iterations: int = 0
    converged: bool = False


def _check_inputs(
    cost: torch.Tensor, cfg: SinkhornConfig, row: torch.Tensor, col: torch.Tensor
) -> None:
    if cost.dim() < 2:
        raise TransportError(f"cost must be at least 2-D, got shape {tuple(cost.shape)}")
    if not bool(torch.isfinite(cost).all()):
        raise TransportError("cost matrix contains non-finite entries")
    if not cfg.epsilon > 0:
        raise TransportError(f"sinkhorn.epsilon must be positive, got {cfg.epsilon}")
    if cfg.max_iters < 1:
        raise TransportError(f"sinkhorn.max_iters must be >= 1, got {cfg.max_iters}")
    if not cfg.epsilon_start > 0 or not 0 < cfg.epsilon_decay < 1:
        raise TransportError(
            f"annealing needs epsilon_start > 0 and 0 < epsilon_decay < 1, got "
            f"{cfg.epsilon_start}, {cfg.epsilon_decay}"
        )
    if row.shape[-1] != cost.shape[-2] or col.shape[-1] != cost.shape[-1]:
        raise TransportError(
            f"marginal lengths {row.shape[-1]}, {col.shape[-1]} do not match cost "
            f"{tuple(cost.shape[-2:])}"
        )
    if bool((row <= 0).any()) or bool((col <= 0).any()):
        raise TransportError("marginals must be strictly positive")
    mass_gap = (row.sum(-1) - col.sum(-1)).abs().max()
    if float(mass_gap) > 1e-9:
        raise TransportError(f"marginals carry different mass (gap {float(mass_gap):.3g})")


def standardize_cost(cost: torch.Tensor) -> torch.Tensor:
    """(cost - mean) / std over the trailing matrix; constant costs become zero."""
    mean = cost.mean(dim=(-2, -1), keepdim=True)
    centered = cost - mean
    std = centered.pow(2).mean(dim=(-2, -1), keepdim=True).sqrt()
    return centered / std.clamp_min(torch.finfo(cost.dtype).tiny)


def epsilon_schedule(cfg: SinkhornConfig) -> List[float]:
    """Annealing epsilons above ``cfg.epsilon``, largest first; empty when annealing is off."""
    stages: List[float] = []
    if cfg.anneal_iters < 1:
        return stages
    eps = cfg.epsilon_start
    while eps > cfg.epsilon:
        stages.append(eps)
        eps *= cfg.epsilon_decay
    return stages


def _residuals(
    plan: torch.Tensor, row: torch.Tensor, col: torch.Tensor
) -> Tuple[float, float]:
    row_res = (plan.sum(-1) - row).abs().max()
    col_res = (plan.sum(-2) - col).abs().max()
    return float(row_res), float(col_res)


def _l1(marginal: torch.Tensor, target: torch.Tensor) -> float:
    return float((marginal - target).abs().sum(-1).max())


def _log_plan(log_kernel: torch.Tensor, log_u: torch.Tensor, log_v: torch.Tensor) -> torch.Tensor:
    return torch.exp(log_u.unsqueeze(-1) + log_kernel + log_v.unsqueeze(-2))


def _scale_direct(
    log_kernel: torch.Tensor,
    start: _Potentials,
    row: torch.Tensor,
    col: torch.Tensor,
    iters: int,
    tol: float,
    row_history: List[float],
    col_history: List[float],
) -> Optional[_Potentials]:
    """Scaling iterations on K = exp(-C/eps); None when the kernel or a scaling over/underflows."""
    kernel = torch.exp(log_kernel)
    v = torch.exp(start.log_v)
    if not (bool(torch.isfinite(kernel).all()) and bool(torch.isfinite(v).all())):
        return None
    if bool((kernel.sum(-1) == 0).any()) or bool((kernel.sum(-2) == 0).any()):
        return None
    u = torch.exp(start.log_u)
    result = _Potentials(start.log_u, start.log_v)
    for iteration in range(1, iters + 1):
        u = row / (kernel @ v.unsqueeze(-1)).squeeze(-1)
        col_sums = (kernel.transpose(-1, -2) @ u.unsqueeze(-1)).squeeze(-1)
        col_history.append(_l1(v * col_sums, col))
        v = col / col_sums
        if not (bool(torch.isfinite(u).all()) and bool(torch.isfinite(v).all())):
            return None
        if bool((u == 0).any()) or bool((v == 0).any()):
            return None
        plan = u.unsqueeze(-1) * kernel * v.unsqueeze(-2)
        row_history.append(_l1(plan.sum(-1), row))
        result.iterations = iteration
        row_res, col_res = _residuals(plan, row, col)
        if row_res <= tol and col_res <= tol:
            result.converged = True
            break
    result.log_u, result.log_v = u.log(), v.log()
    return result


def _scale_log(
    log_kernel: torch.Tensor,
    start: _Potentials,
    row: torch.Tensor,
    col: torch.Tensor,
    iters: int,
    tol: float,
    row_history: Optional[List[float]] = None,
    col_history: Optional[List[float]] = None,
) -> _Potentials:
    """The same iterations on log-potentials with logsumexp."""
    log_row, log_col = row.log(), col.log()
    log_u, log_v = start.log_u, start.log_v
    result = _Potentials(log_u, log_v)
    for iteration in range(1, iters + 1):
        log_u = log_row - torch.logsumexp(log_kernel + log_v.unsqueeze(-2), dim=-1)
        log_col_sums = torch.logsumexp(log_kernel + log_u.unsqueeze(-1), dim=-2)
        if col_history is not None:
            col_history.append(_l1((log_col_sums + log_v).exp(), col))
        log_v = log_col - log_col_sums
        plan = _log_plan(log_kernel, log_u, log_v)
        if row_history is not None:
            row_history.append(_l1(plan.sum(-1), row))
        result.log_u, result.log_v, result.iterations = log_u, log_v, iteration
        row_res, col_res = _residuals(plan, row, col)
        if row_res <= tol and col_res <= tol:
            result.converged = True
            break
    return result


def _newton_polish(
    log_kernel: torch.Tensor,
    log_u: torch.Tensor,
    log_v: torch.Tensor,
    row: torch.Tensor,
    col: torch.Tensor,
    steps: int,
    tol: float,
) -> Tuple[torch.Tensor, torch.Tensor, int]:
    """Newton ascent on the dual of one [n, m] problem.

    Each step solves the Hessian system with the last column potential held
    fixed (the dual is invariant to shifting u up and v down), then sets v to
    its exact maximizer so the column marginal is met after every step. A
    step is halved until the dual rises enough or the row violation drops.
    """
    n, m = log_kernel.shape
    log_col = col.log()

    def columns_for(lu: torch.Tensor) -> torch.Tensor:
        return log_col - torch.logsumexp(log_kernel + lu.unsqueeze(-1), dim=-2)

    def dual(lu: torch.Tensor, lv: torch.Tensor, plan: torch.Tensor) -> float:
        return float(lu @ row + lv @ col - plan.sum())

    plan = _log_plan(log_kernel, log_u, log_v)
    used = 0
    while used < steps:
        grad_u, grad_v = row - plan.sum(-1), col - plan.sum(-2)
        if max(float(grad_u.abs().max()), float(grad_v.abs().max())) <= tol:
            break
        used += 1
        size = n + m - 1
        hessian = plan.new_zeros(size, size)
        hessian[:n, :n] = torch.diag(plan.sum(-1))
        hessian[n:, n:] = torch.diag(plan.sum(-2)[:-1])
        hessian[:n, n:] = plan[:, :-1]
        hessian[n:, :n] = plan[:, :-1].T
        gradient = torch.cat([grad_u, grad_v[:-1]])
        try:
            direction = torch.linalg.solve(hessian, gradient)
        except RuntimeError:
            break
        if not bool(torch.isfinite(direction).all()):
            break
        slope = float(gradient @ direction)
        value = dual(log_u, log_v, plan)
        violation = float(grad_u.abs().sum())
        t = 1.0
        accepted = None
        for _ in range(LINE_SEARCH_STEPS):
            cand_u = log_u + t * direction[:n]
            cand_v = columns_for(cand_u)
            cand_plan = _log_plan(log_kernel, cand_u, cand_v)
            if bool(torch.isfinite(cand_plan).all()):
                rises = dual(cand_u, cand_v, cand_plan) >= value + ARMIJO * t * slope
                if rises or float((row - cand_plan.sum(-1)).abs().sum()) < violation:
                    accepted = (cand_u, cand_v, cand_plan)
                    break
            t *= 0.5
        if accepted is None:
            break
        log_u, log_v, plan = accepted
    return log_u, log_v, used


def _polish_batch(
    log_kernel: torch.Tensor,
    potentials: _Potentials,
    row: torch.Tensor,
    col: torch.Tensor,
    steps: int,
    tol: float,
) -> int:
    """Newton-polish every problem in the batch still above tol; returns the most steps any used."""
    n, m = log_kernel.shape[-2:]
    kernels = log_kernel.reshape(-1, n, m)
    log_u = potentials.log_u.reshape(-1, n).clone()
    log_v = potentials.log_v.reshape(-1, m).clone()
    rows, cols = row.reshape(-1, n), col.reshape(-1, m)
    if not (bool(torch.isfinite(log_u).all()) and bool(torch.isfinite(log_v).all())):
        return 0
    most = 0
    for b in range(kernels.shape[0]):
        log_u[b], log_v[b], used = _newton_polish(
            kernels[b], log_u[b], log_v[b], rows[b], cols[b], steps, tol
        )
        most = max(most, used)
    potentials.log_u = log_u.reshape(potentials.log_u.shape)
    potentials.log_v = log_v.reshape(potentials.log_v.shape)
    return most


def sinkhorn(
    cost: torch.Tensor,
    cfg: SinkhornConfig,
    row_marginal: Optional[torch.Tensor] = None,
    col_marginal: Optional[torch.Tensor] = None,
) -> TransportPlan:
    """Entropic OT plan for cost [.., n, m] between uniform (or given) marginals.

    The cost is standardized first, so epsilon is relative to its standard
    deviation and constant shifts do not change the plan. The plan carries no
    gradient.

    Epsilon is annealed from ``epsilon_start`` down to ``epsilon`` in the log
    domain with warm-started potentials, then the final epsilon is solved by
    scaling (direct, falling back to the log domain on overflow). When that
    stops short of tol, Newton steps on the dual potentials finish the job
    within the remaining iterations. Running out of iterations returns the
    last plan with ``converged=False`` and a warning.
    """
    with torch.no_grad():
        if cost.dim() < 2:
            raise TransportError(f"cost must be at least 2-D, got shape {tuple(cost.shape)}")
        work = cost.detach().to(torch.float64)
        n, m = work.shape[-2], work.shape[-1]
        lead = work.shape[:-2]
        row = (
            row_marginal.detach().to(torch.float64)
            if row_marginal is not None
            else torch.full((n,), 1.0 / n, dtype=torch.float64)
        )
        col = (
            col_marginal.detach().to(torch.float64)
            if col_marginal is not None
            else torch.full((m,), 1.0 / m, dtype=torch.float64)
        )
        _check_inputs(work, cfg, row, col)
        row, col = row.expand(*lead, n), col.expand(*lead, m)
        standardized = standardize_cost(work)

        reserve = min(cfg.newton_steps, cfg.max_iters // 4)
        stages = epsilon_schedule(cfg)
        if len(stages) * cfg.anneal_iters > (cfg.max_iters - reserve) // 2:
            stages = []
        potentials = _Potentials(torch.zeros_like(row), torch.zeros_like(col))
        used = 0
        previous = None
        for eps in stages + [cfg.epsilon]:
            if previous is not None:
                potentials.log_u = potentials.log_u * (previous / eps)
                potentials.log_v = potentials.log_v * (previous / eps)
            previous = eps
            if eps == cfg.epsilon:
                break
            stage = _scale_log(-standardized / eps, potentials, row, col, cfg.anneal_iters, cfg.tol)
            used += stage.iterations
            potentials = _Potentials(stage.log_u, stage.log_v)

        log_kernel = -standardized / cfg.epsilon
        budget = cfg.max_iters - used - reserve
        row_history: List[float] = []
        col_history: List[float] = []
        used_log = cfg.log_domain
        result = (
            None
            if used_log
            else _scale_direct(log_kernel, potentials, row, col, budget, cfg.tol, row_history, col_history)
        )
        if result is None:
            used_log = True
            row_history.clear()
            col_history.clear()
            result = _scale_log(log_kernel, potentials, row, col, budget, cfg.tol, row_history, col_history)
        used += result.iterations

        newton = 0
        if not result.converged and cfg.newton_steps > 0 and cfg.max_iters > used:
            steps = min(cfg.newton_steps, cfg.max_iters - used)
            newton = _polish_batch(log_kernel, result, row, col, steps, cfg.tol)
            used += newton

        plan = _log_plan(log_kernel, result.log_u, result.log_v)
        row_res, col_res = _residuals(plan, row, col)
        converged = row_res <= cfg.tol and col_res <= cfg.tol
        if not converged:
            warnings.warn(
                f"Sinkhorn stopped after {used} iterations with residuals "
                f"row={row_res:.3g} col={col_res:.3g} (tol {cfg.tol:g})",
                DiagnosticWarning,
                stacklevel=2,
            )
        return TransportPlan(
            plan=plan.to(cost.dtype),
            row_marginal=row.to(cost.dtype),
            col_marginal=col.to(cost.dtype),
            row_residual=row_res,
            col_residual=col_res,
            iterations=used,
            converged=converged,
            log_domain=used_log,
            newton_steps=newton,
            row_history=row_history,
            col_history=col_history,
        )

