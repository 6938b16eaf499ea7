"""Dense tensor primitives, precision policy, seeded RNG streams and gradient checks.

Tensors are torch tensors and parameters are ``torch.nn.Parameter``; autograd
provides the gradients. Every analytic gradient used in training must agree
with ``finite_diff_gradient`` (central differences) at 64-bit precision.
"""

import random
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Tuple, Union

import numpy as np
import torch

from .config import NUM_EPS


class ContractError(ValueError):
    """An operation was called with arguments violating its contract."""

    pass


class NumericsError(Exception):
    """A numerical check failed (non-finite values, bad step size)."""

    pass


class DiagnosticWarning(UserWarning):
    """A degenerate but permitted numerical case was hit."""

    pass


_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def set_precision(mode: str) -> torch.dtype:
    """Set the default floating dtype: float64 for tests, float32 allowed in training."""
    if mode not in _DTYPES:
        raise ContractError(f"Unknown precision {mode!r}, expected float32 or float64")
    dtype = _DTYPES[mode]
    torch.set_default_dtype(dtype)
    return dtype


def seed_everything(seed: int) -> None:
    """Seed the global generators and force deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


@dataclass
class RngState:
    """Seed plus stream position; each ``generator`` call opens a fresh substream.

    Substreams are derived from (seed, position, *keys) through numpy's
    SeedSequence so identical seeds and call sequences give identical draws on
    every platform.
    """

    seed: int
    position: int = 0

    def generator(self, *keys: int) -> torch.Generator:
        """Open the next substream and advance the position."""
        gen = substream(self.seed, self.position, *keys)
        self.position += 1
        return gen

    def to_dict(self) -> Dict[str, int]:
        return {"seed": self.seed, "position": self.position}

    @classmethod
    def from_dict(cls, data: Mapping[str, int]) -> "RngState":
        return cls(seed=int(data["seed"]), position=int(data["position"]))


def substream(*keys: int) -> torch.Generator:
    """A torch generator seeded deterministically from integer keys."""
    entropy = [int(k) % (2**63) for k in keys]
    seed = int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])
    gen = torch.Generator()
    gen.manual_seed(seed % (2**63))
    return gen


def _check_finite(name: str, x: torch.Tensor) -> None:
    if not bool(torch.isfinite(x).all()):
        raise NumericsError(f"{name} produced non-finite values")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product of [m, k] and [k, n]."""
    if a.dim() != 2 or b.dim() != 2:
        raise ContractError(f"matmul expects 2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ContractError(
            f"matmul inner extents differ: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    return a @ b


def softmax_over_axis(x: torch.Tensor, axis: int) -> torch.Tensor:
    """Max-subtracted softmax along one axis."""
    if not -x.dim() <= axis < x.dim():
        raise ContractError(f"axis {axis} out of range for shape {tuple(x.shape)}")
    if x.shape[axis] == 0:
        raise ContractError("softmax over an empty axis")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    exp = shifted.exp()
    return exp / exp.sum(dim=axis, keepdim=True)


def cosine_similarity(
    a: torch.Tensor, b: torch.Tensor, eps: float = NUM_EPS
) -> torch.Tensor:
    """dot(a, b) / (|a| |b| + eps) along the last axis.

    Pairs where both vectors are zero give 0 and emit a DiagnosticWarning.
    """
    if a.shape[-1] != b.shape[-1]:
        raise ContractError(
            f"cosine_similarity dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}"
        )
    dot = (a * b).sum(dim=-1)
    norms = torch.linalg.vector_norm(a, dim=-1) * torch.linalg.vector_norm(b, dim=-1)
    both_zero = (a == 0).all(dim=-1) & (b == 0).all(dim=-1)
    if bool(both_zero.any()):
        warnings.warn(
            f"cosine similarity of {int(both_zero.sum())} zero-vector pair(s) set to 0",
            DiagnosticWarning,
            stacklevel=2,
        )
    return dot / (norms + eps)


def pairwise_cosine(a: torch.Tensor, b: torch.Tensor, eps: float = NUM_EPS) -> torch.Tensor:
    """Cosine matrix between rows of a [..., m, D] and rows of b [..., n, D]."""
    dots = a @ b.transpose(-1, -2)
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    return dots / (na.unsqueeze(-1) * nb.unsqueeze(-2) + eps)


ParamSet = Union[Mapping[str, torch.Tensor], Iterable[Tuple[str, torch.Tensor]]]


def _named(params: ParamSet) -> List[Tuple[str, torch.Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return list(params)


def finite_diff_gradient(
    loss_fn: Callable[[], torch.Tensor], params: ParamSet, step: float = 1e-5
) -> Dict[str, torch.Tensor]:
    """Central-difference gradient (f(x+h) - f(x-h)) / 2h of a scalar loss, per coordinate.

    Parameters are perturbed in place and restored afterwards.
    """
    if not step > 0:
        raise NumericsError(f"finite-difference step must be positive, got {step}")
    grads: Dict[str, torch.Tensor] = {}
    with torch.no_grad():
        for name, param in _named(params):
            flat = param.view(-1)
            grad = torch.zeros_like(flat)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + step
                plus = float(loss_fn())
                flat[i] = original - step
                minus = float(loss_fn())
                flat[i] = original
                if not (np.isfinite(plus) and np.isfinite(minus)):
                    index = np.unravel_index(i, tuple(param.shape))
                    raise NumericsError(
                        f"non-finite loss while perturbing {name}{list(index)}"
                    )
                grad[i] = (plus - minus) / (2.0 * step)
            grads[name] = grad.view_as(param)
    return grads


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """max |g - g_hat| / max(1, |g|, |g_hat|)."""
    denom = torch.maximum(
        torch.ones_like(analytic), torch.maximum(analytic.abs(), numeric.abs())
    )
    return float(((analytic - numeric).abs() / denom).max()) if analytic.numel() else 0.0


@dataclass
class GradCheckResult:
    """Outcome of comparing autograd against central differences."""

    name: str
    max_relative_error: float
    tolerance: float
    per_parameter: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tolerance


def analytic_gradient(
    loss_fn: Callable[[], torch.Tensor], params: ParamSet
) -> Dict[str, torch.Tensor]:
    """Autograd gradient of a scalar loss for each named tensor."""
    named = _named(params)
    tensors = [p for _, p in named]
    loss = loss_fn()
    _check_finite("loss", loss)
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(named, grads)
    }


def check_gradients(
    name: str,
    loss_fn: Callable[[], torch.Tensor],
    params: ParamSet,
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckResult:
    """Compare autograd with finite differences for every parameter."""
    named = _named(params)
    analytic = analytic_gradient(loss_fn, named)
    numeric = finite_diff_gradient(loss_fn, named, step)
    per_param = {key: relative_error(analytic[key], numeric[key]) for key in analytic}
    worst = max(per_param.values()) if per_param else 0.0
    return GradCheckResult(name=name, max_relative_error=worst, tolerance=tol, per_parameter=per_param)
