"""Input validation for maskslot configuration values."""

from typing import Sequence

FEATURE_MODES = ("fused", "rgb", "correlation")
SLOT_INITS = ("query", "random")
PRECISIONS = ("float32", "float64")
BACKGROUND_MODES = ("flat", "texture")
EVAL_MODES = ("single", "multi")
SHAPE_CLASSES = ("disk", "square", "triangle")


def validate_positive(name: str, value: float) -> float:
    """Require value > 0."""
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def validate_at_least(name: str, value: int, minimum: int) -> int:
    """Require an integer no smaller than minimum."""
    if value < minimum:
        raise ValueError(f"{name} must be at least {minimum}, got {value}")
    return value


def validate_unit_interval(name: str, value: float) -> float:
    """Require 0 <= value <= 1."""
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value}")
    return value


def validate_choice(name: str, value: str, choices: Sequence[str]) -> str:
    """Require value to be one of choices."""
    if value not in choices:
        raise ValueError(f"{name} must be one of {', '.join(choices)}, got {value!r}")
    return value


def validate_divisible(name: str, extent: int, patch_size: int) -> int:
    """Require a pixel extent to be a multiple of the patch size."""
    if patch_size <= 0 or extent % patch_size != 0:
        raise ValueError(
            f"{name}={extent} is not divisible by patch size {patch_size}"
        )
    return extent
