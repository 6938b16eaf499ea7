"""Versioned training checkpoints.

Format version 1 is a ``torch.save`` dict::

    format_version  int (1)
    step            completed optimizer steps
    student         state_dict of the student SlotModel
    teacher         state_dict of the teacher SlotModel
    optimizer       AdamW state_dict
    scheduler       warm-up LambdaLR state_dict
    rng             {"seed": int, "position": int}
    config          the resolved RunConfig as a plain dict
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

import torch

from .config import ConfigError, RunConfig, config_from_dict, config_to_dict
from .model import SlotModel
from .numerics import RngState

FORMAT_VERSION = 1
REQUIRED_KEYS = ("format_version", "step", "student", "teacher", "optimizer", "rng", "config")


class CheckpointError(Exception):
    """Unreadable, incompatible or incomplete checkpoint."""

    pass


@dataclass
class Checkpoint:
    step: int
    student: Dict[str, torch.Tensor]
    teacher: Dict[str, torch.Tensor]
    optimizer: Dict[str, Any]
    rng: RngState
    config: RunConfig
    scheduler: Dict[str, Any] = field(default_factory=dict)


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "step": checkpoint.step,
        "student": checkpoint.student,
        "teacher": checkpoint.teacher,
        "optimizer": checkpoint.optimizer,
        "scheduler": checkpoint.scheduler,
        "rng": checkpoint.rng.to_dict(),
        "config": config_to_dict(checkpoint.config),
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
    except OSError as e:
        raise CheckpointError(f"Cannot write checkpoint {path}: {e}")


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"Checkpoint {path} does not exist")
    except Exception as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    if not isinstance(payload, dict):
        raise CheckpointError(f"Checkpoint {path} is not a mapping")
    missing = [key for key in REQUIRED_KEYS if key not in payload]
    if missing:
        raise CheckpointError(f"Checkpoint {path} lacks {', '.join(missing)}")
    if payload["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"Checkpoint {path} has format version {payload['format_version']}, "
            f"expected {FORMAT_VERSION}"
        )
    try:
        config = config_from_dict(payload["config"])
    except ConfigError as e:
        raise CheckpointError(f"Checkpoint {path} carries an invalid config: {e}")
    return Checkpoint(
        step=int(payload["step"]),
        student=payload["student"],
        teacher=payload["teacher"],
        optimizer=payload["optimizer"],
        rng=RngState.from_dict(payload["rng"]),
        config=config,
        scheduler=payload.get("scheduler", {}),
    )


def model_from_checkpoint(checkpoint: Checkpoint, use_teacher: bool = True) -> SlotModel:
    """Rebuild the teacher (default) or student network."""
    model = SlotModel(checkpoint.config.model)
    weights = checkpoint.teacher if use_teacher else checkpoint.student
    try:
        model.load_state_dict(weights)
    except RuntimeError as e:
        raise CheckpointError(f"Checkpoint weights do not fit the configured model: {e}")
    model.eval()
    return model
