"""Teacher-student training: clip sampling, augmentation, loss assembly, AdamW and EMA."""

import copy
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import torch
import yaml
from rich.console import Console
from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn
from torch import nn
from torch.optim.lr_scheduler import LambdaLR

from .checkpoint import Checkpoint, save_checkpoint
from .config import AugmentConfig, RunConfig, TrainConfig, config_to_dict
from .evaluation import evaluate_dataset, frames_to_tensor
from .eventlog import log_event
from .fusion import sample_partners
from .model import ClipOutput, SlotModel
from .numerics import ContractError, DiagnosticWarning, RngState, seed_everything, set_precision
from .objectives import (
    LossBreakdown,
    ObjectiveError,
    instance_consistency_loss,
    mask_regularization,
    match_all,
    ordered_pairs,
    semantic_alignment_loss,
    total_loss,
    validity,
)
from .synthetic import VideoSample
from .transport import sinkhorn

LOSS_LOG = "loss_log.tsv"
LOSS_HEADER = "step\ttotal\tsem\treg\tobj\n"


class TrainingError(Exception):
    """Training could not continue; ``dump_path`` points at a reproduction file when one was written."""

    def __init__(self, message: str, dump_path: Optional[Path] = None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class ModelState:
    """Student theta, EMA teacher theta-hat (never optimized), optimizer and RNG stream."""

    student: SlotModel
    teacher: SlotModel
    optimizer: torch.optim.Optimizer
    scheduler: LambdaLR
    rng: RngState
    step: int = 0


def build_optimizer(
    params: Iterable[nn.Parameter], cfg: TrainConfig
) -> Tuple[torch.optim.Optimizer, LambdaLR]:
    """AdamW with decoupled weight decay, plus a linear warm-up when ``warmup_steps`` > 0."""
    optimizer = torch.optim.AdamW(
        params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay
    )
    warmup = cfg.warmup_steps

    def factor(step: int) -> float:
        return min(1.0, (step + 1) / warmup) if warmup > 0 else 1.0

    return optimizer, LambdaLR(optimizer, factor)


def init_state(cfg: RunConfig) -> ModelState:
    """Fresh student; the teacher starts as an exact copy."""
    student = SlotModel(cfg.model)
    teacher = copy.deepcopy(student)
    teacher.requires_grad_(False)
    optimizer, scheduler = build_optimizer(student.parameters(), cfg.train)
    return ModelState(student, teacher, optimizer, scheduler, RngState(cfg.train.seed))


def to_checkpoint(state: ModelState, cfg: RunConfig) -> Checkpoint:
    return Checkpoint(
        step=state.step,
        student=state.student.state_dict(),
        teacher=state.teacher.state_dict(),
        optimizer=state.optimizer.state_dict(),
        rng=RngState(state.rng.seed, state.rng.position),
        config=cfg,
        scheduler=state.scheduler.state_dict(),
    )


def restore_state(checkpoint: Checkpoint) -> ModelState:
    """Rebuild a ModelState to resume training from a checkpoint."""
    state = init_state(checkpoint.config)
    state.student.load_state_dict(checkpoint.student)
    state.teacher.load_state_dict(checkpoint.teacher)
    state.optimizer.load_state_dict(checkpoint.optimizer)
    if checkpoint.scheduler:
        state.scheduler.load_state_dict(checkpoint.scheduler)
    state.rng = RngState(checkpoint.rng.seed, checkpoint.rng.position)
    state.step = checkpoint.step
    return state


def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> None:
    """theta_hat <- m * theta_hat + (1 - m) * theta, per parameter."""
    if not 0.0 <= momentum <= 1.0:
        raise ContractError(f"EMA momentum must be in [0, 1], got {momentum}")
    with torch.no_grad():
        pairs = list(zip(teacher.named_parameters(), student.named_parameters()))
        if len(pairs) != len(list(teacher.parameters())) or len(pairs) != len(list(student.parameters())):
            raise ContractError("teacher and student have different parameter counts")
        for (name, t), (_, s) in pairs:
            if t.shape != s.shape:
                raise ContractError(f"EMA shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
            t.mul_(momentum).add_(s.detach(), alpha=1.0 - momentum)
        for t_buf, s_buf in zip(teacher.buffers(), student.buffers()):
            t_buf.copy_(s_buf)


def optimize(optimizer: torch.optim.Optimizer, scheduler: Optional[LambdaLR] = None) -> None:
    """One AdamW step after checking that every gradient is finite."""
    for group in optimizer.param_groups:
        for param in group["params"]:
            if param.grad is not None and not bool(torch.isfinite(param.grad).all()):
                raise TrainingError("non-finite gradient reached the optimizer")
    optimizer.step()
    if scheduler is not None:
        scheduler.step()


def sample_clip(
    length: int, frames: int, stride: int, generator: torch.Generator
) -> Optional[List[int]]:
    """T evenly strided indices from a uniform start; None (with a warning) if the video is too short."""
    span = (frames - 1) * stride + 1
    if length < span:
        warnings.warn(
            f"video of {length} frames is too short for T={frames}, stride={stride}; skipped",
            DiagnosticWarning,
            stacklevel=2,
        )
        return None
    start = int(torch.randint(0, length - span + 1, (1,), generator=generator))
    return [start + i * stride for i in range(frames)]


@dataclass(frozen=True)
class AugmentParams:
    """A crop window, flip flag and color jitter, shared by every frame of one pathway's view."""

    top: int
    left: int
    height: int
    width: int
    flip: bool = False
    brightness: float = 0.0
    contrast: float = 1.0


def identity_params(height: int, width: int) -> AugmentParams:
    return AugmentParams(top=0, left=0, height=height, width=width)


def _uniform(generator: torch.Generator, low: float, high: float) -> float:
    return low + (high - low) * float(torch.rand((), generator=generator, dtype=torch.float64))


def sample_augment_params(
    cfg: AugmentConfig, height: int, width: int, generator: torch.Generator
) -> AugmentParams:
    if not cfg.enabled:
        return identity_params(height, width)
    top, left, crop_h, crop_w = 0, 0, height, width
    if cfg.crop:
        scale = math.sqrt(_uniform(generator, cfg.min_crop_scale, 1.0))
        crop_h = max(1, round(scale * height))
        crop_w = max(1, round(scale * width))
        top = int(torch.randint(0, height - crop_h + 1, (1,), generator=generator))
        left = int(torch.randint(0, width - crop_w + 1, (1,), generator=generator))
    flip = cfg.flip and _uniform(generator, 0.0, 1.0) < cfg.flip_prob
    brightness, contrast = 0.0, 1.0
    if cfg.jitter:
        brightness = _uniform(generator, -cfg.brightness, cfg.brightness)
        contrast = _uniform(generator, 1.0 - cfg.contrast, 1.0 + cfg.contrast)
    return AugmentParams(top, left, crop_h, crop_w, flip, brightness, contrast)


def apply_augment(frames: torch.Tensor, params: AugmentParams, size: int) -> torch.Tensor:
    """Crop-resize to size x size, optional horizontal flip, brightness/contrast on [..., 3, H, W]."""
    x = frames[..., params.top : params.top + params.height, params.left : params.left + params.width]
    if (params.height, params.width) != (size, size):
        lead = x.shape[:-3]
        x = nn.functional.interpolate(
            x.reshape(-1, *x.shape[-3:]), size=(size, size), mode="bilinear", align_corners=False
        ).reshape(*lead, x.shape[-3], size, size)
    if params.flip:
        x = torch.flip(x, dims=[-1])
    if params.brightness != 0.0 or params.contrast != 1.0:
        mean = x.mean(dim=(-3, -2, -1), keepdim=True)
        x = ((x - mean) * params.contrast + mean + params.brightness).clamp(0.0, 1.0)
    return x


def augment(frames: torch.Tensor, generator: torch.Generator, cfg: AugmentConfig, size: int) -> torch.Tensor:
    """Sample one transform and apply it to every frame of [..., T, 3, H, W]."""
    params = sample_augment_params(cfg, frames.shape[-2], frames.shape[-1], generator)
    return apply_augment(frames, params, size)


def make_views(
    clips: torch.Tensor, cfg: AugmentConfig, size: int, generator: torch.Generator
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Independent student and teacher views of clips [B, T, 3, H, W]."""
    student = [augment(clip, generator, cfg, size) for clip in clips]
    teacher = [augment(clip, generator, cfg, size) for clip in clips]
    return torch.stack(student), torch.stack(teacher)


def assemble_loss(
    student: ClipOutput, teacher: ClipOutput, plans: torch.Tensor, cfg: RunConfig
) -> LossBreakdown:
    """Mean over the batch of L_sem, L_reg and L_obj; plans are [B, T, T, HW, HW]."""
    masks = student.masks
    zero = masks.new_zeros(())
    batch, num_frames = masks.shape[0], masks.shape[1]
    sem_terms: List[torch.Tensor] = []
    reg_terms: List[torch.Tensor] = []
    obj_terms: List[torch.Tensor] = []
    s_inst, t_inst = student.slots.instance, teacher.slots.instance
    for b in range(batch):
        if cfg.model.use_semantic:
            pair_plans: Dict[Tuple[int, int], torch.Tensor] = {
                (t, j): plans[b, t, j] for t, j in ordered_pairs(num_frames)
            }
            sem_terms.append(semantic_alignment_loss(masks[b], teacher.masks[b], pair_plans))
            reg_terms.append(mask_regularization(masks[b]))
        if cfg.loss.enable_obj and s_inst is not None and t_inst is not None:
            s_valid = validity(
                student.slots.binarized[b], student.centers[b], s_inst.slots[b], cfg.loss.tau1, cfg.loss.tau2
            )
            t_valid = validity(
                teacher.slots.binarized[b], teacher.centers[b], t_inst.slots[b], cfg.loss.tau1, cfg.loss.tau2
            )
            matches = match_all(s_inst.slots[b], t_inst.slots[b])
            obj_terms.append(
                instance_consistency_loss(
                    s_inst.slots[b], t_inst.slots[b], s_valid, t_valid, matches, cfg.loss.lambda_margin
                )
            )

    def mean(terms: List[torch.Tensor]) -> torch.Tensor:
        return torch.stack(terms).mean() if terms else zero

    return total_loss(mean(sem_terms), mean(obj_terms), mean(reg_terms), cfg.loss)


def train_step(clips: torch.Tensor, state: ModelState, cfg: RunConfig) -> LossBreakdown:
    """One update on clips [B, T, 3, H, W]: teacher targets, student losses, AdamW, then EMA."""
    rng = state.rng
    num_frames = clips.shape[1]
    student_view, teacher_view = make_views(clips, cfg.augment, cfg.model.image_size, rng.generator())
    partners = sample_partners(num_frames, rng.generator())
    with torch.no_grad():
        teacher_out = state.teacher.forward_clip(teacher_view, partners, rng)
        correlations = state.teacher.all_pair_correlations(teacher_out.features)
        plans = sinkhorn(-correlations, cfg.sinkhorn).plan
    student_out = state.student.forward_clip(student_view, partners, rng)
    breakdown = assemble_loss(student_out, teacher_out, plans, cfg)
    state.optimizer.zero_grad(set_to_none=True)
    if breakdown.total.requires_grad:
        breakdown.total.backward()
    optimize(state.optimizer, state.scheduler)
    ema_update(state.teacher, state.student, cfg.train.momentum)
    state.step += 1
    return breakdown


def sample_batch(
    videos: Sequence[VideoSample], cfg: TrainConfig, generator: torch.Generator
) -> torch.Tensor:
    """B clips [B, T, 3, H, W]; too-short videos are skipped."""
    clips = []
    for _ in range(cfg.batch_size):
        index = int(torch.randint(0, len(videos), (1,), generator=generator))
        video = videos[index]
        frame_ids = sample_clip(video.num_frames, cfg.frames, cfg.stride, generator)
        if frame_ids is not None:
            clips.append(frames_to_tensor(video.frames[frame_ids]))
    if not clips:
        raise TrainingError("no sampled video was long enough for a clip")
    return torch.stack(clips)


def write_reproduction(run_dir: Path, cfg: RunConfig, state: ModelState, reason: str) -> Path:
    """Dump config, seed and stream position for a failed step."""
    path = run_dir / f"failure_step{state.step}.yaml"
    payload = {
        "reason": reason,
        "step": state.step,
        "rng": state.rng.to_dict(),
        "config": config_to_dict(cfg),
    }
    path.write_text(yaml.safe_dump(payload, sort_keys=True))
    return path


def _loss_line(step: int, losses: Dict[str, float]) -> str:
    return f"{step}\t{losses['total']!r}\t{losses['sem']!r}\t{losses['reg']!r}\t{losses['obj']!r}\n"


def train(
    cfg: RunConfig,
    train_set: Sequence[VideoSample],
    eval_set: Sequence[VideoSample],
    run_dir: Path,
    console: Optional[Console] = None,
    state: Optional[ModelState] = None,
) -> ModelState:
    """Run ``cfg.train.steps`` steps, writing the loss log, events and checkpoints under run_dir."""
    console = console or Console()
    tc = cfg.train
    set_precision(tc.precision)
    seed_everything(tc.seed)
    if not any(v.num_frames >= (tc.frames - 1) * tc.stride + 1 for v in train_set):
        raise TrainingError(
            f"no training video has the {(tc.frames - 1) * tc.stride + 1} frames a clip needs"
        )
    state = state or init_state(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    log_file = run_dir / "events.log"
    loss_log = run_dir / LOSS_LOG
    if state.step == 0 or not loss_log.exists():
        loss_log.write_text(LOSS_HEADER)
    checkpoints = run_dir / "checkpoints"
    log_event("TRAIN_START", {"steps": tc.steps, "seed": tc.seed, "videos": len(train_set)}, log_file)

    if state.step >= tc.steps:
        save_checkpoint(checkpoints / f"step_{state.step:06d}.pt", to_checkpoint(state, cfg))
    columns = (TextColumn("{task.description}"), BarColumn(), TextColumn("{task.fields[loss]}"), TimeElapsedColumn())
    with Progress(*columns, console=console, transient=True) as progress:
        task = progress.add_task("Training", total=tc.steps - state.step, loss="")
        while state.step < tc.steps:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", DiagnosticWarning)
                try:
                    clips = sample_batch(train_set, tc, state.rng.generator())
                    breakdown = train_step(clips, state, cfg)
                except (ObjectiveError, TrainingError) as e:
                    dump = write_reproduction(run_dir, cfg, state, str(e))
                    log_event("ERROR", {"step": state.step, "reason": str(e), "dump": dump}, log_file)
                    raise TrainingError(f"step {state.step}: {e}", dump)
            losses = breakdown.as_floats()
            with open(loss_log, "a") as f:
                f.write(_loss_line(state.step, losses))
            if caught and state.step % tc.log_every == 0:
                log_event("WARNING", {"step": state.step, "count": len(caught), "first": caught[0].message}, log_file)
            if state.step % tc.checkpoint_every == 0 or state.step == tc.steps:
                path = checkpoints / f"step_{state.step:06d}.pt"
                save_checkpoint(path, to_checkpoint(state, cfg))
                log_event("CHECKPOINT", {"step": state.step, "path": path}, log_file)
            if eval_set and state.step % tc.eval_every == 0:
                model = state.teacher if cfg.eval.use_teacher else state.student
                report = evaluate_dataset(model, eval_set, cfg)
                state.student.train()
                log_event("EVAL", {"step": state.step, **report.aggregate}, log_file)
            progress.update(task, advance=1, loss=f"loss {losses['total']:.4f}")
    log_event("TRAIN_END", {"step": state.step}, log_file)
    return state
