"""Inference (candidate objects) and the video segmentation metric suite."""

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import yaml
from rich.table import Table
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .config import RunConfig, config_fingerprint
from .dataset import palette, save_indexed_png
from .fusion import adjacent_partners
from .model import ClipOutput, SlotModel
from .numerics import DiagnosticWarning, RngState
from .objectives import hungarian_match, validity
from .synthetic import VideoSample

METRICS = ("iou", "j", "f", "jf", "fg_ari", "prop_j", "prop_f", "prop_jf")
MULTI_MODE = "multi"


class EvaluationError(Exception):
    """Inference or scoring could not be carried out."""

    pass


@dataclass
class Candidate:
    """One valid instance in one frame; masks and attention are patch-level [HW]."""

    frame: int
    semantic: int
    instance: int
    track: int
    mask: np.ndarray
    attention: np.ndarray
    slot: np.ndarray


@dataclass
class InferenceResult:
    """Per-frame candidates and pixel-level maps [L, H, W].

    ``labels`` holds track id + 1 (0 = background), ``semantic_map`` the argmax
    semantic and ``instance_map`` 1 + n * P + p for assigned pixels.
    """

    candidates: List[List[Candidate]]
    foreground: np.ndarray
    labels: np.ndarray
    semantic_map: np.ndarray
    instance_map: np.ndarray
    background: np.ndarray


def frames_to_tensor(frames: np.ndarray) -> torch.Tensor:
    """uint8 [L, H, W, 3] -> float [L, 3, H, W] in [0, 1] with the default dtype."""
    tensor = torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2)
    return tensor.to(torch.get_default_dtype()) / 255.0


def upsample(patch_map: np.ndarray, grid: int, patch_size: int) -> np.ndarray:
    """[..., HW] patch values -> [..., grid * p, grid * p] pixels (nearest)."""
    shaped = patch_map.reshape(*patch_map.shape[:-1], grid, grid)
    return np.repeat(np.repeat(shaped, patch_size, axis=-2), patch_size, axis=-1)


def border_background(binarized: np.ndarray, grid: int) -> np.ndarray:
    """[L, N, HW] -> [L, N] bool: semantics covering at least half the border patches."""
    border = np.zeros((grid, grid), dtype=bool)
    border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
    flat = border.reshape(-1)
    coverage = binarized[..., flat].sum(axis=-1) / flat.sum()
    return np.asarray(coverage >= 0.5)


def link_tracks(slots: torch.Tensor) -> np.ndarray:
    """Track ids [L, N, P] from instance slots [L, N, P, D].

    Slots of each frame are matched to the previous frame per semantic, so a
    track keeps its id n * P + p0 where p0 is its index in frame 0.
    """
    num_frames, num_semantics, num_instances = slots.shape[0], slots.shape[1], slots.shape[2]
    canonical = np.tile(np.arange(num_instances), (num_frames, num_semantics, 1))
    for f in range(1, num_frames):
        for n in range(num_semantics):
            perm = hungarian_match(slots[f, n], slots[f - 1, n])
            canonical[f, n] = canonical[f - 1, n][perm]
    offsets = (np.arange(num_semantics) * num_instances)[None, :, None]
    return np.asarray(canonical + offsets)


def candidate_objects(output: ClipOutput, cfg: RunConfig) -> Tuple[List[List[Candidate]], np.ndarray]:
    """Valid (n, p) pairs per frame of a single clip, plus the [L, N] background flags.

    An instance's mask is its semantic region restricted to the pixels where
    its masked weights A win the argmax over the semantic's valid instances,
    and A is also the attention a candidate carries. Without the instance
    stage every valid semantic is one candidate.
    """
    semantic = output.slots.semantic
    binarized = output.slots.binarized.detach().cpu().numpy() > 0
    num_frames, num_semantics = binarized.shape[0], binarized.shape[1]
    grid = cfg.model.grid
    if cfg.eval.border_background and cfg.model.use_semantic:
        background = border_background(binarized, grid)
    else:
        background = np.zeros((num_frames, num_semantics), dtype=bool)
    area_ok = binarized.mean(axis=-1) >= cfg.loss.tau1
    candidates: List[List[Candidate]] = [[] for _ in range(num_frames)]
    instance = output.slots.instance
    if instance is None:
        masks = semantic.masks.detach().cpu().numpy()
        centers = semantic.centers.detach().cpu().numpy()
        for f in range(num_frames):
            for n in range(num_semantics):
                if area_ok[f, n] and not background[f, n]:
                    candidates[f].append(
                        Candidate(f, n, 0, n * cfg.model.num_instances, binarized[f, n], masks[f, n], centers[f, n])
                    )
        return candidates, background

    valid = validity(
        output.slots.binarized, semantic.centers, instance.slots, cfg.loss.tau1, cfg.loss.tau2
    ).cpu().numpy() > 0
    tracks = link_tracks(instance.slots.detach().cpu())
    attention = instance.weights.detach().cpu().numpy()
    slots = instance.slots.detach().cpu().numpy()
    for f in range(num_frames):
        for n in range(num_semantics):
            keep = np.flatnonzero(valid[f, n])
            if background[f, n] or keep.size == 0:
                continue
            winner = keep[np.argmax(attention[f, n, keep], axis=0)]
            for p in keep:
                mask = binarized[f, n] & (winner == p)
                candidates[f].append(
                    Candidate(f, n, int(p), int(tracks[f, n, p]), mask, attention[f, n, p], slots[f, n, p])
                )
    return candidates, background


def infer(video: VideoSample, model: SlotModel, cfg: RunConfig) -> InferenceResult:
    """Run the model over a whole video and turn candidates into pixel maps.

    The foreground is the union of candidate masks; each labeled pixel goes to
    the covering candidate with the largest masked weight.
    """
    if video.num_frames < 2:
        raise EvaluationError(f"video {video.name} has {video.num_frames} frame(s); need at least 2")
    frames = frames_to_tensor(video.frames)
    model.eval()
    with torch.no_grad():
        output = model.forward_clip(frames, adjacent_partners(video.num_frames), RngState(cfg.train.seed))
    candidates, background = candidate_objects(output, cfg)

    grid, patch = cfg.model.grid, cfg.model.patch_size
    num_frames, num_patches = video.num_frames, cfg.model.num_patches
    num_instances = cfg.model.num_instances
    fg = np.zeros((num_frames, num_patches), dtype=bool)
    labels = np.zeros((num_frames, num_patches), dtype=np.int64)
    instance_ids = np.zeros((num_frames, num_patches), dtype=np.int64)
    for f, frame_candidates in enumerate(candidates):
        if not frame_candidates:
            continue
        cover = np.stack([c.mask for c in frame_candidates])
        score = np.where(cover, np.stack([c.attention for c in frame_candidates]), -np.inf)
        best = np.argmax(score, axis=0)
        covered = cover.any(axis=0)
        fg[f] = covered
        tracks = np.array([c.track for c in frame_candidates])
        ids = np.array([c.semantic * num_instances + c.instance for c in frame_candidates])
        labels[f] = np.where(covered, tracks[best] + 1, 0)
        instance_ids[f] = np.where(covered, ids[best] + 1, 0)
    semantic_map = output.masks.detach().cpu().numpy().argmax(axis=-2)
    return InferenceResult(
        candidates=candidates,
        foreground=upsample(fg, grid, patch),
        labels=upsample(labels, grid, patch),
        semantic_map=upsample(semantic_map, grid, patch),
        instance_map=upsample(instance_ids, grid, patch),
        background=background,
    )


def instance_palette(num_semantics: int, num_instances: int) -> List[int]:
    """Index 1 + n * P + p gets semantic n's color, darkened per instance."""
    if 1 + num_semantics * num_instances > 256:
        raise EvaluationError(
            f"{num_semantics} x {num_instances} instances do not fit an indexed PNG palette"
        )
    base = palette()
    colors = [0, 0, 0]
    for n in range(num_semantics):
        r, g, b = base[3 * (n + 1) : 3 * (n + 2)]
        for p in range(num_instances):
            shade = 1.0 - 0.6 * p / max(num_instances, 1)
            colors.extend(int(round(c * shade)) for c in (r, g, b))
    return colors + [0] * (768 - len(colors))


def export_masks(result: InferenceResult, out_dir: Path, num_semantics: int, num_instances: int) -> None:
    """Write semantic/<f>.png and instance/<f>.png palette maps, colors keyed by semantic index."""
    semantic_dir, instance_dir = out_dir / "semantic", out_dir / "instance"
    try:
        semantic_dir.mkdir(parents=True, exist_ok=True)
        instance_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise EvaluationError(f"Cannot create export directory {out_dir}: {e}")
    inst_colors = instance_palette(num_semantics, num_instances)
    # semantic index n is stored as n + 1 so the palette matches the instance maps
    for f in range(result.semantic_map.shape[0]):
        save_indexed_png(semantic_dir / f"{f:05d}.png", result.semantic_map[f] + 1)
        save_indexed_png(instance_dir / f"{f:05d}.png", result.instance_map[f], inst_colors)


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """|pred & gt| / |pred | gt|; two empty masks score 1."""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise EvaluationError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def default_tolerance(shape: Sequence[int], fraction: float = 0.008) -> int:
    """Boundary tolerance in pixels: ceil(fraction * image diagonal)."""
    return int(math.ceil(fraction * math.hypot(shape[-2], shape[-1])))


def contour(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbor outside the mask (outside the image counts as background)."""
    cross = ndimage.generate_binary_structure(2, 1)
    eroded = ndimage.binary_erosion(mask, structure=cross, border_value=0)
    return np.asarray(mask & ~eroded)


def _disk(radius: int) -> np.ndarray:
    ys, xs = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return np.asarray(xs * xs + ys * ys <= radius * radius)


def boundary_f(pred: np.ndarray, gt: np.ndarray, tolerance_px: Optional[int] = None) -> float:
    """Contour F-measure with matches allowed within a disk of ``tolerance_px``."""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise EvaluationError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tol = default_tolerance(gt.shape) if tolerance_px is None else tolerance_px
    pred_c, gt_c = contour(pred), contour(gt)
    n_pred, n_gt = int(pred_c.sum()), int(gt_c.sum())
    if n_pred == 0 and n_gt == 0:
        return 1.0
    if n_pred == 0 or n_gt == 0:
        return 0.0
    disk = _disk(tol)
    gt_zone = ndimage.binary_dilation(gt_c, structure=disk) if tol > 0 else gt_c
    pred_zone = ndimage.binary_dilation(pred_c, structure=disk) if tol > 0 else pred_c
    precision = float((pred_c & gt_zone).sum()) / n_pred
    recall = float((gt_c & pred_zone).sum()) / n_gt
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def jaccard_and_f(
    pred: np.ndarray, gt: np.ndarray, tolerance_px: Optional[int] = None
) -> Tuple[float, float]:
    """Mean per-frame J and F over [L, H, W] masks."""
    if pred.shape != gt.shape:
        raise EvaluationError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    j = [iou(p, g) for p, g in zip(pred, gt)]
    f = [boundary_f(p, g, tolerance_px) for p, g in zip(pred, gt)]
    return float(np.mean(j)), float(np.mean(f))


def multi_object_eval(
    pred_labels: np.ndarray, gt_labels: np.ndarray, tolerance_px: Optional[int] = None
) -> Tuple[float, float, float]:
    """(J, F, J&F) over GT tracks after a video-level assignment of predicted tracks.

    Label 0 is background in both [L, H, W] maps. Unmatched GT tracks score 0.
    """
    gt_ids = [int(i) for i in np.unique(gt_labels) if i != 0]
    pred_ids = [int(i) for i in np.unique(pred_labels) if i != 0]
    if not gt_ids:
        score = 1.0 if not pred_ids else 0.0
        return score, score, score
    j = np.zeros((len(gt_ids), len(pred_ids)))
    f = np.zeros((len(gt_ids), len(pred_ids)))
    for a, g in enumerate(gt_ids):
        for b, p in enumerate(pred_ids):
            j[a, b], f[a, b] = jaccard_and_f(pred_labels == p, gt_labels == g, tolerance_px)
    j_total = f_total = 0.0
    if pred_ids:
        rows, cols = linear_sum_assignment((j + f) / 2.0, maximize=True)
        j_total = float(j[rows, cols].sum())
        f_total = float(f[rows, cols].sum())
    j_mean, f_mean = j_total / len(gt_ids), f_total / len(gt_ids)
    return j_mean, f_mean, (j_mean + f_mean) / 2.0


def fg_ari(pred: np.ndarray, gt: np.ndarray) -> float:
    """Adjusted Rand index over pixels where gt > 0.

    Cases where the index is undefined (fewer than two pixels, or both
    labelings a single cluster) score 0 with a DiagnosticWarning.
    """
    pred, gt = np.asarray(pred).reshape(-1), np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise EvaluationError(f"labelings differ in size: {pred.size} vs {gt.size}")
    fg = gt > 0
    _, true_ids = np.unique(gt[fg], return_inverse=True)
    _, pred_ids = np.unique(pred[fg], return_inverse=True)
    n = float(true_ids.size)
    if n < 2:
        warnings.warn("FG-ARI undefined for fewer than two foreground pixels", DiagnosticWarning, stacklevel=2)
        return 0.0
    nij = np.zeros((pred_ids.max() + 1, true_ids.max() + 1))
    np.add.at(nij, (pred_ids, true_ids), 1.0)
    a, b = nij.sum(axis=0), nij.sum(axis=1)
    rindex = float((nij * (nij - 1)).sum())
    aindex = float((a * (a - 1)).sum())
    bindex = float((b * (b - 1)).sum())
    expected = aindex * bindex / (n * (n - 1))
    maximum = (aindex + bindex) / 2.0
    if maximum == expected:
        warnings.warn("FG-ARI undefined for single-cluster labelings", DiagnosticWarning, stacklevel=2)
        return 0.0
    return (rindex - expected) / (maximum - expected)


@dataclass
class Propagation:
    """Soft label distributions [L, HW, C] and hard labels [L, HW]."""

    soft: np.ndarray
    labels: np.ndarray


def label_propagate(
    features: torch.Tensor,
    first_labels: torch.Tensor,
    k: int = 10,
    temperature: float = 0.07,
    context_len: int = 7,
) -> Propagation:
    """Carry frame-0 label distributions [HW, C] through features [L, HW, D].

    Each frame attends to frame 0 and the previous ``context_len`` frames; per
    query patch only the top-k affinities are kept and softmaxed with the
    temperature.
    """
    if features.dim() != 3 or first_labels.dim() != 2:
        raise EvaluationError("label propagation needs features [L, HW, D] and labels [HW, C]")
    if first_labels.shape[0] != features.shape[1]:
        raise EvaluationError(
            f"first-frame labels cover {first_labels.shape[0]} patches, features {features.shape[1]}"
        )
    feats = torch.nn.functional.normalize(features.detach(), dim=-1)
    soft = [first_labels.to(feats.dtype)]
    for f in range(1, feats.shape[0]):
        context = sorted({0, *range(max(0, f - context_len), f)})
        keys = torch.cat([feats[c] for c in context])
        values = torch.cat([soft[c] for c in context])
        affinity = feats[f] @ keys.transpose(0, 1)
        top, index = affinity.topk(min(k, keys.shape[0]), dim=-1)
        weights = torch.softmax(top / temperature, dim=-1)
        soft.append((weights.unsqueeze(-1) * values[index]).sum(dim=-2))
    stacked = torch.stack(soft).cpu().numpy()
    return Propagation(soft=stacked, labels=stacked.argmax(axis=-1))


def patch_majority(labels: np.ndarray, patch_size: int) -> np.ndarray:
    """[H, W] pixel labels -> [HW] per-patch majority label (ties go to the smaller id)."""
    height, width = labels.shape
    gh, gw = height // patch_size, width // patch_size
    blocks = labels.reshape(gh, patch_size, gw, patch_size).transpose(0, 2, 1, 3).reshape(gh * gw, -1)
    return np.array([np.bincount(block).argmax() for block in blocks.astype(np.int64)])


def encode_frames(video: VideoSample, model: SlotModel) -> torch.Tensor:
    """Encoder features [L, HW, D] for every frame of the video."""
    frames = frames_to_tensor(video.frames)
    model.eval()
    with torch.no_grad():
        return model.encode(frames)


def propagation_scores(
    pred: np.ndarray, gt: np.ndarray, tolerance_px: Optional[int] = None
) -> Tuple[float, float, float]:
    """(J, F, J&F) per GT object with labels taken literally, no track assignment."""
    gt_ids = [int(i) for i in np.unique(gt) if i != 0]
    if not gt_ids:
        score = 1.0 if not (pred > 0).any() else 0.0
        return score, score, score
    scores = [jaccard_and_f(pred == g, gt == g, tolerance_px) for g in gt_ids]
    j = float(np.mean([s[0] for s in scores]))
    f = float(np.mean([s[1] for s in scores]))
    return j, f, (j + f) / 2.0


def propagate_video(video: VideoSample, model: SlotModel, cfg: RunConfig) -> Dict[str, float]:
    """Carry the frame-0 ground truth through the encoder features and score frames 1..L-1."""
    if video.num_frames < 2:
        raise EvaluationError(f"video {video.name} has {video.num_frames} frame(s); need at least 2")
    gt = video.instances.astype(np.int64)
    first = patch_majority(gt[0], cfg.model.patch_size)
    one_hot = torch.nn.functional.one_hot(torch.from_numpy(first), int(gt.max()) + 1)
    propagation = label_propagate(
        encode_frames(video, model),
        one_hot.to(torch.get_default_dtype()),
        k=cfg.eval.propagation_k,
        temperature=cfg.eval.propagation_temperature,
        context_len=cfg.eval.propagation_context,
    )
    pred = upsample(propagation.labels, cfg.model.grid, cfg.model.patch_size)
    tol = default_tolerance(gt.shape, cfg.eval.boundary_tolerance)
    j, f, jf = propagation_scores(pred[1:], gt[1:], tol)
    return {"prop_j": j, "prop_f": f, "prop_jf": jf}


@dataclass
class MetricReport:
    """Per-video and aggregate metrics plus the config fingerprint they were computed under."""

    mode: str
    fingerprint: str
    per_video: Dict[str, Dict[str, float]] = field(default_factory=dict)

    @property
    def aggregate(self) -> Dict[str, float]:
        if not self.per_video:
            return {name: 0.0 for name in METRICS}
        return {
            name: float(np.mean([scores[name] for scores in self.per_video.values()]))
            for name in METRICS
        }

    def to_dict(self) -> Dict[str, object]:
        return {
            "mode": self.mode,
            "config_fingerprint": self.fingerprint,
            "aggregate": self.aggregate,
            "videos": self.per_video,
        }


def score_video(video: VideoSample, result: InferenceResult, cfg: RunConfig) -> Dict[str, float]:
    gt = video.instances.astype(np.int64)
    tol = default_tolerance(gt.shape, cfg.eval.boundary_tolerance)
    fg_iou = float(np.mean([iou(p, g > 0) for p, g in zip(result.foreground, gt)]))
    if cfg.eval.mode == MULTI_MODE:
        j, f, jf = multi_object_eval(result.labels, gt, tol)
    else:
        j, f = jaccard_and_f(result.foreground, gt > 0, tol)
        jf = (j + f) / 2.0
    return {"iou": fg_iou, "j": j, "f": f, "jf": jf, "fg_ari": fg_ari(result.labels, gt)}


def evaluate_dataset(model: SlotModel, samples: Sequence[VideoSample], cfg: RunConfig) -> MetricReport:
    """Infer, score and propagate every video; the aggregate is the mean over videos."""
    report = MetricReport(mode=cfg.eval.mode, fingerprint=config_fingerprint(cfg))
    for video in samples:
        scores = score_video(video, infer(video, model, cfg), cfg)
        scores.update(propagate_video(video, model, cfg))
        report.per_video[video.name] = scores
    return report


def write_report(report: MetricReport, path: Path) -> None:
    """Machine-readable YAML report."""
    try:
        path.write_text(yaml.safe_dump(report.to_dict(), sort_keys=True))
    except OSError as e:
        raise EvaluationError(f"Cannot write report {path}: {e}")


def report_table(report: MetricReport, per_video: bool = False) -> Table:
    """Human-readable summary table."""
    table = Table(title=f"Metrics ({report.mode}-object)")
    table.add_column("Video")
    for name in METRICS:
        table.add_column(name.upper().replace("_", "-"), justify="right")
    if per_video:
        for video, scores in sorted(report.per_video.items()):
            table.add_row(video, *(f"{scores[name]:.3f}" for name in METRICS))
    aggregate = report.aggregate
    table.add_row("[bold]mean[/bold]", *(f"{aggregate[name]:.3f}" for name in METRICS))
    return table
