"""On-disk video datasets: PNG frames, indexed-palette PNG masks and a YAML manifest per video.

Layout::

    <root>/<video>/frames/00000.png   RGB frames
    <root>/<video>/masks/00000.png    palette masks, index = instance id
    <root>/<video>/manifest.yaml      name, classes, scene spec and seed

Real image-sequence datasets in the same layout (manifest optional, JPEG
frames allowed) load through ``load_external_dataset``.
"""

from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml
from PIL import Image

from .synthetic import SceneSpec, VideoSample

FRAMES_DIR = "frames"
MASKS_DIR = "masks"
MANIFEST = "manifest.yaml"
FRAME_SUFFIXES = (".png", ".jpg", ".jpeg")


class DatasetError(Exception):
    """Missing, corrupt or inconsistent dataset files."""

    pass


def palette() -> List[int]:
    """The 256-entry bit-interleaved palette used by video segmentation benchmarks."""
    colors: List[int] = []
    for index in range(256):
        r = g = b = 0
        value = index
        for shift in range(7, -1, -1):
            r |= ((value >> 0) & 1) << shift
            g |= ((value >> 1) & 1) << shift
            b |= ((value >> 2) & 1) << shift
            value >>= 3
        colors.extend((r, g, b))
    return colors


def save_indexed_png(path: Path, labels: np.ndarray, colors: Optional[List[int]] = None) -> None:
    """Write a [H, W] label map (values < 256) as a palette PNG."""
    if labels.ndim != 2 or labels.size and int(labels.max()) > 255:
        raise DatasetError(f"cannot store labels of shape {labels.shape} as indexed PNG {path}")
    height, width = labels.shape
    image = Image.frombytes("P", (width, height), labels.astype(np.uint8).tobytes())
    image.putpalette(colors or palette())
    image.save(path)


def load_indexed_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as image:
            if image.mode not in ("P", "L"):
                raise DatasetError(f"mask {path} is {image.mode}, expected an indexed PNG")
            return np.array(image, dtype=np.uint8)
    except OSError as e:
        raise DatasetError(f"Cannot read mask {path}: {e}")


def _load_frame(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as image:
            return np.array(image.convert("RGB"), dtype=np.uint8)
    except OSError as e:
        raise DatasetError(f"Cannot read frame {path}: {e}")


def write_video(sample: VideoSample, root: Path) -> Path:
    """Write one video folder and return its path."""
    folder = root / sample.name
    try:
        (folder / FRAMES_DIR).mkdir(parents=True, exist_ok=True)
        (folder / MASKS_DIR).mkdir(parents=True, exist_ok=True)
        for f in range(sample.num_frames):
            Image.fromarray(sample.frames[f]).save(folder / FRAMES_DIR / f"{f:05d}.png")
            save_indexed_png(folder / MASKS_DIR / f"{f:05d}.png", sample.instances[f])
        manifest: Dict[str, Any] = {
            "name": sample.name,
            "num_frames": sample.num_frames,
            "classes": list(sample.classes),
            "seed": sample.spec.seed if sample.spec else None,
            "spec": sample.spec.to_dict() if sample.spec else None,
        }
        (folder / MANIFEST).write_text(yaml.safe_dump(manifest, sort_keys=True))
    except OSError as e:
        raise DatasetError(f"Cannot write video {folder}: {e}")
    return folder


def write_dataset(samples: List[VideoSample], root: Path) -> None:
    """Write every sample under root."""
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"Cannot create dataset directory {root}: {e}")
    for sample in samples:
        write_video(sample, root)


def _read_manifest(folder: Path, required: bool) -> Optional[Dict[str, Any]]:
    path = folder / MANIFEST
    if not path.exists():
        if required:
            raise DatasetError(f"Missing manifest {path}")
        return None
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as e:
        raise DatasetError(f"Cannot read manifest {path}: {e}")
    if not isinstance(data, dict):
        raise DatasetError(f"Manifest {path} must contain a mapping")
    return data


def _frame_files(folder: Path, suffixes: Tuple[str, ...]) -> List[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in suffixes)


def _resize(frames: np.ndarray, masks: np.ndarray, size: int) -> Tuple[np.ndarray, np.ndarray]:
    resized_frames = np.stack(
        [np.array(Image.fromarray(f).resize((size, size), Image.Resampling.BILINEAR)) for f in frames]
    )
    resized_masks = np.stack(
        [np.array(Image.fromarray(m).resize((size, size), Image.Resampling.NEAREST)) for m in masks]
    )
    return resized_frames, resized_masks


def read_video(
    folder: Path,
    require_manifest: bool = True,
    image_size: Optional[int] = None,
    require_masks: bool = True,
) -> VideoSample:
    """Load one video folder.

    Without ``require_masks`` a folder holding only frames loads with all-zero
    instance masks.
    """
    frames_dir, masks_dir = folder / FRAMES_DIR, folder / MASKS_DIR
    if not frames_dir.is_dir():
        raise DatasetError(f"Missing folder {frames_dir}")
    has_masks = masks_dir.is_dir()
    if require_masks and not has_masks:
        raise DatasetError(f"Missing folder {masks_dir}")
    manifest = _read_manifest(folder, require_manifest)
    suffixes = (".png",) if require_manifest else FRAME_SUFFIXES
    frame_files = _frame_files(frames_dir, suffixes)
    mask_files = _frame_files(masks_dir, (".png",)) if has_masks else []
    if has_masks and len(frame_files) != len(mask_files):
        raise DatasetError(
            f"{folder} has {len(frame_files)} frames but {len(mask_files)} masks"
        )
    if manifest is not None and int(manifest.get("num_frames", len(frame_files))) != len(frame_files):
        raise DatasetError(
            f"{folder} manifest lists {manifest['num_frames']} frames, found {len(frame_files)}"
        )
    if not frame_files:
        raise DatasetError(f"{folder} contains no frames")
    frames = np.stack([_load_frame(p) for p in frame_files])
    if has_masks:
        masks = np.stack([load_indexed_png(p) for p in mask_files])
    else:
        masks = np.zeros(frames.shape[:3], dtype=np.uint8)
    if frames.shape[1:3] != masks.shape[1:3]:
        raise DatasetError(
            f"{folder} frames are {frames.shape[1:3]} but masks are {masks.shape[1:3]}"
        )
    if image_size is not None and frames.shape[1:3] != (image_size, image_size):
        frames, masks = _resize(frames, masks, image_size)

    spec = None
    if manifest is not None and manifest.get("spec"):
        spec = SceneSpec.from_dict(manifest["spec"])
    if manifest is not None and "classes" in manifest:
        classes = [int(c) for c in manifest["classes"]]
    else:
        classes = [0] * int(masks.max(initial=0))
    visibility = np.zeros((masks.shape[0], len(classes)), dtype=np.int64)
    for k in range(1, len(classes) + 1):
        visibility[:, k - 1] = (masks == k).sum(axis=(1, 2))
    return VideoSample(
        name=str(manifest.get("name", folder.name)) if manifest else folder.name,
        frames=frames,
        instances=masks,
        classes=classes,
        visibility=visibility,
        spec=spec,
    )


def _video_folders(root: Path) -> List[Path]:
    if not root.is_dir():
        raise DatasetError(f"Dataset directory {root} does not exist")
    return sorted(p for p in root.iterdir() if p.is_dir())


def read_dataset(root: Path) -> List[VideoSample]:
    """Load every video written by ``write_dataset``; an empty directory is an empty dataset."""
    return [read_video(folder) for folder in _video_folders(root)]


def load_external_dataset(root: Path, image_size: Optional[int] = None) -> List[VideoSample]:
    """Load an image-sequence dataset in the same layout, resizing to ``image_size``.

    Frames are resized bilinearly and masks nearest-neighbor.
    """
    return [
        read_video(folder, require_manifest=False, image_size=image_size)
        for folder in _video_folders(root)
    ]
