"""Moving-shape videos with exact instance and class ground truth."""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .config import ConfigError, DataConfig
from .validators import SHAPE_CLASSES

Color = Tuple[int, int, int]

CLASS_COLORS: Tuple[Color, ...] = ((220, 70, 60), (70, 190, 90), (80, 110, 230))
BACKGROUND_COLOR: Color = (40, 40, 40)
COLOR_JITTER = 20
TINT_JITTER = 15
TEXTURE_AMPLITUDE = 30
MAX_SPEED = 2.0


@dataclass
class ObjectSpec:
    """One shape: class index into SHAPE_CLASSES, half-extent in pixels, color, center and velocity (x, y)."""

    shape: int
    size: float
    color: Color
    position: Tuple[float, float]
    velocity: Tuple[float, float]


@dataclass
class SceneSpec:
    size: int
    length: int
    objects: List[ObjectSpec] = field(default_factory=list)
    background: str = "flat"
    background_color: Color = BACKGROUND_COLOR
    seed: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "size": self.size,
            "length": self.length,
            "background": self.background,
            "background_color": list(self.background_color),
            "seed": self.seed,
            "objects": [
                {
                    "shape": o.shape,
                    "size": o.size,
                    "color": list(o.color),
                    "position": list(o.position),
                    "velocity": list(o.velocity),
                }
                for o in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SceneSpec":
        objects = [
            ObjectSpec(
                shape=int(o["shape"]),
                size=float(o["size"]),
                color=_color(o["color"]),
                position=(float(o["position"][0]), float(o["position"][1])),
                velocity=(float(o["velocity"][0]), float(o["velocity"][1])),
            )
            for o in data.get("objects", [])
        ]
        return cls(
            size=int(data["size"]),
            length=int(data["length"]),
            objects=objects,
            background=str(data.get("background", "flat")),
            background_color=_color(data.get("background_color", BACKGROUND_COLOR)),
            seed=int(data.get("seed", 0)),
        )


def _color(values: Any) -> Color:
    r, g, b = (int(v) for v in values)
    return (r, g, b)


@dataclass
class VideoSample:
    """Frames [L, H, W, 3] uint8 and instance masks [L, H, W] (0 = background, k = k-th object).

    ``classes[k - 1]`` is the semantic class of instance k and ``visibility[f, k - 1]``
    its visible pixel count in frame f.
    """

    name: str
    frames: np.ndarray
    instances: np.ndarray
    classes: List[int]
    visibility: np.ndarray
    spec: Optional[SceneSpec] = None

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def num_instances(self) -> int:
        return len(self.classes)


def validate_spec(spec: SceneSpec) -> None:
    """Raise ConfigError unless every object fits the canvas."""
    if spec.size < 1 or spec.length < 1:
        raise ConfigError(f"scene needs a positive canvas and length, got {spec.size}, {spec.length}")
    for k, obj in enumerate(spec.objects):
        if not 0 <= obj.shape < len(SHAPE_CLASSES):
            raise ConfigError(f"object {k} has unknown shape class {obj.shape}")
        if not 0 < obj.size < spec.size / 2:
            raise ConfigError(f"object {k} of size {obj.size} does not fit a {spec.size}px canvas")


def _reflect(start: float, velocity: float, frame: int, low: float, high: float) -> float:
    """Linear motion in [low, high] bouncing off both ends."""
    span = high - low
    if span <= 0:
        return low
    offset = (start - low + velocity * frame) % (2.0 * span)
    return low + (offset if offset <= span else 2.0 * span - offset)


def object_position(obj: ObjectSpec, frame: int, size: int) -> Tuple[float, float]:
    """Center (x, y) of an object at a frame."""
    low, high = obj.size, size - obj.size
    return (
        _reflect(obj.position[0], obj.velocity[0], frame, low, high),
        _reflect(obj.position[1], obj.velocity[1], frame, low, high),
    )


def silhouette(obj: ObjectSpec, center: Tuple[float, float], size: int) -> np.ndarray:
    """Un-occluded boolean mask [size, size], sampled at pixel centers."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xs - center[0], ys - center[1]
    r = obj.size
    name = SHAPE_CLASSES[obj.shape]
    if name == "disk":
        return np.asarray(dx * dx + dy * dy <= r * r)
    if name == "square":
        return np.asarray(np.maximum(np.abs(dx), np.abs(dy)) <= r)
    # apex up, base of width 2r at the bottom
    return np.asarray((dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0))


def _background(spec: SceneSpec) -> np.ndarray:
    canvas = np.empty((spec.size, spec.size, 3), dtype=np.int64)
    canvas[:] = spec.background_color
    if spec.background == "texture":
        noise = np.random.default_rng(spec.seed).integers(
            -TEXTURE_AMPLITUDE, TEXTURE_AMPLITUDE + 1, size=canvas.shape
        )
        canvas = canvas + noise
    return canvas


def generate_video(spec: SceneSpec, name: str = "video") -> VideoSample:
    """Render a scene; later objects occlude earlier ones and masks follow the occlusion."""
    validate_spec(spec)
    background = _background(spec)
    frames = np.empty((spec.length, spec.size, spec.size, 3), dtype=np.uint8)
    instances = np.zeros((spec.length, spec.size, spec.size), dtype=np.uint8)
    for f in range(spec.length):
        canvas = background.copy()
        labels = instances[f]
        for k, obj in enumerate(spec.objects, start=1):
            mask = silhouette(obj, object_position(obj, f, spec.size), spec.size)
            canvas[mask] = obj.color
            labels[mask] = k
        frames[f] = np.clip(canvas, 0, 255).astype(np.uint8)
    visibility = np.zeros((spec.length, len(spec.objects)), dtype=np.int64)
    for k in range(1, len(spec.objects) + 1):
        visibility[:, k - 1] = (instances == k).sum(axis=(1, 2))
    return VideoSample(
        name=name,
        frames=frames,
        instances=instances,
        classes=[o.shape for o in spec.objects],
        visibility=visibility,
        spec=spec,
    )


def _jitter(rng: np.random.Generator, color: Color, amount: int) -> Color:
    values = np.clip(np.asarray(color) + rng.integers(-amount, amount + 1, size=3), 0, 255)
    return _color(values)


def random_scene_spec(
    rng: np.random.Generator,
    cfg: DataConfig,
    size: int,
    length: int,
    seed: int = 0,
    require_duplicate_class: bool = False,
) -> SceneSpec:
    """Draw a scene: K objects with uniform classes, sizes, positions and velocities.

    With ``require_duplicate_class`` the scene has at least two objects and
    two of them share a class.
    """
    if cfg.classes > len(SHAPE_CLASSES):
        raise ConfigError(f"data.classes must be at most {len(SHAPE_CLASSES)}, got {cfg.classes}")
    low = max(cfg.min_objects, 2) if require_duplicate_class else cfg.min_objects
    high = max(cfg.max_objects, low)
    count = int(rng.integers(low, high + 1))
    classes = [int(c) for c in rng.integers(0, cfg.classes, size=count)]
    if require_duplicate_class and len(set(classes)) == len(classes):
        classes[1] = classes[0]
    objects = []
    for cls in classes:
        radius = float(rng.uniform(0.10, 0.18)) * size
        objects.append(
            ObjectSpec(
                shape=cls,
                size=radius,
                color=_jitter(rng, CLASS_COLORS[cls], COLOR_JITTER),
                position=(
                    float(rng.uniform(radius, size - radius)),
                    float(rng.uniform(radius, size - radius)),
                ),
                velocity=(
                    float(rng.uniform(-MAX_SPEED, MAX_SPEED)),
                    float(rng.uniform(-MAX_SPEED, MAX_SPEED)),
                ),
            )
        )
    return SceneSpec(
        size=size,
        length=length,
        objects=objects,
        background=cfg.background,
        background_color=_jitter(rng, BACKGROUND_COLOR, TINT_JITTER),
        seed=seed,
    )


def generate_suite(
    cfg: DataConfig, size: int, min_train_length: int = 1
) -> Tuple[List[VideoSample], List[VideoSample]]:
    """The benchmark suite: training videos plus eval videos that repeat a class.

    Each video draws from its own substream of ``cfg.seed``. Training videos
    are lengthened to ``min_train_length`` so a strided clip always fits.
    """
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.train_videos + cfg.eval_videos)
    train: List[VideoSample] = []
    evaluation: List[VideoSample] = []
    for i, child in enumerate(children):
        is_eval = i >= cfg.train_videos
        rng = np.random.default_rng(child)
        seed = int(child.generate_state(1, dtype=np.uint32)[0])
        length = cfg.frames if is_eval else max(cfg.frames, min_train_length)
        spec = random_scene_spec(rng, cfg, size, length, seed, require_duplicate_class=is_eval)
        if is_eval:
            evaluation.append(generate_video(spec, f"eval_{i - cfg.train_videos:04d}"))
        else:
            train.append(generate_video(spec, f"train_{i:04d}"))
    return train, evaluation
