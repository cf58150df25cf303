"""Synthetic paired multi-modality detection data.

Scenes are drawn once from a seed and rendered three ways: ``rgb`` (the
pretraining modality), ``pseudo_ir`` and ``pseudo_depth`` (shifted target
modalities). Boxes depend only on the scene, so all renders of a scene share
the same ground truth.
"""

from __future__ import annotations

import colorsys
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

SCHEMA = "modprompt-data/1"
SHAPES = ("disk", "rectangle", "triangle")
MODALITIES = ("rgb", "pseudo_ir", "pseudo_depth")
DEFAULT_VOCAB = ("disk", "rectangle", "triangle")

_SUPERSAMPLE = 4


class ConfigError(ValueError):
    pass


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneLimits:
    canvas: tuple[int, int] = (96, 96)
    min_objects: int = 1
    max_objects: int = 3
    min_extent: int = 14
    max_extent: int = 36
    # max pairwise IoU between boxes; also keeps centers at least one grid cell apart
    max_overlap: float = 0.1
    min_center_distance: float = 12.0

    def validate(self) -> None:
        h, w = self.canvas
        if h <= 0 or w <= 0:
            raise ConfigError(f"canvas must be positive, got {self.canvas}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError(
                f"need 1 <= min_objects <= max_objects, got {self.min_objects}, {self.max_objects}"
            )
        if not 2 <= self.min_extent <= self.max_extent:
            raise ConfigError(
                f"need 2 <= min_extent <= max_extent, got {self.min_extent}, {self.max_extent}"
            )
        if self.max_extent > min(h, w):
            raise ConfigError(f"max_extent {self.max_extent} does not fit canvas {self.canvas}")


@dataclass(frozen=True)
class SceneObject:
    category: str
    shape: str
    center: tuple[float, float]  # (y, x)
    extent: tuple[int, int]  # (h, w)
    intensity: float

    @property
    def box(self) -> list[float]:
        cy, cx = self.center
        h, w = self.extent
        return [cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2]


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    canvas: tuple[int, int]
    objects: tuple[SceneObject, ...]


@dataclass
class Image:
    pixels: np.ndarray  # H x W x 3, float32 in [0, 1]
    modality: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")


@dataclass
class GroundTruth:
    boxes: list[list[float]] = field(default_factory=list)
    categories: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.boxes) != len(self.categories):
            raise ValueError("boxes and categories differ in length")
        for b in self.boxes:
            if len(b) != 4 or not (b[0] < b[2] and b[1] < b[3]):
                raise ValueError(f"invalid box {b}")

    @classmethod
    def from_scene(cls, spec: SceneSpec) -> GroundTruth:
        return cls([o.box for o in spec.objects], [o.category for o in spec.objects])


def _box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def generate_scene(seed: int, vocab=DEFAULT_VOCAB, limits: SceneLimits = SceneLimits()) -> SceneSpec:
    """Sample a scene. Categories are shape names, so every vocab entry must be a shape."""
    vocab = list(vocab)
    if not vocab:
        raise ConfigError("vocab must be non-empty")
    unknown = [v for v in vocab if v not in SHAPES]
    if unknown:
        raise ConfigError(f"vocab entries must be shape names {SHAPES}, got {unknown}")
    limits.validate()

    rng = np.random.default_rng(seed)
    H, W = limits.canvas
    target = int(rng.integers(limits.min_objects, limits.max_objects + 1))
    objects: list[SceneObject] = []
    for _ in range(100 * target):
        if len(objects) == target:
            break
        category = vocab[int(rng.integers(len(vocab)))]
        h = 2 * int(rng.integers(limits.min_extent // 2 + limits.min_extent % 2, limits.max_extent // 2 + 1))
        w = h if category == "disk" else 2 * int(
            rng.integers(limits.min_extent // 2 + limits.min_extent % 2, limits.max_extent // 2 + 1)
        )
        cy = float(rng.integers(h // 2, H - h // 2 + 1))
        cx = float(rng.integers(w // 2, W - w // 2 + 1))
        obj = SceneObject(category, category, (cy, cx), (h, w), float(rng.uniform(0.0, 1.0)))
        if any(
            _box_iou(obj.box, o.box) > limits.max_overlap
            or np.hypot(cy - o.center[0], cx - o.center[1]) < limits.min_center_distance
            for o in objects
        ):
            continue
        objects.append(obj)
    if len(objects) < limits.min_objects:
        raise ConfigError(f"could not place {limits.min_objects} objects with limits {limits}")
    return SceneSpec(int(seed), (H, W), tuple(objects))


def shape_mask(obj: SceneObject, canvas: tuple[int, int]) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] of one object, by supersampling pixel centers."""
    H, W = canvas
    s = _SUPERSAMPLE
    ys = (np.arange(H * s) + 0.5) / s
    xs = (np.arange(W * s) + 0.5) / s
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    x1, y1, x2, y2 = obj.box
    cy, cx = obj.center
    h, w = obj.extent
    if obj.shape == "rectangle":
        m = (xx >= x1) & (xx < x2) & (yy >= y1) & (yy < y2)
    elif obj.shape == "disk":
        m = ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1.0
    elif obj.shape == "triangle":
        m = (yy >= y1) & (yy < y2) & (np.abs(xx - cx) <= (w / 2) * (yy - y1) / h)
    else:
        raise ValueError(f"unknown shape {obj.shape!r}")
    return m.reshape(H, s, W, s).mean(axis=(1, 3))


def _value_noise(rng: np.random.Generator, canvas, cells: int = 8) -> np.ndarray:
    H, W = canvas
    coarse = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
    return ndimage.zoom(coarse, (H / (cells + 1), W / (cells + 1)), order=1)[:H, :W]


def _composite(background: np.ndarray, layers) -> np.ndarray:
    out = background.copy()
    for mask, value in layers:
        m = mask[..., None] if out.ndim == 3 else mask
        out = out * (1.0 - m) + value * m
    return out


def render_modality(spec: SceneSpec, modality: str) -> Image:
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
    canvas = spec.canvas
    rng = np.random.default_rng([spec.seed, MODALITIES.index(modality)])
    masks = [shape_mask(o, canvas) for o in spec.objects]

    if modality == "rgb":
        tint = rng.uniform(0.7, 0.85, size=3)
        bg = tint + 0.08 * np.stack([_value_noise(rng, canvas) for _ in range(3)], axis=-1)
        colors = [np.array(colorsys.hsv_to_rgb(o.intensity, 0.75, 0.4)) for o in spec.objects]
        img = _composite(bg, zip(masks, colors))
    elif modality == "pseudo_ir":
        bg = 0.12 + 0.08 * _value_noise(rng, canvas)
        heat = [0.6 + 0.35 * o.intensity for o in spec.objects]
        img = _composite(bg, zip(masks, heat))
        img = ndimage.gaussian_filter(img, sigma=1.0)
        img = img + rng.normal(0.0, 0.03, size=img.shape)
        img = np.repeat(img[..., None], 3, axis=-1)
    else:
        H, W = canvas
        theta = rng.uniform(0, 2 * np.pi)
        yy, xx = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
        ramp = (np.cos(theta) * xx + np.sin(theta) * yy) / np.sqrt(2)
        bg = 0.35 + 0.2 * ramp
        depths = [0.65 + 0.3 * o.intensity for o in spec.objects]
        img = _composite(bg, zip(masks, depths))
        img = img + rng.normal(0.0, 0.005, size=img.shape)
        img = np.repeat(img[..., None], 3, axis=-1)

    return Image(np.clip(img, 0.0, 1.0).astype(np.float32), modality)


# -- on-disk datasets ---------------------------------------------------------


@dataclass
class GenerationConfig:
    root: str
    modality: str
    splits: dict = field(default_factory=lambda: {"train": 64, "test": 64})
    vocab: tuple = DEFAULT_VOCAB
    seed: int = 0
    limits: SceneLimits = SceneLimits()


@dataclass
class DatasetManifest:
    root: str
    splits: dict  # split name -> list of ids
    modality: str
    vocab: list
    seed: int
    canvas: tuple
    schema: str = SCHEMA

    @property
    def split_sizes(self) -> dict:
        return {k: len(v) for k, v in self.splits.items()}

    def to_json(self) -> dict:
        d = asdict(self)
        d["canvas"] = list(self.canvas)
        return d


def scene_seed(seed: int, split: str, index: int) -> int:
    """Stable per-scene seed; independent of modality so renders are paired."""
    ss = np.random.SeedSequence([seed, zlib.crc32(split.encode()), index])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_dataset(cfg: GenerationConfig) -> DatasetManifest:
    root = Path(cfg.root)
    root.mkdir(parents=True, exist_ok=True)
    splits = {}
    for split, size in cfg.splits.items():
        img_dir = root / split / "images"
        ann_dir = root / split / "annotations"
        img_dir.mkdir(parents=True, exist_ok=True)
        ann_dir.mkdir(parents=True, exist_ok=True)
        ids = []
        for i in range(int(size)):
            sid = f"{i:05d}"
            spec = generate_scene(scene_seed(cfg.seed, split, i), cfg.vocab, cfg.limits)
            image = render_modality(spec, cfg.modality)
            gt = GroundTruth.from_scene(spec)
            PILImage.fromarray(to_uint8(image.pixels)).save(img_dir / f"{sid}.png")
            record = {"id": sid, "scene_seed": spec.seed, "boxes": gt.boxes, "categories": gt.categories}
            (ann_dir / f"{sid}.json").write_text(json.dumps(record))
            ids.append(sid)
        splits[split] = ids
    manifest = DatasetManifest(
        str(root), splits, cfg.modality, list(cfg.vocab), int(cfg.seed), tuple(cfg.limits.canvas)
    )
    (root / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=2))
    return manifest


def read_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"{path}: unreadable manifest ({e})") from e
    if d.get("schema") != SCHEMA:
        raise DatasetError(f"{path}: schema {d.get('schema')!r} != {SCHEMA!r}")
    return DatasetManifest(
        d["root"], d["splits"], d["modality"], d["vocab"], d["seed"], tuple(d["canvas"]), d["schema"]
    )


def _read_annotation(path: Path) -> GroundTruth:
    try:
        d = json.loads(path.read_text())
        boxes = [[float(v) for v in b] for b in d["boxes"]]
        return GroundTruth(boxes, [str(c) for c in d["categories"]])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"{path}: bad annotation record ({e})") from e


def load_dataset(root, split: str = "test") -> list[tuple[Image, GroundTruth]]:
    root = Path(root)
    manifest = read_manifest(root)
    if split not in manifest.splits:
        raise DatasetError(f"{root}: no split {split!r} (have {sorted(manifest.splits)})")
    samples = []
    for sid in manifest.splits[split]:
        img_path = root / split / "images" / f"{sid}.png"
        gt = _read_annotation(root / split / "annotations" / f"{sid}.json")
        try:
            with PILImage.open(img_path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except OSError as e:
            raise DatasetError(f"{img_path}: unreadable image ({e})") from e
        samples.append((Image(arr, manifest.modality), gt))
    return samples
