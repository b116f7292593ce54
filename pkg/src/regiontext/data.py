"""Procedural scenes of colored geometric shapes with per-region text.

Each scene is a textured background with 1-5 non-overlapping shapes.  Every
shape yields two annotations on the same tight box: the bare class name
(detection style, task 1) and a caption following the grammar

    "a <size> <color> <shape> [near a <color> <shape>]"

(captioning style, task 2).  Generation is fully deterministic in the seed;
train/val splits draw from disjoint seed streams.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, IntegrityError
from .extractor import Box, iou_matrix
from .tokenizer import normalize_text

SHAPE_CLASSES = ("circle", "square", "triangle", "ring", "cross", "diamond")
COLOR_TABLE = {
    "red": (0.86, 0.16, 0.16),
    "green": (0.18, 0.70, 0.25),
    "blue": (0.17, 0.35, 0.86),
    "yellow": (0.92, 0.84, 0.16),
    "purple": (0.58, 0.21, 0.76),
    "cyan": (0.14, 0.76, 0.80),
}
SIZE_NAMES = ("small", "large")
SIZE_RANGES = {"small": (9.0, 15.0), "large": (20.0, 30.0)}
DET_TASK_ID = 1
CAP_TASK_ID = 2

_CAPTION_RE = re.compile(
    r"^a (?P<size>{sizes}) (?P<color>{colors}) (?P<shape>{shapes})"
    r"( near a (?P<color2>{colors}) (?P<shape2>{shapes}))?$".format(
        sizes="|".join(SIZE_NAMES),
        colors="|".join(COLOR_TABLE),
        shapes="|".join(SHAPE_CLASSES),
    )
)


@dataclass(frozen=True)
class RegionAnnotation:
    box: Box
    text: str
    task_id: int

    def __post_init__(self):
        if self.task_id < 1:
            raise ContractError(f"task_id must be >= 1, got {self.task_id}")
        words = self.text.split()
        if not words:
            raise ContractError("annotation text is empty")
        if len(words) > 15:
            raise ContractError(f"annotation text has {len(words)} words, max is 15")


@dataclass
class SyntheticScene:
    image: np.ndarray  # float64 [3, H, W] in [0, 1]
    regions: list[RegionAnnotation]


@dataclass
class DatasetImage:
    image_id: str
    pixels: np.ndarray  # uint8 [3, H, W]

    @property
    def tensor_data(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / 255.0


@dataclass
class Dataset:
    images: list[DatasetImage]
    annotations: dict[str, list[RegionAnnotation]]

    def regions_of(self, image_id: str) -> list[RegionAnnotation]:
        return self.annotations.get(image_id, [])


def classify_style(text: str) -> str | None:
    """Grammar classifier: 'det' for a bare class name, 'cap' for a caption."""
    norm = normalize_text(text)
    if norm in SHAPE_CLASSES:
        return "det"
    if _CAPTION_RE.match(norm):
        return "cap"
    return None


def build_vocab_corpus(ds: Dataset) -> list[str]:
    """Every annotation text in the dataset, in image order."""
    return [r.text for img in ds.images for r in ds.annotations.get(img.image_id, [])]


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

_SS = 2  # supersampling factor for anti-aliased coverage


def _shape_mask(
    name: str, xx: np.ndarray, yy: np.ndarray, box: np.ndarray, shrink: float = 1.0
) -> np.ndarray:
    cx = (box[0] + box[2]) / 2.0
    cy = (box[1] + box[3]) / 2.0
    rx = (box[2] - box[0]) / 2.0 * shrink
    ry = (box[3] - box[1]) / 2.0 * shrink
    dx = xx - cx
    dy = yy - cy
    if name == "circle":
        return (dx / rx) ** 2 + (dy / ry) ** 2 <= 1.0
    if name == "square":
        return (np.abs(dx) <= rx) & (np.abs(dy) <= ry)
    if name == "triangle":  # isoceles, apex up
        inside_y = (dy >= -ry) & (dy <= ry)
        half_width = rx * (dy + ry) / (2.0 * ry)
        return inside_y & (np.abs(dx) <= half_width)
    if name == "ring":
        outer = (dx / rx) ** 2 + (dy / ry) ** 2 <= 1.0
        inner = (dx / (rx * 0.55)) ** 2 + (dy / (ry * 0.55)) ** 2 <= 1.0
        return outer & ~inner
    if name == "cross":
        bar_h = (np.abs(dx) <= rx) & (np.abs(dy) <= 0.36 * ry)
        bar_v = (np.abs(dx) <= 0.36 * rx) & (np.abs(dy) <= ry)
        return bar_h | bar_v
    if name == "diamond":
        return np.abs(dx) / rx + np.abs(dy) / ry <= 1.0
    raise ConfigError(f"unknown shape class {name!r}")


def _render_scene(
    size: int, shapes: list[dict], rng: np.random.Generator
) -> np.ndarray:
    ss = _SS
    n = size * ss
    coords = (np.arange(n) + 0.5) / ss
    xx, yy = np.meshgrid(coords, coords)

    coarse = rng.uniform(-0.07, 0.07, (3, 4, 4))
    base = rng.uniform(0.42, 0.58, 3)
    img = np.empty((3, n, n))
    for c in range(3):
        img[c] = base[c] + _resize_bilinear_2d(coarse[c], n, n)

    for spec in shapes:
        color = np.asarray(COLOR_TABLE[spec["color"]]) * spec["brightness"]
        fill = _shape_mask(spec["shape"], xx, yy, spec["box"])
        if spec["shape"] == "ring":
            border = np.zeros_like(fill)
        else:
            inner = _shape_mask(spec["shape"], xx, yy, spec["box"], shrink=0.78)
            border = fill & ~inner
            fill = inner
        for c in range(3):
            img[c][fill] = color[c]
            img[c][border] = color[c] * 0.35

    # average supersamples, then light pixel noise
    img = img.reshape(3, size, ss, size, ss).mean(axis=(2, 4))
    img = img + rng.normal(0.0, 0.012, img.shape)
    return np.clip(img, 0.0, 1.0)


def _resize_bilinear_2d(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = grid.shape
    fy = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    fx = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(fy).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(fx).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(fy - y0, 0.0, 1.0)[:, None]
    wx = np.clip(fx - x0, 0.0, 1.0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - wx) + grid[np.ix_(y0, x1)] * wx
    bot = grid[np.ix_(y1, x0)] * (1 - wx) + grid[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def resize_image_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return np.stack([_resize_bilinear_2d(ch, out_h, out_w) for ch in image])


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------


def generate_scene(
    rng: np.random.Generator,
    image_size: int = 64,
    classes: tuple[str, ...] = SHAPE_CLASSES,
    min_shapes: int = 1,
    max_shapes: int = 5,
    relation_prob: float = 0.5,
) -> SyntheticScene:
    """One deterministic scene; every box tightly bounds its shape."""
    n_target = int(rng.integers(min_shapes, max_shapes + 1))
    margin = 1.5
    placed: list[dict] = []
    for _ in range(n_target):
        for _attempt in range(40):
            shape = str(rng.choice(list(classes)))
            size_name = str(rng.choice(SIZE_NAMES))
            lo, hi = SIZE_RANGES[size_name]
            side = rng.uniform(lo, hi)
            aspect = rng.uniform(0.85, 1.18)
            w = min(side * aspect, image_size - 2 * margin)
            h = min(side / aspect, image_size - 2 * margin)
            x1 = rng.uniform(margin, image_size - margin - w)
            y1 = rng.uniform(margin, image_size - margin - h)
            box = np.array([x1, y1, x1 + w, y1 + h])
            if placed:
                others = np.stack([p["box"] for p in placed])
                if iou_matrix(box[None], others).max() > 0.2:
                    continue
            placed.append(
                {
                    "shape": shape,
                    "size": size_name,
                    "color": str(rng.choice(list(COLOR_TABLE))),
                    "box": box,
                    "brightness": rng.uniform(0.9, 1.1),
                }
            )
            break

    image = _render_scene(image_size, placed, rng)

    regions: list[RegionAnnotation] = []
    centers = np.array(
        [[(p["box"][0] + p["box"][2]) / 2, (p["box"][1] + p["box"][3]) / 2] for p in placed]
    )
    for i, spec in enumerate(placed):
        caption = f"a {spec['size']} {spec['color']} {spec['shape']}"
        if len(placed) > 1 and rng.random() < relation_prob:
            d = np.linalg.norm(centers - centers[i], axis=1)
            d[i] = np.inf
            j = int(np.argmin(d))
            caption += f" near a {placed[j]['color']} {placed[j]['shape']}"
        box = Box(*map(float, spec["box"]))
        regions.append(RegionAnnotation(box=box, text=spec["shape"], task_id=DET_TASK_ID))
        regions.append(RegionAnnotation(box=box, text=caption, task_id=CAP_TASK_ID))
    return SyntheticScene(image=image, regions=regions)


def _split_stream(seed: int, split: str) -> np.random.Generator:
    digest = hashlib.sha256(split.encode("utf-8")).digest()
    return np.random.default_rng(
        np.random.SeedSequence([seed, int.from_bytes(digest[:4], "little")])
    )


def generate_dataset(
    seed: int,
    n_images: int,
    split: str = "train",
    image_size: int = 64,
    classes: tuple[str, ...] = SHAPE_CLASSES,
    min_shapes: int = 1,
    max_shapes: int = 5,
) -> Dataset:
    """Render `n_images` scenes; deterministic in (seed, split)."""
    if n_images < 1:
        raise ConfigError(f"n_images must be >= 1, got {n_images}")
    rng = _split_stream(seed, split)
    images: list[DatasetImage] = []
    annotations: dict[str, list[RegionAnnotation]] = {}
    for i in range(n_images):
        scene = generate_scene(
            rng, image_size=image_size, classes=classes,
            min_shapes=min_shapes, max_shapes=max_shapes,
        )
        image_id = f"{split}-{i:05d}"
        pixels = np.round(scene.image * 255.0).astype(np.uint8)
        images.append(DatasetImage(image_id=image_id, pixels=pixels))
        annotations[image_id] = scene.regions
    return Dataset(images=images, annotations=annotations)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def scale_jitter(
    image: np.ndarray,
    regions: list[RegionAnnotation],
    rng: np.random.Generator,
    lo: float = 0.8,
    hi: float = 1.25,
) -> tuple[np.ndarray, list[RegionAnnotation]]:
    """Rescale scene content by a random factor at a fixed canvas size.

    The canvas stays at the original (divisibility-safe) side; upscaled
    content is center-cropped, downscaled content is edge-padded.  Boxes
    are transformed along and dropped when they leave the frame.
    """
    size = image.shape[1]
    s = rng.uniform(lo, hi)
    new = max(8, int(round(size * s)))
    if new == size:
        return image, list(regions)
    scaled = resize_image_bilinear(image, new, new)
    ratio = new / size
    if new >= size:
        off = (new - size) // 2
        out = scaled[:, off:off + size, off:off + size]
        shift = -off
    else:
        pad = size - new
        before = pad // 2
        out = np.pad(scaled, ((0, 0), (before, pad - before), (before, pad - before)), mode="edge")
        shift = before
    kept: list[RegionAnnotation] = []
    for r in regions:
        b = np.array([r.box.x1, r.box.y1, r.box.x2, r.box.y2]) * ratio + shift
        b[0] = max(b[0], 0.0)
        b[1] = max(b[1], 0.0)
        b[2] = min(b[2], float(size))
        b[3] = min(b[3], float(size))
        if b[2] - b[0] < 3.0 or b[3] - b[1] < 3.0:
            continue
        kept.append(RegionAnnotation(box=Box(*map(float, b)), text=r.text, task_id=r.task_id))
    return out, kept


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------


def save_dataset(ds: Dataset, path, inline: bool = False) -> None:
    """Write the dataset JSON; pixel payloads inline (hex) or as .npy files.

    `path` is the JSON file; sidecar arrays live next to it as
    `<image_id>.npy` unless `inline` is set.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    images = []
    for img in ds.images:
        entry = {
            "id": img.image_id,
            "width": int(img.pixels.shape[2]),
            "height": int(img.pixels.shape[1]),
        }
        if inline:
            entry["pixels"] = img.pixels.tobytes().hex()
        else:
            rel = f"{img.image_id}.npy"
            np.save(path.parent / rel, img.pixels)
            entry["path"] = rel
        images.append(entry)
    annotations = []
    for img in ds.images:
        for r in ds.annotations.get(img.image_id, []):
            annotations.append(
                {
                    "image_id": img.image_id,
                    "box": [r.box.x1, r.box.y1, r.box.x2, r.box.y2],
                    "text": r.text,
                    "task": r.task_id,
                }
            )
    doc = {"images": images, "annotations": annotations}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"cannot read dataset {path}: {exc}") from exc
    images: list[DatasetImage] = []
    for entry in doc.get("images", []):
        h, w = int(entry["height"]), int(entry["width"])
        if "pixels" in entry:
            raw = bytes.fromhex(entry["pixels"])
            if len(raw) != 3 * h * w:
                raise IntegrityError(f"image {entry['id']}: inline payload has wrong length")
            pixels = np.frombuffer(raw, dtype=np.uint8).reshape(3, h, w).copy()
        else:
            pixels = np.load(path.parent / entry["path"])
            if pixels.shape != (3, h, w):
                raise IntegrityError(f"image {entry['id']}: array shape {pixels.shape} mismatch")
        images.append(DatasetImage(image_id=str(entry["id"]), pixels=pixels))
    annotations: dict[str, list[RegionAnnotation]] = {}
    for ann in doc.get("annotations", []):
        region = RegionAnnotation(
            box=Box(*map(float, ann["box"])), text=str(ann["text"]), task_id=int(ann["task"])
        )
        annotations.setdefault(str(ann["image_id"]), []).append(region)
    return Dataset(images=images, annotations=annotations)
