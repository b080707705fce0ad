"""Synthetic shape scenes with exact boxes, few-shot detection episodes and darknet-style annotations."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from ..datasets import DatasetError
from ..episodes import EpisodeSpec, SamplingError
from .boxes import BoundingBox, validate_box

ARCHETYPES = ("circle", "square", "triangle", "cross", "star", "ring", "diamond", "bar")
COLOR_BANDS = {
    "red": (0.9, 0.15, 0.15),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.2, 0.3, 0.95),
    "yellow": (0.95, 0.85, 0.1),
}
BACKGROUND = 0.12


@dataclass(frozen=True)
class DetectionDataset:
    """Images N×H×W×3 in [0,1]; ``boxes[i]`` is a k×5 array of (class_id, cx, cy, w, h)."""

    images: np.ndarray
    boxes: tuple[np.ndarray, ...]
    class_names: tuple[str, ...]

    def __post_init__(self):
        if len(self.boxes) != self.images.shape[0]:
            raise DatasetError("one box array per image is required")
        for b in self.boxes:
            if b.size and (b[:, 0].min() < 0 or b[:, 0].max() >= len(self.class_names)):
                raise DatasetError("box class id outside the dataset's classes")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    @cached_property
    def images_by_class(self) -> list[np.ndarray]:
        """Indices of images containing at least one instance of each class."""
        out = [[] for _ in self.class_names]
        for i, b in enumerate(self.boxes):
            for c in np.unique(b[:, 0].astype(int)):
                out[c].append(i)
        return [np.array(v, dtype=np.int64) for v in out]

    def sample(self, i: int) -> tuple[np.ndarray, list[BoundingBox]]:
        return self.images[i], [BoundingBox(float(r[1]), float(r[2]), float(r[3]), float(r[4]), int(r[0]))
                                for r in self.boxes[i]]

    def subset(self, indices) -> "DetectionDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return DetectionDataset(self.images[indices], tuple(self.boxes[i] for i in indices), self.class_names)


def class_names_for(n_classes: int) -> tuple[str, ...]:
    """Class c is archetype ``c % 8`` in color band ``c // 8``."""
    limit = len(ARCHETYPES) * len(COLOR_BANDS)
    if not 3 <= n_classes <= limit:
        raise DatasetError(f"n_classes must be in [3, {limit}], got {n_classes}")
    bands = list(COLOR_BANDS)
    return tuple(f"{bands[c // len(ARCHETYPES)]}_{ARCHETYPES[c % len(ARCHETYPES)]}" for c in range(n_classes))


def _polygon_mask(xx, yy, verts: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test on pixel centers."""
    inside = np.zeros(xx.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        crosses = (y0 > yy) != (y1 > yy)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (yy - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (xx < xint)
    return inside


def shape_mask(archetype: str, size: int, cx: float, cy: float, r: float, angle: float) -> np.ndarray:
    """Boolean H×W mask of one shape of radius ``r`` pixels centered at (cx, cy)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    if archetype == "circle":
        return dx * dx + dy * dy <= r * r
    if archetype == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if archetype == "square":
        return (np.abs(dx) <= 0.85 * r) & (np.abs(dy) <= 0.85 * r)
    if archetype == "bar":
        return (np.abs(dx) <= r) & (np.abs(dy) <= 0.4 * r)
    if archetype == "cross":
        return ((np.abs(dx) <= r) & (np.abs(dy) <= 0.3 * r)) | ((np.abs(dy) <= r) & (np.abs(dx) <= 0.3 * r))
    if archetype == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if archetype == "triangle":
        t = angle + np.pi / 2 + np.arange(3) * 2 * np.pi / 3
        verts = np.stack([cx + r * np.cos(t), cy - r * np.sin(t)], axis=1)
        return _polygon_mask(xx, yy, verts)
    if archetype == "star":
        t = angle + np.pi / 2 + np.arange(10) * np.pi / 5
        rad = np.where(np.arange(10) % 2 == 0, r, 0.45 * r)
        verts = np.stack([cx + rad * np.cos(t), cy - rad * np.sin(t)], axis=1)
        return _polygon_mask(xx, yy, verts)
    raise DatasetError(f"unknown archetype {archetype!r}")


def tight_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    """Normalized (cx, cy, w, h) of the pixel extent of a mask."""
    size = mask.shape[0]
    ys, xs = np.nonzero(mask)
    x0, x1 = xs.min(), xs.max() + 1
    y0, y1 = ys.min(), ys.max() + 1
    return ((x0 + x1) / 2 / size, (y0 + y1) / 2 / size, (x1 - x0) / size, (y1 - y0) / size)


@dataclass(frozen=True)
class ShapesSpec:
    n_classes: int = 3
    n_images: int = 600
    image_size: int = 64
    max_objects_per_image: int = 3
    radius: tuple[float, float] = (6.0, 13.0)
    gap: int = 2
    seed: int = 0
    color_jitter: float = 0.08
    noise: float = 0.02
    class_names: tuple[str, ...] = field(default=(), compare=False)

    def validate(self) -> None:
        class_names_for(self.n_classes)
        if self.n_images < 1:
            raise DatasetError("n_images must be >= 1")
        if self.image_size < 16 or self.image_size % 16:
            raise DatasetError("image_size must be a multiple of 16 and at least 16")
        if self.max_objects_per_image < 1:
            raise DatasetError("max_objects_per_image must be >= 1")
        lo, hi = self.radius
        if not 2 <= lo <= hi or 2 * hi + 2 > self.image_size:
            raise DatasetError(f"radius range {self.radius} does not fit a {self.image_size}px image")


def generate_shapes_dataset(
    n_classes: int = 3,
    n_images: int = 600,
    image_size: int = 64,
    max_objects_per_image: int = 3,
    seed: int = 0,
    **kwargs,
) -> DetectionDataset:
    """Scenes of 1..max non-overlapping colored shapes on a plain background.

    Boxes are the tight pixel extent of each rendered mask, so they are exact.
    """
    spec = ShapesSpec(n_classes, n_images, image_size, max_objects_per_image, seed=seed, **kwargs)
    spec.validate()
    names = class_names_for(n_classes)
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    images = np.empty((n_images, size, size, 3), dtype=np.float32)
    all_boxes = []
    for i in range(n_images):
        img = np.full((size, size, 3), BACKGROUND, dtype=np.float64)
        occupied = np.zeros((size, size), dtype=bool)
        rows = []
        want = int(rng.integers(1, spec.max_objects_per_image + 1))
        attempts = 0
        while len(rows) < want and attempts < 200:
            attempts += 1
            c = int(rng.integers(n_classes))
            r = rng.uniform(*spec.radius)
            cx, cy = rng.uniform(r + 1, size - r - 1, size=2)
            mask = shape_mask(ARCHETYPES[c % len(ARCHETYPES)], size, cx, cy, r, rng.uniform(-0.3, 0.3))
            if not mask.any():
                continue
            x0, y0, x1, y1 = _pixel_extent(mask)
            g = spec.gap
            if occupied[max(y0 - g, 0) : y1 + g, max(x0 - g, 0) : x1 + g].any():
                continue
            occupied[y0:y1, x0:x1] = True
            base = np.array(list(COLOR_BANDS.values())[c // len(ARCHETYPES)])
            color = np.clip(base + rng.uniform(-spec.color_jitter, spec.color_jitter, 3), 0, 1)
            img[mask] = color
            rows.append((c,) + tight_box(mask))
        if not rows:
            raise DatasetError(f"could not place any object in image {i}; radius range too large")
        img += rng.normal(0.0, spec.noise, img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
        all_boxes.append(np.array(rows, dtype=np.float64))
    return DetectionDataset(images, tuple(all_boxes), names)


def _pixel_extent(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


# -- episodes -----------------------------------------------------------------------
@dataclass(frozen=True)
class DetectionEpisode:
    """Support/query scenes with boxes filtered to the task classes and remapped to 0..N-1."""

    support_images: np.ndarray
    support_boxes: tuple[np.ndarray, ...]
    query_images: np.ndarray
    query_boxes: tuple[np.ndarray, ...]
    class_map: tuple[int, ...]
    support_indices: np.ndarray
    query_indices: np.ndarray

    @property
    def n_way(self) -> int:
        return len(self.class_map)


def _filter_boxes(rows: np.ndarray, class_map: Sequence[int]) -> np.ndarray:
    remap = {c: i for i, c in enumerate(class_map)}
    keep = [r for r in rows if int(r[0]) in remap]
    out = np.array(keep, dtype=np.float64).reshape(-1, 5)
    if out.size:
        out[:, 0] = [remap[int(c)] for c in out[:, 0]]
    return out


def sample_detection_episode(dataset: DetectionDataset, spec: EpisodeSpec, rng: np.random.Generator,
                             classes: Sequence[int] | None = None) -> DetectionEpisode:
    """N classes, then per class K+Q distinct images containing it.

    An image is never drawn twice in one episode, so support and query stay
    disjoint even when a scene holds several task classes. Boxes of classes
    outside the task are dropped.
    """
    needed = spec.k_shot + spec.q_queries
    pool = list(range(dataset.n_classes)) if classes is None else list(classes)
    by_class = dataset.images_by_class
    eligible = [c for c in pool if by_class[c].size >= needed]
    if len(eligible) < spec.n_way:
        raise SamplingError(
            f"{spec.n_way}-way detection episode needs {spec.n_way} classes in >= {needed} images each, "
            f"only {len(eligible)} qualify"
        )
    chosen = [int(c) for c in rng.choice(np.asarray(eligible), size=spec.n_way, replace=False)]
    taken: set[int] = set()
    support, query = [], []
    for c in chosen:
        free = np.array([i for i in by_class[c] if i not in taken], dtype=np.int64)
        if free.size < needed:
            raise SamplingError(f"class {c} has only {free.size} unused images, {needed} needed")
        picked = rng.choice(free, size=needed, replace=False)
        taken.update(int(i) for i in picked)
        support.extend(picked[: spec.k_shot])
        query.extend(picked[spec.k_shot :])
    s_idx, q_idx = np.array(support), np.array(query)
    return DetectionEpisode(
        support_images=dataset.images[s_idx],
        support_boxes=tuple(_filter_boxes(dataset.boxes[i], chosen) for i in s_idx),
        query_images=dataset.images[q_idx],
        query_boxes=tuple(_filter_boxes(dataset.boxes[i], chosen) for i in q_idx),
        class_map=tuple(chosen),
        support_indices=s_idx,
        query_indices=q_idx,
    )


# -- annotation files ----------------------------------------------------------------
def format_annotation(rows: np.ndarray) -> str:
    """One ``class_id cx cy w h`` line per box."""
    lines = []
    for r in np.asarray(rows).reshape(-1, 5):
        validate_box(*r[1:])
        lines.append(f"{int(r[0])} {r[1]:.6f} {r[2]:.6f} {r[3]:.6f} {r[4]:.6f}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_annotation(text: str) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise DatasetError(f"annotation line {lineno}: expected 5 fields, got {len(parts)}")
        try:
            c = int(parts[0])
            vals = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise DatasetError(f"annotation line {lineno}: {exc}") from None
        validate_box(*vals)
        rows.append([c] + vals)
    return np.array(rows, dtype=np.float64).reshape(-1, 5)


def export_detection_dataset(dataset: DetectionDataset, root) -> Path:
    """Write ``images/NNNNN.png`` plus ``labels/NNNNN.txt`` and ``classes.txt``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text("\n".join(dataset.class_names) + "\n")
    for i in range(len(dataset)):
        pixels = np.round(dataset.images[i] * 255).astype(np.uint8)
        Image.fromarray(pixels).save(root / "images" / f"{i:05d}.png")
        (root / "labels" / f"{i:05d}.txt").write_text(format_annotation(dataset.boxes[i]))
    return root


def load_detection_directory(root) -> DetectionDataset:
    """Inverse of :func:`export_detection_dataset`."""
    root = Path(root)
    names = tuple(n for n in (root / "classes.txt").read_text().splitlines() if n)
    images, boxes = [], []
    for img_path in sorted((root / "images").glob("*.png")):
        images.append(np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0)
        label = root / "labels" / (img_path.stem + ".txt")
        boxes.append(parse_annotation(label.read_text()) if label.exists() else np.zeros((0, 5)))
    if not images:
        raise DatasetError(f"no images under {root / 'images'}")
    return DetectionDataset(np.stack(images), tuple(boxes), names)
