"""Image datasets: procedural glyphs, per-class image directories, class splits, augmentation."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image


class DatasetError(ValueError):
    """A dataset could not be built, loaded or split."""


@dataclass(frozen=True)
class LabeledImageSet:
    """Images (N×H×W×C in [0,1]) with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list[str]

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.ndim != 4:
            raise DatasetError(f"images must be N×H×W×C, got shape {self.images.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DatasetError("label outside the class-name range")
        counts = np.bincount(self.labels, minlength=len(self.class_names))
        if (counts == 0).any():
            missing = [self.class_names[i] for i in np.flatnonzero(counts == 0)]
            raise DatasetError(f"classes without images: {missing[:5]}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @cached_property
    def indices_by_class(self) -> list[np.ndarray]:
        order = np.argsort(self.labels, kind="stable")
        bounds = np.cumsum(np.bincount(self.labels, minlength=self.n_classes))
        return np.split(order, bounds[:-1])


@dataclass(frozen=True)
class GlyphSpec:
    n_classes: int = 80
    samples_per_class: int = 24
    image_size: int = 28
    stroke_count: tuple[int, int] = (2, 5)
    points_per_stroke: tuple[int, int] = (3, 6)
    rotation: float = 0.35
    translation: float = 3.0
    scale: tuple[float, float] = (0.8, 1.2)
    stroke_width: float = 1.2
    wobble: float = 0.1
    width_jitter: float = 0.3
    seed: int = 7

    def validate(self) -> None:
        if self.n_classes < 2:
            raise DatasetError("GlyphSpec.n_classes must be >= 2")
        if self.samples_per_class < 2:
            raise DatasetError("GlyphSpec.samples_per_class must be >= 2")
        if self.image_size < 16:
            raise DatasetError("GlyphSpec.image_size must be >= 16")
        lo, hi = self.stroke_count
        if not 1 <= lo <= hi:
            raise DatasetError("GlyphSpec.stroke_count must be an increasing positive range")
        lo, hi = self.points_per_stroke
        if not 2 <= lo <= hi:
            raise DatasetError("GlyphSpec.points_per_stroke must be a range starting at >= 2")
        if min(self.rotation, self.translation, self.wobble, self.width_jitter) < 0 or not 0 < self.scale[0] <= self.scale[1]:
            raise DatasetError("GlyphSpec jitter magnitudes must be non-negative")


def _glyph_template(rng: np.random.Generator, spec: GlyphSpec) -> list[np.ndarray]:
    strokes = []
    for _ in range(rng.integers(spec.stroke_count[0], spec.stroke_count[1] + 1)):
        n = rng.integers(spec.points_per_stroke[0], spec.points_per_stroke[1] + 1)
        pts = [rng.uniform(-0.7, 0.7, size=2)]
        for _ in range(n - 1):
            step = rng.normal(0.0, 0.45, size=2)
            pts.append(np.clip(pts[-1] + step, -0.8, 0.8))
        strokes.append(np.array(pts))
    return strokes


def _render_strokes(strokes: Sequence[np.ndarray], size: int, width: float) -> np.ndarray:
    """Anti-aliased polyline rendering from a distance field; points in pixel units."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    pix = np.stack([xx.ravel(), yy.ravel()], axis=1)
    dist = np.full(pix.shape[0], np.inf)
    for pts in strokes:
        a, b = pts[:-1], pts[1:]
        ab = b - a
        denom = np.maximum((ab * ab).sum(axis=1), 1e-12)
        t = ((pix[:, None, :] - a[None]) * ab[None]).sum(axis=2) / denom[None]
        t = np.clip(t, 0.0, 1.0)
        closest = a[None] + t[..., None] * ab[None]
        d = np.sqrt(((pix[:, None, :] - closest) ** 2).sum(axis=2)).min(axis=1)
        dist = np.minimum(dist, d)
    img = np.clip(width - dist + 0.5, 0.0, 1.0)
    return img.reshape(size, size)


def generate_glyph_dataset(spec: GlyphSpec) -> LabeledImageSet:
    """Random polyline glyph classes, each rendered with independent affine jitter.

    The result is a pure function of ``spec``.
    """
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    template_seq, jitter_seq = root.spawn(2)
    template_rng = np.random.default_rng(template_seq)
    jitter_rng = np.random.default_rng(jitter_seq)
    size = spec.image_size
    half = size / 2.0
    images = np.empty((spec.n_classes * spec.samples_per_class, size, size, 1), dtype=np.float32)
    labels = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    k = 0
    for _ in range(spec.n_classes):
        template = _glyph_template(template_rng, spec)
        for _ in range(spec.samples_per_class):
            angle = jitter_rng.uniform(-spec.rotation, spec.rotation)
            scale = jitter_rng.uniform(*spec.scale)
            shift = jitter_rng.uniform(-spec.translation, spec.translation, size=2)
            rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
            # per-vertex wobble makes each sample a different hand-drawn rendition
            bent = [pts + jitter_rng.normal(0.0, spec.wobble, size=pts.shape) for pts in template]
            strokes = [(pts @ rot.T) * scale * (0.8 * half) + half + shift for pts in bent]
            width = spec.stroke_width * (1.0 + jitter_rng.uniform(-spec.width_jitter, spec.width_jitter))
            images[k, :, :, 0] = _render_strokes(strokes, size, width)
            k += 1
    names = [f"glyph_{i:03d}" for i in range(spec.n_classes)]
    return LabeledImageSet(images, labels, names)


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif"}


def load_image_directory(root_path, image_size: int | None = None, channels: int | None = None) -> LabeledImageSet:
    """Load ``root/<class_name>/<file>`` images, resized (bilinear) and scaled to [0,1].

    ``channels`` of 1 or 3 forces grayscale or RGB; by default it follows the
    first decoded file.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"{root} contains no class directories")
    images, labels, bad = [], [], []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"class directory {cdir} contains no images")
        for path in files:
            try:
                with Image.open(path) as im:
                    im.load()
                    if channels is None:
                        channels = 1 if im.mode in ("L", "1", "I", "I;16", "F") else 3
                    im = im.convert("L" if channels == 1 else "RGB")
                    if image_size is None:
                        image_size = im.size[0]
                    if im.size != (image_size, image_size):
                        im = im.resize((image_size, image_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except (OSError, ValueError) as exc:
                bad.append(f"{path}: {exc}")
                continue
            images.append(arr.reshape(image_size, image_size, channels))
            labels.append(label)
    if bad:
        raise DatasetError("could not decode:\n" + "\n".join(bad))
    return LabeledImageSet(np.stack(images), np.asarray(labels), [p.name for p in class_dirs])


def export_image_directory(dataset: LabeledImageSet, root_path) -> Path:
    """Write the dataset as 8-bit PNGs under ``root/<class_name>/``."""
    root = Path(root_path)
    counters: dict[int, int] = {}
    for img, label in zip(dataset.images, dataset.labels):
        cdir = root / dataset.class_names[label]
        cdir.mkdir(parents=True, exist_ok=True)
        n = counters.get(int(label), 0)
        counters[int(label)] = n + 1
        arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
        pil = Image.fromarray(arr[:, :, 0], "L") if arr.shape[2] == 1 else Image.fromarray(arr, "RGB")
        pil.save(cdir / f"{n:05d}.png")
    return root


@dataclass(frozen=True)
class ClassSplit:
    train_classes: list[int]
    val_classes: list[int]
    test_classes: list[int]

    def __post_init__(self):
        sets = [set(self.train_classes), set(self.val_classes), set(self.test_classes)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise DatasetError("class split subsets overlap")

    def subset(self, name: str) -> list[int]:
        try:
            return {"train": self.train_classes, "val": self.val_classes, "test": self.test_classes}[name]
        except KeyError:
            raise DatasetError(f"unknown split subset {name!r}") from None

    def to_manifest(self, class_names: Sequence[str]) -> dict:
        return {name: [class_names[i] for i in self.subset(name)] for name in ("train", "val", "test")}

    def save(self, path, class_names: Sequence[str]) -> None:
        Path(path).write_text(json.dumps(self.to_manifest(class_names), indent=2) + "\n")

    @classmethod
    def load(cls, path, class_names: Sequence[str]) -> "ClassSplit":
        manifest = json.loads(Path(path).read_text())
        index = {n: i for i, n in enumerate(class_names)}
        try:
            return cls(*[[index[n] for n in manifest[k]] for k in ("train", "val", "test")])
        except KeyError as exc:
            raise DatasetError(f"split manifest names unknown class or subset: {exc}") from None


def split_classes(dataset_or_n, ratios=(0.64, 0.16, 0.20), seed: int = 0) -> ClassSplit:
    """Shuffle class indices with ``seed`` and cut them by ``ratios``."""
    n = dataset_or_n if isinstance(dataset_or_n, int) else dataset_or_n.n_classes
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or (ratios <= 0).any() or abs(ratios.sum() - 1.0) > 1e-6:
        raise DatasetError(f"split ratios must be three positive numbers summing to 1, got {ratios.tolist()}")
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise DatasetError(f"{n} classes are too few for split ratios {ratios.tolist()}")
    order = np.random.default_rng(seed).permutation(n).tolist()
    return ClassSplit(
        sorted(order[:n_train]), sorted(order[n_train : n_train + n_val]), sorted(order[n_train + n_val :])
    )


@dataclass
class Augmenter:
    """Training-time augmentation on H×W×C images.

    ``ops`` is any subset of ``("flip", "crop", "brightness")``.
    """

    ops: tuple[str, ...] = ()
    crop_padding: int = 2
    brightness: float = 0.1
    _known: frozenset = field(default=frozenset({"flip", "crop", "brightness"}), repr=False)

    def __post_init__(self):
        unknown = set(self.ops) - self._known
        if unknown:
            raise DatasetError(f"unknown augmentation(s): {sorted(unknown)}")

    def __call__(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return augment(image, rng, self.ops, self.crop_padding, self.brightness)


def augment(image: np.ndarray, rng: np.random.Generator, ops: Sequence[str] = (),
            crop_padding: int = 2, brightness: float = 0.1) -> np.ndarray:
    out = image
    for op in ops:
        if op == "flip":
            if rng.random() < 0.5:
                out = hflip(out)
        elif op == "crop":
            p = crop_padding
            padded = np.pad(out, ((p, p), (p, p), (0, 0)))
            dy, dx = rng.integers(0, 2 * p + 1, size=2)
            out = padded[dy : dy + out.shape[0], dx : dx + out.shape[1]]
        elif op == "brightness":
            out = out + rng.uniform(-brightness, brightness)
        else:
            raise DatasetError(f"unknown augmentation {op!r}")
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def to_nchw(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2))


def dataset_fingerprint(dataset: LabeledImageSet) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(dataset.images).tobytes())
    h.update(np.ascontiguousarray(dataset.labels).tobytes())
    h.update("\x00".join(dataset.class_names).encode())
    return h.hexdigest()


__all__ = [
    "Augmenter", "ClassSplit", "DatasetError", "GlyphSpec", "LabeledImageSet", "augment",
    "dataset_fingerprint", "export_image_directory", "generate_glyph_dataset", "hflip",
    "load_image_directory", "split_classes", "to_nchw",
]
