"""A two-head anchor-grid detector, its target assignment, loss and decoding."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import functional as F
from ..numerics.tensor import DimensionError, Tensor, concat, no_grad, reshape, sigmoid, transpose
from .boxes import AnnotationError, BoundingBox, Detection, clamp_box, kmeans_anchors, nms, shape_iou
from .shapes import DetectionDataset

DEFAULT_ANCHORS = (
    ((0.12, 0.12), (0.2, 0.2), (0.28, 0.28)),
    ((0.36, 0.36), (0.5, 0.5), (0.7, 0.7)),
)


@dataclass(frozen=True)
class DetectorConfig:
    """Image size, class count, anchors per head and layer widths.

    Head 0 predicts on the stride-8 grid, head 1 on the stride-16 grid.
    Anchors are (w, h) normalized to the image size.
    """

    image_size: int = 64
    n_classes: int = 3
    anchors: tuple = DEFAULT_ANCHORS
    channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    in_channels: int = 3
    strides: tuple[int, int] = (8, 16)
    obj_bias_init: float = -4.0

    def __post_init__(self):
        if len(self.anchors) != len(self.strides):
            raise ValueError("one anchor list per output head is required")
        for head in self.anchors:
            for w, h in head:
                if not (w > 0 and h > 0):
                    raise ValueError(f"anchors must be positive, got {(w, h)}")
        for s in self.strides:
            if self.image_size % s:
                raise DimensionError(f"image size {self.image_size} is not divisible by stride {s}")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")

    @property
    def n_heads(self) -> int:
        return len(self.strides)

    @property
    def grid_sizes(self) -> tuple[int, ...]:
        return tuple(self.image_size // s for s in self.strides)

    @property
    def n_anchors(self) -> int:
        return len(self.anchors[0])

    @property
    def n_outputs(self) -> int:
        return 5 + self.n_classes

    def with_classes(self, n_classes: int) -> "DetectorConfig":
        return DetectorConfig(self.image_size, n_classes, self.anchors, self.channels, self.in_channels,
                              self.strides, self.obj_bias_init)


EXTRACTOR = ("extractor.conv0", "extractor.conv1")
BODY = ("body.conv2", "body.conv3", "body.conv4", "body.conv5", "head0", "head1")


def _layer_shapes(cfg: DetectorConfig) -> dict[str, tuple[int, int, int]]:
    c0, c1, c2, c3 = cfg.channels
    out = cfg.n_anchors * cfg.n_outputs
    return {
        "extractor.conv0": (c0, cfg.in_channels, 3),
        "extractor.conv1": (c1, c0, 3),
        "body.conv2": (c2, c1, 3),
        "body.conv3": (c2, c2, 3),
        "body.conv4": (c3, c2, 3),
        "body.conv5": (c2, c3, 1),
        "head0": (out, c2, 1),
        "head1": (out, c2, 1),
    }


def init_detector(cfg: DetectorConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params = {}
    for name, (cout, cin, k) in _layer_shapes(cfg).items():
        if name.startswith("head"):
            w = rng.normal(0.0, 0.01, (cout, cin, k, k))
            b = np.zeros((cfg.n_anchors, cfg.n_outputs))
            b[:, 4] = cfg.obj_bias_init
            b = b.reshape(-1)
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / (cin * k * k)), (cout, cin, k, k))
            b = np.zeros(cout)
        params[f"{name}.weight"] = Tensor(w, requires_grad=True)
        params[f"{name}.bias"] = Tensor(b, requires_grad=True)
    return params


def freeze(params: dict[str, Tensor], prefixes=EXTRACTOR) -> dict[str, Tensor]:
    """Copy of ``params`` where layers under ``prefixes`` no longer require gradients."""
    return {
        n: Tensor(p.data, requires_grad=not n.startswith(tuple(prefixes)), dtype=p.dtype)
        for n, p in params.items()
    }


def _conv(params, name, x, padding):
    return F.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], padding=padding)


def _nchw(images) -> Tensor:
    if isinstance(images, Tensor):
        return images
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.shape[-1] in (1, 3) and arr.shape[1] not in (1, 3):
        arr = arr.transpose(0, 3, 1, 2)
    return Tensor(np.ascontiguousarray(arr))


def extract_features(params, images, cfg: DetectorConfig) -> Tensor:
    """The fixed front end: two conv + leaky ReLU + pool blocks (stride 4)."""
    x = _nchw(images)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
        raise DimensionError(
            f"detector expects B×{cfg.in_channels}×{cfg.image_size}×{cfg.image_size} images, got {x.shape}"
        )
    h = F.max_pool2d(F.leaky_relu(_conv(params, "extractor.conv0", x, 1)), 2)
    return F.max_pool2d(F.leaky_relu(_conv(params, "extractor.conv1", h, 1)), 2)


def _head_view(raw: Tensor, cfg: DetectorConfig) -> Tensor:
    b, _, s, _ = raw.shape
    r = reshape(raw, (b, cfg.n_anchors, cfg.n_outputs, s, s))
    return transpose(r, (0, 3, 4, 1, 2))


def detector_head_forward(params, features: Tensor, cfg: DetectorConfig) -> list[Tensor]:
    """Trainable part on stride-4 features; returns raw B×S×S×A×(5+N) tensors per head."""
    h = F.max_pool2d(F.leaky_relu(_conv(params, "body.conv2", features, 1)), 2)
    h = F.leaky_relu(_conv(params, "body.conv3", h, 1))
    out0 = _conv(params, "head0", h, 0)
    h = F.leaky_relu(_conv(params, "body.conv4", F.max_pool2d(h, 2), 1))
    h = F.leaky_relu(_conv(params, "body.conv5", h, 0))
    out1 = _conv(params, "head1", h, 0)
    return [_head_view(out0, cfg), _head_view(out1, cfg)]


def detector_forward(params, images, cfg: DetectorConfig) -> list[Tensor]:
    """Raw predictions per head, each B×S×S×A×(5+N): (tx, ty, tw, th, objectness, class logits)."""
    return detector_head_forward(params, extract_features(params, images, cfg), cfg)


# -- targets ----------------------------------------------------------------------
@dataclass
class Targets:
    """Per-head assignment of ground-truth boxes to (image, row, col, anchor) slots."""

    obj_mask: list[np.ndarray]  # B×S×S×A bool
    box: list[np.ndarray]  # B×S×S×A×4: (x offset in cell, y offset, log w/aw, log h/ah)
    cls: list[np.ndarray]  # B×S×S×A int
    n_objects: int = 0


def assign_anchor(w: float, h: float, cfg: DetectorConfig) -> tuple[int, int]:
    """(head, anchor) whose prior shape has the highest IoU with a w×h box; first wins ties."""
    flat = np.array([a for head in cfg.anchors for a in head])
    best = int(np.argmax(shape_iou(np.array([[w, h]]), flat)[0]))
    return best // cfg.n_anchors, best % cfg.n_anchors


def encode_box(cx, cy, w, h, head: int, anchor: int, cfg: DetectorConfig):
    """Box to (cell row, cell col, targets) for one head/anchor."""
    s = cfg.grid_sizes[head]
    col = min(int(cx * s), s - 1)
    row = min(int(cy * s), s - 1)
    aw, ah = cfg.anchors[head][anchor]
    return row, col, np.array([cx * s - col, cy * s - row, np.log(w / aw), np.log(h / ah)])


def decode_box(row, col, t, head: int, anchor: int, cfg: DetectorConfig):
    """Inverse of :func:`encode_box` on post-activation values (offsets already in [0,1])."""
    s = cfg.grid_sizes[head]
    aw, ah = cfg.anchors[head][anchor]
    return ((col + t[0]) / s, (row + t[1]) / s, aw * np.exp(t[2]), ah * np.exp(t[3]))


def build_targets(boxes_per_image, cfg: DetectorConfig) -> Targets:
    b = len(boxes_per_image)
    obj, box, cls = [], [], []
    for s in cfg.grid_sizes:
        obj.append(np.zeros((b, s, s, cfg.n_anchors), dtype=bool))
        box.append(np.zeros((b, s, s, cfg.n_anchors, 4)))
        cls.append(np.zeros((b, s, s, cfg.n_anchors), dtype=np.int64))
    n = 0
    for i, rows in enumerate(boxes_per_image):
        for r in np.asarray(rows, dtype=np.float64).reshape(-1, 5):
            c, cx, cy, w, h = r
            if not (0 <= cx <= 1 and 0 <= cy <= 1 and 0 < w <= 1 and 0 < h <= 1):
                raise AnnotationError(f"box {r[1:].tolist()} in image {i} lies outside [0, 1]")
            if not 0 <= c < cfg.n_classes:
                raise AnnotationError(f"class id {int(c)} in image {i} outside [0, {cfg.n_classes})")
            head, a = assign_anchor(w, h, cfg)
            row, col, t = encode_box(cx, cy, w, h, head, a, cfg)
            if not obj[head][i, row, col, a]:
                n += 1
            obj[head][i, row, col, a] = True
            box[head][i, row, col, a] = t
            cls[head][i, row, col, a] = int(c)
    return Targets(obj, box, cls, n)


# -- loss -------------------------------------------------------------------------
@dataclass(frozen=True)
class LossWeights:
    bbox: float = 1.0
    obj: float = 1.0
    noobj: float = 0.5
    cls: float = 1.0


@dataclass
class LossComponents:
    bbox_mse: Tensor
    obj_bce: Tensor
    noobj_bce: Tensor
    class_ce: Tensor
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def total(self) -> Tensor:
        w = self.weights
        return (self.bbox_mse * w.bbox + self.obj_bce * w.obj
                + self.noobj_bce * w.noobj + self.class_ce * w.cls)

    def values(self) -> dict[str, float]:
        return {
            "bbox_mse": float(self.bbox_mse.data),
            "obj_bce": float(self.obj_bce.data),
            "noobj_bce": float(self.noobj_bce.data),
            "class_ce": float(self.class_ce.data),
            "total": float(self.total.data),
        }


def detection_loss(predictions: list[Tensor], boxes_per_image, cfg: DetectorConfig,
                   weights: LossWeights | None = None) -> LossComponents:
    """Four-part loss over all heads.

    bbox_mse: mean squared error of (σ(tx), σ(ty), tw, th) on assigned anchors.
    obj_bce: objectness BCE with target 1 on assigned anchors.
    noobj_bce: objectness BCE with target 0 averaged over every other anchor.
    class_ce: softmax cross-entropy on assigned anchors.
    Terms with no assigned anchors are exactly zero.
    """
    weights = weights or LossWeights()
    targets = build_targets(boxes_per_image, cfg)
    dtype = predictions[0].dtype
    assigned, box_t, cls_t, noobj_logits, noobj_w = [], [], [], [], []
    for p, mask, bt, ct in zip(predictions, targets.obj_mask, targets.box, targets.cls):
        flat = reshape(p, (-1, cfg.n_outputs))
        idx = np.flatnonzero(mask.reshape(-1))
        if idx.size:
            assigned.append(flat[idx])
            box_t.append(bt.reshape(-1, 4)[idx])
            cls_t.append(ct.reshape(-1)[idx])
        noobj_logits.append(flat[:, 4])
        noobj_w.append((~mask).reshape(-1).astype(np.float64))
    zero = Tensor(np.zeros((), dtype=dtype))
    logits = concat(noobj_logits, axis=0)
    w = np.concatenate(noobj_w)
    n_noobj = w.sum()
    if n_noobj > 0:
        noobj = F.bce_with_logits(logits, np.zeros(w.size), weight=w * (w.size / n_noobj))
    else:
        noobj = zero
    if not assigned:
        return LossComponents(zero, zero, noobj, zero, weights)
    a = concat(assigned, axis=0)
    bt = np.concatenate(box_t)
    ct = np.concatenate(cls_t)
    pred_box = concat([sigmoid(a[:, 0:2]), a[:, 2:4]], axis=1)
    bbox = F.mse(pred_box, bt)
    obj = F.bce_with_logits(a[:, 4], np.ones(a.shape[0]))
    cls = F.softmax_cross_entropy(a[:, 5:], ct)
    return LossComponents(bbox, obj, noobj, cls, weights)


# -- inference --------------------------------------------------------------------
def decode_predictions(predictions: list[Tensor], cfg: DetectorConfig, image: int = 0):
    """All candidate boxes of one image: (boxes n×4, confidence n, class n)."""
    boxes, conf, cls = [], [], []
    for head, p in enumerate(predictions):
        raw = p.data[image].astype(np.float64)  # S×S×A×(5+N)
        s = raw.shape[0]
        aw = np.array([a[0] for a in cfg.anchors[head]])
        ah = np.array([a[1] for a in cfg.anchors[head]])
        rows, cols = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
        sx = 1 / (1 + np.exp(-raw[..., 0]))
        sy = 1 / (1 + np.exp(-raw[..., 1]))
        cx = (cols[..., None] + sx) / s
        cy = (rows[..., None] + sy) / s
        w = aw * np.exp(np.clip(raw[..., 2], -10, 10))
        h = ah * np.exp(np.clip(raw[..., 3], -10, 10))
        obj = 1 / (1 + np.exp(-raw[..., 4]))
        logits = raw[..., 5:]
        probs = np.exp(logits - logits.max(axis=-1, keepdims=True))
        probs /= probs.sum(axis=-1, keepdims=True)
        boxes.append(np.stack([cx, cy, w, h], axis=-1).reshape(-1, 4))
        conf.append((obj * probs.max(axis=-1)).reshape(-1))
        cls.append(probs.argmax(axis=-1).reshape(-1))
    return np.concatenate(boxes), np.concatenate(conf), np.concatenate(cls)


def decode_and_nms(predictions: list[Tensor], cfg: DetectorConfig, conf_threshold: float = 0.25,
                   iou_threshold: float = 0.5, image: int = 0) -> list[Detection]:
    """Confidence = objectness × best class probability; threshold, then per-class greedy NMS."""
    if not (0 < conf_threshold < 1 and 0 < iou_threshold < 1):
        raise ValueError("thresholds must lie in (0, 1)")
    boxes, conf, cls = decode_predictions(predictions, cfg, image)
    keep = np.flatnonzero(conf >= conf_threshold)
    if keep.size == 0:
        return []
    clamped = np.array([clamp_box(*b) for b in boxes[keep]])
    order = nms(clamped, conf[keep], cls[keep], iou_threshold)
    return [
        Detection(BoundingBox(*map(float, clamped[i]), int(cls[keep][i])), float(conf[keep][i]))
        for i in order
    ]


def detect(params, images, cfg: DetectorConfig, conf_threshold=0.25, iou_threshold=0.5) -> list[list[Detection]]:
    with no_grad():
        preds = detector_forward(params, images, cfg)
    return [decode_and_nms(preds, cfg, conf_threshold, iou_threshold, i) for i in range(preds[0].shape[0])]


def fit_anchors(dataset: DetectionDataset, cfg: DetectorConfig, rng: np.random.Generator) -> DetectorConfig:
    """Cluster ground-truth shapes into n_heads×A anchors; smallest go to the finest head."""
    wh = np.concatenate([b[:, 3:5] for b in dataset.boxes if b.size])
    centers = kmeans_anchors(wh, cfg.n_heads * cfg.n_anchors, rng)
    per_head = tuple(
        tuple((float(w), float(h)) for w, h in centers[i * cfg.n_anchors : (i + 1) * cfg.n_anchors])
        for i in range(cfg.n_heads)
    )
    return DetectorConfig(cfg.image_size, cfg.n_classes, per_head, cfg.channels, cfg.in_channels,
                          cfg.strides, cfg.obj_bias_init)
