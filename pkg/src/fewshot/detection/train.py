"""Conventional detector training, YOLOMAML meta-training and F1 evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..episodes import EpisodeSpec
from ..methods.maml import maml_adapt
from ..numerics.optim import make_optimizer
from ..numerics.tensor import Tensor, grad, no_grad
from .boxes import BoundingBox, F1Score, f1_score
from .model import (
    DetectorConfig,
    LossComponents,
    LossWeights,
    decode_and_nms,
    detection_loss,
    detector_forward,
    detector_head_forward,
    extract_features,
    freeze,
)
from .shapes import DetectionDataset, DetectionEpisode, sample_detection_episode

TELEMETRY_COLUMNS = ("epoch", "bbox_mse", "obj_bce", "noobj_bce", "class_ce", "total")


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN or infinite loss; ``record`` holds the diagnostic row."""

    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


def telemetry_csv(rows: Sequence[dict]) -> str:
    lines = [",".join(TELEMETRY_COLUMNS)]
    for r in rows:
        lines.append(",".join([str(int(r["epoch"]))] + [f"{r[k]:.10g}" for k in TELEMETRY_COLUMNS[1:]]))
    return "\n".join(lines) + "\n"


def _mean_components(parts: list[dict]) -> dict:
    return {k: float(np.mean([p[k] for p in parts])) for k in TELEMETRY_COLUMNS[1:]}


def _check_finite(row: dict, epoch: int) -> None:
    bad = [k for k in TELEMETRY_COLUMNS[1:] if not np.isfinite(row[k])]
    if bad:
        raise NonFiniteLossError(f"non-finite loss component(s) {bad} at epoch {epoch}", dict(row, epoch=epoch))


def _to_nchw(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2))


# -- conventional training ------------------------------------------------------------
def train_detector(
    params: dict[str, Tensor],
    dataset: DetectionDataset,
    cfg: DetectorConfig,
    epochs: int,
    rng: np.random.Generator,
    batch_size: int = 16,
    lr: float = 1e-3,
    weights: LossWeights | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[dict[str, Tensor], list[dict]]:
    """Plain mini-batch Adam on every image of ``dataset``; one telemetry row per epoch."""
    opt = make_optimizer("adam", params, lr)
    images = _to_nchw(dataset.images)
    telemetry = []
    for epoch in range(1, epochs + 1):
        parts = []
        order = rng.permutation(len(dataset))
        for start in range(0, order.size, batch_size):
            pick = order[start : start + batch_size]
            preds = detector_forward(params, images[pick], cfg)
            comps = detection_loss(preds, [dataset.boxes[i] for i in pick], cfg, weights)
            total = comps.total
            names = [n for n, p in params.items() if p.requires_grad]
            gs = grad(total, [params[n] for n in names])
            step = opt.step({n: params[n] for n in names}, dict(zip(names, gs)))
            params = {**params, **step}
            parts.append(comps.values())
        row = _mean_components(parts)
        _check_finite(row, epoch)
        row["epoch"] = epoch
        telemetry.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return params, telemetry


def evaluate_f1(
    params: dict[str, Tensor],
    images: np.ndarray,
    truths: Sequence[np.ndarray],
    cfg: DetectorConfig,
    iou_threshold: float = 0.5,
    conf_threshold: float = 0.25,
    batch_size: int = 50,
) -> F1Score:
    """Detect on H×W×C ``images`` and score against k×5 ground-truth rows per image."""
    preds_all = []
    nchw = _to_nchw(images)
    with no_grad():
        for start in range(0, nchw.shape[0], batch_size):
            preds = detector_forward(params, nchw[start : start + batch_size], cfg)
            for i in range(preds[0].shape[0]):
                preds_all.append(decode_and_nms(preds, cfg, conf_threshold, 0.5, i))
    gts = [[BoundingBox(float(r[1]), float(r[2]), float(r[3]), float(r[4]), int(r[0])) for r in t] for t in truths]
    return f1_score(preds_all, gts, iou_threshold)


# -- YOLOMAML --------------------------------------------------------------------------
@dataclass
class YoloMamlConfig:
    """Meta-training hyperparameters. ``reduce="sum"`` adds the per-task outer gradients."""

    alpha: float = 1e-3
    beta: float = 1e-3
    n_episodes: int = 4
    n_updates_per_task: int = 2
    epochs: int = 500
    spec: EpisodeSpec = field(default_factory=lambda: EpisodeSpec(3, 5, 5))
    outer_optimizer: str = "adam"
    reduce: str = "sum"
    first_order: bool = False

    def validate(self) -> None:
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be > 0")
        if self.n_updates_per_task < 1:
            raise ValueError("n_updates_per_task must be >= 1")
        if self.n_episodes < 1:
            raise ValueError("n_episodes must be >= 1")
        if self.reduce not in ("sum", "mean"):
            raise ValueError(f"unknown reduction {self.reduce!r}")


def _episode_features(frozen, ep: DetectionEpisode, cfg: DetectorConfig):
    with no_grad():
        fs = extract_features(frozen, _to_nchw(ep.support_images), cfg)
        fq = extract_features(frozen, _to_nchw(ep.query_images), cfg)
    return fs, fq


def yolomaml_outer_gradient(
    params: dict[str, Tensor],
    episodes: Sequence[DetectionEpisode],
    cfg: DetectorConfig,
    alpha: float,
    n_updates: int,
    first_order: bool = False,
    reduce: str = "sum",
    weights: LossWeights | None = None,
) -> tuple[dict[str, np.ndarray], list[dict]]:
    """Steps 4–11 of one YOLOMAML epoch: per task adapt a copy, differentiate the query loss.

    Only parameters with ``requires_grad`` (the trainable body) are adapted and
    differentiated; the rest act as a fixed feature extractor. Returns the
    combined gradient and the query loss components of every task.
    """
    trainable = [n for n, p in params.items() if p.requires_grad]
    total = {n: np.zeros_like(params[n].data) for n in trainable}
    parts = []
    for ep in episodes:
        fs, fq = _episode_features(params, ep, cfg)

        def support_loss(p, fs=fs, ep=ep):
            return detection_loss(detector_head_forward(p, fs, cfg), ep.support_boxes, cfg, weights).total

        fast = maml_adapt(support_loss, params, alpha, n_updates, track_higher_order=not first_order)
        comps: LossComponents = detection_loss(detector_head_forward(fast, fq, cfg), ep.query_boxes, cfg, weights)
        gs = grad(comps.total, [params[n] for n in trainable])
        for n, g in zip(trainable, gs):
            total[n] += g.data
        parts.append(comps.values())
    if reduce == "mean":
        for n in trainable:
            total[n] /= len(episodes)
    return total, parts


def yolomaml_train(
    params: dict[str, Tensor],
    dataset: DetectionDataset,
    cfg: DetectorConfig,
    config: YoloMamlConfig,
    rng: np.random.Generator,
    weights: LossWeights | None = None,
    on_epoch: Callable[[dict], None] | None = None,
    classes: Sequence[int] | None = None,
) -> tuple[dict[str, Tensor], list[dict]]:
    """Meta-train the detector initialization; one outer update per epoch.

    The extractor layers are frozen. Every epoch samples ``n_episodes`` tasks,
    adapts a copy of the weights on each support set with
    ``n_updates_per_task`` gradient steps at rate alpha, accumulates the
    gradient of the adapted query loss with respect to the initialization, then
    updates the initialization once (plain SGD at beta, or Adam at beta). Telemetry rows average the query loss components.
    """
    config.validate()
    if cfg.n_classes != config.spec.n_way:
        raise ValueError(f"detector has {cfg.n_classes} classes but tasks are {config.spec.n_way}-way")
    params = freeze(params)
    trainable = [n for n, p in params.items() if p.requires_grad]
    opt = make_optimizer(config.outer_optimizer, {n: params[n] for n in trainable}, config.beta)
    telemetry = []
    for epoch in range(1, config.epochs + 1):
        episodes = [sample_detection_episode(dataset, config.spec, rng, classes) for _ in range(config.n_episodes)]
        g, parts = yolomaml_outer_gradient(params, episodes, cfg, config.alpha, config.n_updates_per_task,
                                           config.first_order, config.reduce, weights)
        row = _mean_components(parts)
        row["epoch"] = epoch
        _check_finite(row, epoch)
        step = opt.step({n: params[n] for n in trainable}, {n: Tensor(v, dtype=v.dtype) for n, v in g.items()})
        params = {**params, **step}
        telemetry.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return params, telemetry


def adapt_and_evaluate(params, episode: DetectionEpisode, cfg: DetectorConfig, alpha: float, n_updates: int,
                       iou_threshold: float = 0.5, conf_threshold: float = 0.25) -> F1Score:
    """Fine-tune a copy on the support set, then score detections on the query set."""
    fs, _ = _episode_features(params, episode, cfg)
    start = {n: Tensor(p.data, requires_grad=p.requires_grad) for n, p in params.items()}

    def support_loss(p):
        return detection_loss(detector_head_forward(p, fs, cfg), episode.support_boxes, cfg).total

    fast = maml_adapt(support_loss, start, alpha, n_updates, track_higher_order=False)
    return evaluate_f1(fast, episode.query_images, episode.query_boxes, cfg, iou_threshold, conf_threshold)


def write_telemetry(rows: Sequence[dict], path) -> None:
    Path(path).write_text(telemetry_csv(rows))
