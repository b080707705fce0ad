"""Run execution, persistence, sweep groups, confidence intervals and plot tables."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ..datasets import Augmenter, GlyphSpec, LabeledImageSet, generate_glyph_dataset, load_image_directory, split_classes
from ..detection import (
    DetectorConfig,
    YoloMamlConfig,
    adapt_and_evaluate,
    evaluate_f1,
    fit_anchors,
    generate_shapes_dataset,
    init_detector,
    sample_detection_episode,
    telemetry_csv,
    train_detector,
    yolomaml_train,
)
from ..detection.shapes import DetectionDataset
from ..episodes import EpisodeSpec, EpisodeStream, NoiseSpec
from ..methods import (
    BackboneConfig,
    BatchStream,
    EvalReport,
    TimeLimitExceeded,
    build_model,
    eval_loop,
    history_to_csv,
    make_validator,
    save_checkpoint,
    train_loop,
)
from .config import ConfigError, RunConfig, parse_config_text
from .seeding import seed_everything

log = logging.getLogger(__name__)


class RunFailure(RuntimeError):
    """A stage of a run raised; ``stage`` names it and partial artifacts stay on disk."""

    def __init__(self, stage: str, cause: BaseException, run_dir: Path | None = None):
        super().__init__(f"run failed during {stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
        self.run_dir = run_dir


class StatisticsError(ValueError):
    """Not enough tasks for a confidence interval."""


class PlotDataError(ValueError):
    """Records cannot share one plot table."""


@dataclass
class MetricsRecord:
    run_id: str
    config: RunConfig
    config_text: str
    history: list[dict]
    evaluation: dict
    duration: float = 0.0
    paths: dict[str, str] = field(default_factory=dict)
    telemetry: list[dict] = field(default_factory=list)


@dataclass
class GroupFailure:
    """Placeholder for a member of a group that could not run."""

    axis: str
    value: Any
    error: str


# -- atomic file writes ---------------------------------------------------------------------
def _write(path: Path, data: str | bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data, encoding="utf-8")
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


# -- confidence intervals --------------------------------------------------------------------
def report_ci(task_accuracies) -> tuple[float, float]:
    """Mean and 1.96·sample-sd/√T half-width, both in percent and rounded to two decimals.

    The interval only reflects evaluation-task sampling; retraining the same
    configuration can move the mean by more than this.
    """
    acc = np.asarray(task_accuracies, dtype=np.float64).reshape(-1)
    if acc.size < 2:
        raise StatisticsError(f"a confidence interval needs at least 2 tasks, got {acc.size}")
    mean = 100 * acc.mean()
    hw = 100 * 1.96 * acc.std(ddof=1) / np.sqrt(acc.size)
    return round(float(mean), 2), round(float(hw), 2)


def format_ci(mean: float, halfwidth: float) -> str:
    return f"{mean:.2f} ± {halfwidth:.2f}"


_CI = re.compile(r"^\s*(-?\d+(?:\.\d+)?)\s*(?:±|\+/-)\s*(\d+(?:\.\d+)?)\s*$")


def parse_ci(text: str) -> tuple[float, float]:
    m = _CI.match(text)
    if not m:
        raise ValueError(f"not a 'mean ± halfwidth' string: {text!r}")
    return float(m.group(1)), float(m.group(2))


# -- dataset construction ---------------------------------------------------------------------
def build_classification_data(cfg: RunConfig, seeds) -> LabeledImageSet:
    d = cfg.dataset
    if d.kind == "directory":
        return load_image_directory(d.path, d.image_size)
    seed = d.seed if d.seed is not None else seeds.integer("dataset")
    return generate_glyph_dataset(GlyphSpec(n_classes=d.n_classes, samples_per_class=d.samples_per_class,
                                            image_size=d.image_size, seed=seed))


def build_shapes_data(cfg: RunConfig, seeds) -> DetectionDataset:
    d = cfg.dataset
    seed = d.seed if d.seed is not None else seeds.integer("dataset")
    n_images = d.n_images + (cfg.detection.n_test_images if cfg.method == "yolo" else 0)
    return generate_shapes_dataset(d.n_classes, n_images, d.image_size, d.max_objects, seed)


def _model_hparams(cfg: RunConfig, n_train_classes: int) -> dict:
    if cfg.method == "maml":
        return {"inner_lr": cfg.inner_lr, "inner_steps": cfg.inner_steps, "first_order": cfg.first_order}
    if cfg.method == "matching":
        return {"scale": cfg.matching_scale}
    if cfg.method in ("baseline", "baseline++"):
        return {"n_classes": n_train_classes, "finetune_steps": cfg.finetune_steps}
    return {}


class _Clock:
    def __init__(self, limit: float):
        self.start = time.monotonic()
        self.limit = limit

    def check(self, what: str) -> None:
        elapsed = time.monotonic() - self.start
        if elapsed > self.limit:
            raise TimeLimitExceeded(
                f"run exceeded its {self.limit:.0f} s wall-clock budget during {what} "
                f"({elapsed:.0f} s elapsed); raise time_limit to allow longer runs"
            )


# -- single run ---------------------------------------------------------------------------------
def run_experiment(cfg: RunConfig, output_dir: str | os.PathLike | None = None) -> MetricsRecord:
    """Dataset → split → model → training → evaluation → persistence.

    Files written under ``<output_dir>/<run_id>/``: ``config.echo``,
    ``history.csv``, ``eval.json``, ``checkpoint.bin`` (classification),
    ``telemetry.csv`` (detection) and ``run.json`` (status, duration, paths).
    Only ``run.json`` contains wall-clock information.
    """
    cfg.validate()
    text = cfg.echo()
    run_id = cfg.config_hash()
    run_dir = Path(output_dir if output_dir is not None else cfg.output_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    _write(run_dir / "config.echo", text)
    clock = _Clock(cfg.time_limit)
    state = {"stage": "setup"}
    try:
        if cfg.is_detection:
            record = _run_detection(cfg, run_dir, clock, state)
        else:
            record = _run_classification(cfg, run_dir, clock, state)
    except Exception as exc:
        duration = time.monotonic() - clock.start
        _write(run_dir / "run.json", _dump({
            "run_id": run_id, "status": "failed", "stage": state["stage"],
            "error": f"{type(exc).__name__}: {exc}", "duration_seconds": round(duration, 3),
        }))
        raise RunFailure(state["stage"], exc, run_dir) from exc
    record.run_id, record.config, record.config_text = run_id, cfg, text
    record.duration = time.monotonic() - clock.start
    artifacts = sorted(p.name for p in run_dir.iterdir() if not p.name.endswith(".tmp")) + ["run.json"]
    record.paths = {name: str(run_dir / name) for name in sorted(set(artifacts))}
    _write(run_dir / "run.json", _dump({
        "run_id": run_id, "status": "ok", "duration_seconds": round(record.duration, 3),
        "artifacts": sorted(set(artifacts)),
    }))
    return record


def _run_classification(cfg: RunConfig, run_dir: Path, clock: _Clock, state: dict) -> MetricsRecord:
    seeds = seed_everything(cfg.seed, cfg.eval_seed)
    state["stage"] = "dataset"
    ds = build_classification_data(cfg, seeds)
    split = split_classes(ds, cfg.dataset.split, seed=seeds.integer("dataset.split"))
    h, w, c = ds.image_shape
    backbone = BackboneConfig(cfg.backbone.block_count, cfg.backbone.channels, (c, h, w))
    train_spec = EpisodeSpec(cfg.n_way_train, cfg.k_shot, cfg.q_queries)
    eval_spec = EpisodeSpec(cfg.n_way_eval, cfg.k_shot, cfg.q_queries)

    state["stage"] = "model"
    model = build_model(cfg.method, backbone, seeds.rng("init"), cfg.n_way_train,
                        **_model_hparams(cfg, len(split.train_classes)))
    model.check_way(cfg.n_way_eval)
    optimizer = model.make_optimizer(cfg.optimizer, cfg.learning_rate)
    augmenter = Augmenter(("flip", "crop", "brightness")) if cfg.augmentation else None
    if model.episodic:
        source = EpisodeStream(ds, split.train_classes, train_spec, cfg.episodes_per_epoch,
                               NoiseSpec(cfg.m_swaps_train), rng=seeds.rng("sampling"),
                               noise_rng=seeds.rng("noise"), transform=augmenter,
                               transform_rng=seeds.rng("augment"))
    else:
        source = BatchStream(ds, split.train_classes, cfg.batch_size, rng=seeds.rng("sampling"),
                             transform=augmenter, transform_rng=seeds.rng("augment"))
    validate = make_validator(ds, split.val_classes, eval_spec, cfg.n_val_tasks, seeds.sequence("validation"))

    state["stage"] = "train"

    def on_epoch(row):
        log.info("epoch %d loss %.4f val %.4f", row["epoch"], row["train_loss"], row["val_acc"])
        clock.check(f"training epoch {row['epoch']}")

    model, history = train_loop(model, source, cfg.epochs, optimizer, validate, cfg.selection,
                                on_epoch=on_epoch)
    _write(run_dir / "history.csv", history_to_csv(history))

    state["stage"] = "evaluate"
    report = eval_loop(model, ds, split.test_classes, eval_spec, cfg.n_eval_tasks, NoiseSpec(cfg.m_swaps_eval),
                       rng=seeds.rng("evaluation.sampling"), noise_rng=seeds.rng("evaluation.noise"),
                       model_rng=seeds.rng("evaluation.model"))
    evaluation = _classification_eval(cfg, report)
    _write(run_dir / "eval.json", _dump(evaluation))

    state["stage"] = "persist"
    save_checkpoint(model, run_dir / "checkpoint.bin", rng_label=f"seed={cfg.seed}")
    return MetricsRecord("", cfg, "", history, evaluation)


def _classification_eval(cfg: RunConfig, report: EvalReport) -> dict:
    out = {
        "method": cfg.method,
        "config_hash": cfg.config_hash(),
        "eval_seed": cfg.resolved_eval_seed,
        "n_way_eval": cfg.n_way_eval,
        "k_shot": cfg.k_shot,
        "m_swaps_eval": cfg.m_swaps_eval,
        **report.to_dict(),
    }
    if report.n_tasks >= 2:
        out["formatted"] = format_ci(*report_ci(report.task_accuracies))
    return out


def _run_detection(cfg: RunConfig, run_dir: Path, clock: _Clock, state: dict) -> MetricsRecord:
    seeds = seed_everything(cfg.seed, cfg.eval_seed)
    det = cfg.detection
    state["stage"] = "dataset"
    data = build_shapes_data(cfg, seeds)
    telemetry: list[dict] = []

    def on_epoch(row):
        telemetry.append(row)
        clock.check(f"detector epoch {row['epoch']}")

    if cfg.method == "yolo":
        train = data.subset(np.arange(cfg.dataset.n_images))
        test = data.subset(np.arange(cfg.dataset.n_images, len(data)))
        state["stage"] = "model"
        dcfg = fit_anchors(train, DetectorConfig(cfg.dataset.image_size, data.n_classes), seeds.rng("init.anchors"))
        params = init_detector(dcfg, seeds.rng("init"))
        state["stage"] = "train"
        try:
            params, _ = train_detector(params, train, dcfg, cfg.epochs, seeds.rng("sampling"),
                                       det.batch_size, cfg.learning_rate, on_epoch=on_epoch)
        finally:
            _write(run_dir / "telemetry.csv", telemetry_csv(telemetry))
        state["stage"] = "evaluate"
        score = evaluate_f1(params, test.images, test.boxes, dcfg, det.iou_threshold, det.conf_threshold)
        evaluation = {
            "method": cfg.method, "config_hash": cfg.config_hash(), "eval_seed": cfg.resolved_eval_seed,
            "n_test_images": len(test), "precision": score.precision, "recall": score.recall, "f1": score.f1,
            "true_positives": score.true_positives, "n_predictions": score.n_predictions,
            "n_ground_truth": score.n_ground_truth,
        }
    else:
        split = split_classes(data.n_classes, cfg.dataset.split, seed=seeds.integer("dataset.split"))
        train_cls = list(split.train_classes)
        state["stage"] = "pretrain"
        base = _restrict(data, train_cls)
        pre_cfg = fit_anchors(base, DetectorConfig(cfg.dataset.image_size, len(train_cls)), seeds.rng("init.anchors"))
        params = init_detector(pre_cfg, seeds.rng("init"))
        params, _ = train_detector(params, base, pre_cfg, det.pretrain_epochs, seeds.rng("sampling.pretrain"),
                                   det.batch_size, cfg.learning_rate)
        state["stage"] = "model"
        dcfg = pre_cfg.with_classes(cfg.n_way_train)
        fresh = init_detector(dcfg, seeds.rng("init.body"))
        params = {n: (params[n] if n.startswith("extractor.") else fresh[n]) for n in fresh}
        state["stage"] = "train"
        ycfg = YoloMamlConfig(det.alpha, det.beta, det.n_episodes, det.n_updates_per_task, cfg.epochs,
                              EpisodeSpec(cfg.n_way_train, cfg.k_shot, cfg.q_queries), det.outer_optimizer,
                              det.reduce, cfg.first_order)
        try:
            params, _ = yolomaml_train(params, data, dcfg, ycfg, seeds.rng("sampling"), on_epoch=on_epoch,
                                       classes=train_cls)
        finally:
            _write(run_dir / "telemetry.csv", telemetry_csv(telemetry))
        state["stage"] = "evaluate"
        erng = seeds.rng("evaluation.sampling")
        spec = EpisodeSpec(cfg.n_way_eval, cfg.k_shot, cfg.q_queries)
        f1s = []
        for _ in range(cfg.n_eval_tasks):
            ep = sample_detection_episode(data, spec, erng, split.test_classes)
            f1s.append(adapt_and_evaluate(params, ep, dcfg, det.alpha, det.n_updates_per_task,
                                          det.iou_threshold, det.conf_threshold).f1)
        evaluation = {
            "method": cfg.method, "config_hash": cfg.config_hash(), "eval_seed": cfg.resolved_eval_seed,
            "n_tasks": len(f1s), "mean_f1": float(np.mean(f1s)), "task_f1": [float(f) for f in f1s],
        }
    _write(run_dir / "eval.json", _dump(evaluation))
    history = [{"epoch": r["epoch"], "train_loss": r["total"], "val_acc": float("nan")} for r in telemetry]
    _write(run_dir / "history.csv", history_to_csv(history))
    return MetricsRecord("", cfg, "", history, evaluation, telemetry=telemetry)


def _restrict(data: DetectionDataset, classes: Sequence[int]) -> DetectionDataset:
    """Images containing any of ``classes``, boxes filtered and remapped to 0..len-1."""
    remap = {c: i for i, c in enumerate(classes)}
    keep, boxes = [], []
    for i, b in enumerate(data.boxes):
        rows = [[remap[int(r[0])], *r[1:]] for r in b if int(r[0]) in remap]
        if rows:
            keep.append(i)
            boxes.append(np.array(rows, dtype=np.float64))
    names = tuple(data.class_names[c] for c in classes)
    return DetectionDataset(data.images[np.array(keep)], tuple(boxes), names)


# -- groups -----------------------------------------------------------------------------------------
def run_group(base: RunConfig, axis: str, values: Sequence, output_dir=None) -> list[MetricsRecord | GroupFailure]:
    """One run per value of ``axis``; every member shares the base evaluation seed.

    A failing member is recorded as a :class:`GroupFailure` and the sweep continues.
    """
    base = base.replace(eval_seed=base.resolved_eval_seed)
    out: list[MetricsRecord | GroupFailure] = []
    for value in values:
        try:
            cfg = base.replace(**{axis: value})
            out.append(run_experiment(cfg, output_dir))
        except (ConfigError, RunFailure) as exc:
            log.warning("group member %s=%r failed: %s", axis, value, exc)
            out.append(GroupFailure(axis, value, str(exc)))
    return out


# -- persisted records and plot tables -----------------------------------------------------------
def _read_history(text: str) -> list[dict]:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append({"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]), "val_acc": float(r["val_acc"])})
    return rows


def load_record(run_dir) -> MetricsRecord:
    run_dir = Path(run_dir)
    text = (run_dir / "config.echo").read_text(encoding="utf-8")
    cfg = parse_config_text(text)
    history = _read_history((run_dir / "history.csv").read_text()) if (run_dir / "history.csv").exists() else []
    evaluation = json.loads((run_dir / "eval.json").read_text())
    meta = json.loads((run_dir / "run.json").read_text()) if (run_dir / "run.json").exists() else {}
    return MetricsRecord(run_dir.name, cfg, text, history, evaluation, meta.get("duration_seconds", 0.0),
                         {p.name: str(p) for p in sorted(run_dir.iterdir())})


def _axis_value(cfg: RunConfig, axis: str):
    obj: Any = cfg
    for part in axis.split("."):
        if not hasattr(obj, part):
            raise PlotDataError(f"unknown axis {axis!r}")
        obj = getattr(obj, part)
    return obj


def emit_plot_data(records: Sequence[MetricsRecord], x_axis: str, path=None) -> str:
    """CSV ``x,mean,ci95,method,config_hash`` with mean accuracy and half-width in percent."""
    records = [r for r in records if isinstance(r, MetricsRecord)]
    if not records:
        raise PlotDataError("no successful records to tabulate")
    seeds = {r.evaluation.get("eval_seed") for r in records}
    if len(seeds) > 1:
        raise PlotDataError(
            f"records were evaluated with different evaluation seeds {sorted(seeds)}; "
            "their task sets differ, so their accuracies are not comparable"
        )
    counts = {r.evaluation.get("n_tasks") for r in records}
    if len(counts) > 1:
        raise PlotDataError(f"records use different numbers of evaluation tasks {sorted(counts)}")
    lines = ["x,mean,ci95,method,config_hash"]
    for r in records:
        mean, hw = report_ci(r.evaluation["task_accuracies"])
        lines.append(f"{_axis_value(r.config, x_axis)},{mean:.2f},{hw:.2f},{r.config.method},{r.run_id}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        _write(Path(path), text)
    return text
