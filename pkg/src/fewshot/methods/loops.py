"""Meta-training and evaluation loops, mini-batch streams for the baselines, and checkpoints."""
from __future__ import annotations

import hashlib
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from ..datasets import LabeledImageSet, to_nchw
from ..episodes import EpisodeSpec, NoiseSpec, apply_label_swaps, sample_episode
from ..numerics import functional as F
from .backbone import BackboneConfig
from .models import FewShotModel, build_model

Z95 = 1.96


class TimeLimitExceeded(RuntimeError):
    """Training ran past its wall-clock budget."""


@dataclass(frozen=True)
class EvalReport:
    """Per-task accuracies (fractions in [0,1]) with a normal-approximation 95% interval."""

    task_accuracies: np.ndarray
    #: sha256 over the sampled (pre-noise) episode manifests, to prove task sharing
    task_digest: str = ""

    @property
    def n_tasks(self) -> int:
        return int(self.task_accuracies.size)

    @property
    def mean(self) -> float:
        return float(np.mean(self.task_accuracies))

    @property
    def ci95_halfwidth(self) -> float:
        if self.n_tasks < 2:
            return float("nan")
        return float(Z95 * np.std(self.task_accuracies, ddof=1) / np.sqrt(self.n_tasks))

    def format(self) -> str:
        return f"{100 * self.mean:.2f} ± {100 * self.ci95_halfwidth:.2f}"

    def to_dict(self) -> dict:
        hw = self.ci95_halfwidth
        return {
            "n_tasks": self.n_tasks,
            "mean": self.mean,
            "ci95_halfwidth": None if np.isnan(hw) else hw,
            "task_digest": self.task_digest,
            "task_accuracies": [float(a) for a in self.task_accuracies],
        }


@dataclass
class BatchStream:
    """Shuffled mini-batches over every image of the given classes (one pass per iteration).

    Labels are re-indexed to 0..len(classes)-1 in sorted-class order.
    """

    dataset: LabeledImageSet
    classes: Sequence[int]
    batch_size: int = 16
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    transform: Callable | None = None
    transform_rng: np.random.Generator | None = None

    def __post_init__(self):
        classes = sorted(int(c) for c in self.classes)
        remap = {c: i for i, c in enumerate(classes)}
        self.indices = np.concatenate([self.dataset.indices_by_class[c] for c in classes])
        self.labels = np.array([remap[int(self.dataset.labels[i])] for i in self.indices])
        self.n_classes = len(classes)

    def __len__(self) -> int:
        return -(-self.indices.size // self.batch_size)

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = self.rng.permutation(self.indices.size)
        for start in range(0, order.size, self.batch_size):
            pick = order[start : start + self.batch_size]
            if pick.size < 2:
                continue  # batch norm needs two examples
            images = self.dataset.images[self.indices[pick]]
            if self.transform is not None:
                trng = self.transform_rng if self.transform_rng is not None else self.rng
                images = np.stack([self.transform(img, trng) for img in images])
            yield to_nchw(images), self.labels[pick]


def train_loop(
    model: FewShotModel,
    source,
    epochs: int,
    optimizer,
    validate: Callable[[FewShotModel], float] | None = None,
    selection: str = "best",
    time_limit: float | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[FewShotModel, list[dict]]:
    """Train for ``epochs`` passes over ``source`` and keep the selected snapshot.

    ``source`` is re-iterated every epoch (an EpisodeStream or BatchStream).
    With ``selection="best"`` the parameters of the epoch with the highest
    validation accuracy (earliest on ties) are restored at the end; ``"last"``
    keeps the final parameters.
    """
    if selection not in ("best", "last"):
        raise ValueError(f"unknown selection policy {selection!r}")
    start = time.monotonic()
    history: list[dict] = []
    best_acc, best_state = -np.inf, None
    for epoch in range(1, epochs + 1):
        loss = model.train_epoch(source, optimizer)
        val_acc = float(validate(model)) if validate is not None else float("nan")
        row = {"epoch": epoch, "train_loss": loss, "val_acc": val_acc}
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if selection == "best" and validate is not None and val_acc > best_acc:
            best_acc, best_state = val_acc, model.state_dict()
        if time_limit is not None and time.monotonic() - start > time_limit:
            raise TimeLimitExceeded(
                f"training exceeded its {time_limit:.0f} s budget after epoch {epoch}/{epochs}"
            )
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, history


def eval_loop(
    model: FewShotModel,
    dataset: LabeledImageSet,
    subset: Sequence[int],
    spec: EpisodeSpec,
    n_tasks: int,
    noise: NoiseSpec | None = None,
    rng: np.random.Generator | None = None,
    noise_rng: np.random.Generator | None = None,
    model_rng: np.random.Generator | None = None,
) -> EvalReport:
    """Query accuracy on ``n_tasks`` freshly sampled episodes.

    Episode sampling, label noise and any per-task model randomness (the
    baselines' head initialization) draw from three separate generators, so
    every method and every noise level sees the same base tasks for a given
    ``rng`` seed.
    """
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    model.check_way(spec.n_way)
    noise = noise or NoiseSpec(0)
    rng = rng if rng is not None else np.random.default_rng(0)
    noise_rng = noise_rng if noise_rng is not None else np.random.default_rng(1)
    model_rng = model_rng if model_rng is not None else np.random.default_rng(2)
    accs = np.empty(n_tasks)
    digest = hashlib.sha256()
    for t in range(n_tasks):
        ep = sample_episode(dataset, subset, spec, rng)
        digest.update(json.dumps(ep.manifest(), sort_keys=True).encode())
        if noise.m_swaps:
            ep = apply_label_swaps(ep, noise, noise_rng)
        accs[t] = F.accuracy(model.predict_proba(ep, rng=model_rng), ep.query_labels)
    return EvalReport(accs, digest.hexdigest())


def make_validator(dataset, subset, spec: EpisodeSpec, n_tasks: int, seed) -> Callable[[FewShotModel], float]:
    """Validation on a fixed task set: the same episodes after every epoch.

    ``seed`` is an int or a ``SeedSequence``; a fresh copy is spawned from on every call.
    """
    if isinstance(seed, np.random.SeedSequence):
        entropy, spawn_key = seed.entropy, seed.spawn_key
    else:
        entropy, spawn_key = seed, ()

    def validate(model: FewShotModel) -> float:
        root = np.random.SeedSequence(entropy, spawn_key=spawn_key)
        r_sample, r_noise, r_model = (np.random.default_rng(s) for s in root.spawn(3))
        return eval_loop(model, dataset, subset, spec, n_tasks, None, r_sample, r_noise, r_model).mean

    return validate


# -- checkpoints ------------------------------------------------------------------
def save_checkpoint(model: FewShotModel, path, rng_label: str = "") -> None:
    """Write an ``.npz`` archive holding the arrays plus a JSON header describing the model."""
    header = model.describe()
    header["rng_label"] = rng_label
    arrays = {f"param/{n}": p.data for n, p in model.params.items()}
    for name, stats in model.buffers.items():
        for key, arr in stats.items():
            arrays[f"buffer/{name}/{key}"] = arr
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[FewShotModel, dict]:
    with np.load(path) as archive:
        header = json.loads(archive["header"].tobytes().decode())
        bb = header["backbone"]
        bb["input_shape"] = tuple(bb["input_shape"])
        hp = dict(header["hparams"])
        kind = header["kind"]
        if kind in ("baseline", "baseline++"):
            hp.pop("cosine", None)
        model = build_model(kind, BackboneConfig(**bb), np.random.default_rng(0), header["n_way"], **hp)
        params = {k[len("param/"):]: archive[k] for k in archive.files if k.startswith("param/")}
        buffers: dict = {}
        for k in archive.files:
            if k.startswith("buffer/"):
                _, name, key = k.split("/")
                buffers.setdefault(name, {})[key] = archive[k]
    model.load_state_dict({"params": params, "buffers": buffers})
    return model, header


def history_to_csv(history: list[dict]) -> str:
    """Shortest round-trip float text, so reloading gives back the exact values."""
    lines = ["epoch,train_loss,val_acc"]
    for row in history:
        lines.append(f"{row['epoch']},{float(row['train_loss'])!r},{float(row['val_acc'])!r}")
    return "\n".join(lines) + "\n"


__all__ = [
    "BatchStream",
    "EvalReport",
    "TimeLimitExceeded",
    "eval_loop",
    "history_to_csv",
    "load_checkpoint",
    "make_validator",
    "save_checkpoint",
    "train_loop",
]
