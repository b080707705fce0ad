"""N-way K-shot episode sampling and support-set label-swap noise."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .datasets import LabeledImageSet, to_nchw


class SamplingError(ValueError):
    """Not enough classes or images to build the requested episode."""


class NoiseError(ValueError):
    """Label noise cannot be applied to this episode."""


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 1
    q_queries: int = 16

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.q_queries < 1:
            raise SamplingError(f"invalid episode spec {self}: need N >= 2, K >= 1, Q >= 1")


@dataclass(frozen=True)
class NoiseSpec:
    m_swaps: int = 0

    def __post_init__(self):
        if self.m_swaps < 0:
            raise NoiseError("number of label swaps must be >= 0")


@dataclass(frozen=True)
class Episode:
    """One few-shot task. Images are B×C×H×W; labels are episode labels 0..N-1.

    ``support_indices``/``query_indices`` point back into the source dataset and
    ``class_map[i]`` is the global class of episode label ``i``.
    """

    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    class_map: tuple[int, ...]
    support_indices: np.ndarray
    query_indices: np.ndarray
    true_support_labels: np.ndarray | None = None

    @property
    def n_way(self) -> int:
        return len(self.class_map)

    @property
    def n_mislabeled(self) -> int:
        if self.true_support_labels is None:
            return 0
        return int((self.true_support_labels != self.support_labels).sum())

    def manifest(self) -> dict:
        return {
            "class_map": [int(c) for c in self.class_map],
            "support": [[int(i), int(l)] for i, l in zip(self.support_indices, self.support_labels)],
            "query": [[int(i), int(l)] for i, l in zip(self.query_indices, self.query_labels)],
        }


def sample_episode(
    dataset: LabeledImageSet,
    subset: Sequence[int],
    spec: EpisodeSpec,
    rng: np.random.Generator,
) -> Episode:
    """Draw N classes, then K+Q distinct images from each, all without replacement."""
    needed = spec.k_shot + spec.q_queries
    by_class = dataset.indices_by_class
    eligible = [c for c in subset if len(by_class[c]) >= needed]
    if len(eligible) < spec.n_way:
        raise SamplingError(
            f"{spec.n_way}-way episode needs {spec.n_way} classes with >= {needed} images, "
            f"only {len(eligible)} of {len(subset)} qualify (deficit {spec.n_way - len(eligible)})"
        )
    classes = rng.choice(np.asarray(eligible), size=spec.n_way, replace=False)
    support, query = [], []
    for c in classes:
        picked = rng.choice(by_class[c], size=needed, replace=False)
        support.append(picked[: spec.k_shot])
        query.append(picked[spec.k_shot :])
    s_idx = np.concatenate(support)
    q_idx = np.concatenate(query)
    s_lab = np.repeat(np.arange(spec.n_way), spec.k_shot)
    q_lab = np.repeat(np.arange(spec.n_way), spec.q_queries)
    return Episode(
        support_images=to_nchw(dataset.images[s_idx]),
        support_labels=s_lab,
        query_images=to_nchw(dataset.images[q_idx]),
        query_labels=q_lab,
        class_map=tuple(int(c) for c in classes),
        support_indices=s_idx,
        query_indices=q_idx,
    )


def apply_label_swaps(episode: Episode, noise: NoiseSpec, rng: np.random.Generator) -> Episode:
    """Apply M label swaps to the support set; class balance is preserved by construction.

    Each swap picks two distinct labels uniformly, one support image currently
    bearing each label uniformly, and exchanges their labels. Swaps are drawn
    independently, so an image can be swapped more than once.
    """
    if episode.n_way < 2:
        raise NoiseError("label swaps need at least two classes")
    if noise.m_swaps == 0:
        return episode
    labels = episode.support_labels.copy()
    for _ in range(noise.m_swaps):
        l1, l2 = rng.choice(episode.n_way, size=2, replace=False)
        i1 = rng.choice(np.flatnonzero(labels == l1))
        i2 = rng.choice(np.flatnonzero(labels == l2))
        labels[i1], labels[i2] = l2, l1
    truth = episode.true_support_labels
    return replace(
        episode,
        support_labels=labels,
        true_support_labels=episode.support_labels.copy() if truth is None else truth,
    )


class EpisodeStream:
    """Lazily yields ``episodes_per_epoch`` freshly sampled (then noised) episodes per iteration.

    The sampling and noise generators persist across epochs, so consecutive
    epochs see different episodes while the whole sequence stays a function of
    the seeds.
    """

    def __init__(
        self,
        dataset: LabeledImageSet,
        subset: Sequence[int],
        spec: EpisodeSpec,
        episodes_per_epoch: int,
        noise: NoiseSpec | None = None,
        rng: np.random.Generator | None = None,
        noise_rng: np.random.Generator | None = None,
        transform: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None,
        transform_rng: np.random.Generator | None = None,
    ):
        if episodes_per_epoch < 0:
            raise SamplingError("episodes_per_epoch must be >= 0")
        self.dataset = dataset
        self.subset = list(subset)
        self.spec = spec
        self.episodes_per_epoch = episodes_per_epoch
        self.noise = noise or NoiseSpec(0)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.noise_rng = noise_rng if noise_rng is not None else self.rng
        self.transform = transform
        self.transform_rng = transform_rng if transform_rng is not None else self.rng

    def __len__(self) -> int:
        return self.episodes_per_epoch

    def __iter__(self) -> Iterator[Episode]:
        for _ in range(self.episodes_per_epoch):
            ep = sample_episode(self.dataset, self.subset, self.spec, self.rng)
            if self.noise.m_swaps:
                ep = apply_label_swaps(ep, self.noise, self.noise_rng)
            if self.transform is not None:
                ep = self._augment(ep)
            yield ep

    def _augment(self, ep: Episode) -> Episode:
        def apply(batch):
            hwc = batch.transpose(0, 2, 3, 1)
            out = np.stack([self.transform(img, self.transform_rng) for img in hwc])
            return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

        return replace(ep, support_images=apply(ep.support_images), query_images=apply(ep.query_images))


def episode_stream(dataset, subset, spec, episodes_per_epoch, noise=None, rng=None) -> EpisodeStream:
    return EpisodeStream(dataset, subset, spec, episodes_per_epoch, noise, rng)


def save_episode_manifests(episodes: Sequence[Episode], path) -> None:
    Path(path).write_text(json.dumps([e.manifest() for e in episodes]) + "\n")
