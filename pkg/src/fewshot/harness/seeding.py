"""Named random substreams derived from one root seed."""
from __future__ import annotations

import hashlib

import numpy as np

STREAMS = ("dataset", "sampling", "init", "noise", "validation", "augment", "evaluation")


def _stream_key(name: str) -> int:
    # stable across processes, unlike hash()
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


class SeedTree:
    """Maps a stream name to its own SeedSequence: ``SeedSequence([root, key(name)])``.

    Streams are independent of each other and of the order in which they are
    requested, so adding a consumer never perturbs the others. The evaluation
    streams hang off ``eval_seed`` so that runs with different training seeds
    can still share one evaluation task set.
    """

    def __init__(self, seed: int, eval_seed: int | None = None):
        self.seed = int(seed)
        self.eval_seed = self.seed if eval_seed is None else int(eval_seed)

    def sequence(self, name: str) -> np.random.SeedSequence:
        root = self.eval_seed if name.startswith("evaluation") else self.seed
        return np.random.SeedSequence([root, _stream_key(name)])

    def rng(self, name: str) -> np.random.Generator:
        if name.split(".")[0] not in STREAMS:
            raise KeyError(f"unknown random stream {name!r}; known: {STREAMS}")
        return np.random.default_rng(self.sequence(name))

    def integer(self, name: str) -> int:
        """A 32-bit integer seed drawn from the named stream."""
        return int(self.sequence(name).generate_state(1)[0])


def seed_everything(seed: int = 10, eval_seed: int | None = None) -> SeedTree:
    """Root of all randomness for a run. Nothing in the library touches global RNG state."""
    return SeedTree(seed, eval_seed)
