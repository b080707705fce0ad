"""The 4-block convolutional feature extractor shared by every classification method."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import functional as F
from ..numerics.tensor import DimensionError, Tensor


@dataclass(frozen=True)
class BackboneConfig:
    """Blocks of [conv 3×3 → batch norm → ReLU → max-pool 2×2].

    ``pooled_blocks`` limits pooling to the leading blocks; the relation network
    keeps the last blocks unpooled so its relation module sees spatial maps.
    """

    block_count: int = 4
    channels: int = 64
    input_shape: tuple[int, int, int] = (1, 28, 28)
    pooled_blocks: int | None = None

    def __post_init__(self):
        if self.block_count < 1 or self.channels < 1:
            raise ValueError("backbone needs at least one block and one channel")
        if self.embedding_dim <= 0:
            raise ValueError(f"input {self.input_shape} is too small for {self.block_count} pooled blocks")

    @property
    def n_pooled(self) -> int:
        return self.block_count if self.pooled_blocks is None else min(self.pooled_blocks, self.block_count)

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        _, h, w = self.input_shape
        for _ in range(self.n_pooled):
            h, w = h // 2, w // 2
        return (self.channels, h, w)

    @property
    def embedding_dim(self) -> int:
        c, h, w = self.feature_shape
        return c * h * w


def conv_init(rng: np.random.Generator, cout: int, cin: int, k: int = 3) -> np.ndarray:
    # He-style normal with fan-out, as is usual for this backbone family
    return rng.normal(0.0, np.sqrt(2.0 / (k * k * cout)), size=(cout, cin, k, k))


def init_backbone(config: BackboneConfig, rng: np.random.Generator, prefix: str = "backbone."):
    """Return (params, buffers) for a freshly initialized backbone."""
    params: dict[str, Tensor] = {}
    buffers: dict[str, dict[str, np.ndarray]] = {}
    cin = config.input_shape[0]
    for i in range(config.block_count):
        params[f"{prefix}conv{i}.weight"] = Tensor(conv_init(rng, config.channels, cin), requires_grad=True)
        params[f"{prefix}bn{i}.weight"] = Tensor(np.ones(config.channels), requires_grad=True)
        params[f"{prefix}bn{i}.bias"] = Tensor(np.zeros(config.channels), requires_grad=True)
        buffers[f"{prefix}bn{i}"] = {
            "mean": np.zeros(config.channels, dtype=np.float32),
            "var": np.ones(config.channels, dtype=np.float32),
        }
        cin = config.channels
    return params, buffers


def backbone_forward(
    params: dict[str, Tensor],
    buffers: dict | None,
    x,
    config: BackboneConfig,
    training: bool,
    flatten: bool = True,
    prefix: str = "backbone.",
) -> Tensor:
    """Embed a B×C×H×W batch.

    ``buffers=None`` means "always use batch statistics and never track running
    ones", which is what MAML's fast weights need.
    """
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x))
    if tuple(x.shape[1:]) != tuple(config.input_shape):
        raise DimensionError(f"backbone expects images of shape {config.input_shape}, got {x.shape[1:]}")
    h = x
    for i in range(config.block_count):
        h = F.conv2d(h, params[f"{prefix}conv{i}.weight"], padding=1)
        running = None if buffers is None else buffers[f"{prefix}bn{i}"]
        h = F.batch_norm(
            h,
            params[f"{prefix}bn{i}.weight"],
            params[f"{prefix}bn{i}.bias"],
            running=running,
            training=training or buffers is None,
        )
        if i < config.n_pooled:
            # max-pool before ReLU: identical values and gradients, 4x less gating work
            h = F.max_pool2d(h, 2)
        h = F.relu(h)
    return F.flatten(h) if flatten else h
