"""Neural-network operations composed from differentiable tensor primitives.

Nothing here defines its own backward rule except through the primitives in
``tensor``; that keeps every operation twice-differentiable for free.
"""
from __future__ import annotations

import numpy as np

from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    as_tensor,
    exp,
    log,
    masked,
    matmul,
    max_pool,
    no_grad,
    reshape,
    transpose,
    unfold,
)


class DegenerateBatchError(ContractError):
    """Batch statistics requested over a single example."""


class LabelError(ValueError):
    """Class labels outside the valid range."""


def _const(x, like: Tensor) -> Tensor:
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def relu(x: Tensor) -> Tensor:
    return masked(x, x.data > 0)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    return x * _const(np.where(x.data > 0, 1.0, slope), x)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = matmul(x, transpose(weight, (1, 0)))
    return out + bias if bias is not None else out


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation of B×C×H×W input with an O×C×kh×kw kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}"
        )
    B, _, H, W = x.shape
    O, C, kh, kw = kernel.shape
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if H + 2 * padding < kh or W + 2 * padding < kw or Ho <= 0 or Wo <= 0:
        raise DimensionError(
            f"conv2d output extent is non-positive for input {x.shape}, kernel {kernel.shape}, "
            f"padding {padding}"
        )
    cols = unfold(x, kh, kw, stride, padding)
    out = matmul(reshape(kernel, (O, C * kh * kw)), cols)
    out = reshape(out, (B, O, Ho, Wo))
    if bias is not None:
        out = out + reshape(bias, (1, O, 1, 1))
    return out


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling (floor mode). Gradient flows to the first argmax only."""
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d expects B×C×H×W input, got {x.shape}")
    return max_pool(x, size)


def batch_norm(
    x: Tensor,
    weight: Tensor | None,
    bias: Tensor | None,
    running: dict | None = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over every axis except channels (axis 1).

    In training mode the current batch statistics are used and, when a
    ``running`` dict with ``mean``/``var`` arrays is given, they are updated in
    place. In eval mode the running statistics are used as constants.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    if training:
        if x.shape[0] < 2:
            raise DegenerateBatchError(
                f"batch_norm in train mode needs at least 2 examples, got {x.shape[0]}"
            )
        mu = x.mean(axis=axes, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        xhat = centered * (var + eps) ** -0.5
        if running is not None:
            n = x.size // x.shape[1]
            bm = mu.data.reshape(-1).astype(running["mean"].dtype)
            bv = var.data.reshape(-1).astype(running["var"].dtype) * (n / max(n - 1, 1))
            running["mean"] = (1 - momentum) * running["mean"] + momentum * bm
            running["var"] = (1 - momentum) * running["var"] + momentum * bv
    else:
        if running is None:
            raise ContractError("batch_norm in eval mode needs running statistics")
        rm = running["mean"].reshape(shape)
        rv = running["var"].reshape(shape)
        xhat = (x - _const(rm, x)) * _const(1.0 / np.sqrt(rv + eps), x)
    if weight is not None:
        xhat = xhat * reshape(weight, shape)
    if bias is not None:
        xhat = xhat + reshape(bias, shape)
    return xhat


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - _const(x.data.max(axis=axis, keepdims=True), x)
    return shifted - log(exp(shifted).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    e = exp(x - _const(x.data.max(axis=axis, keepdims=True), x))
    return e / e.sum(axis=axis, keepdims=True)


def one_hot(labels, n: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], n), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _check_labels(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise LabelError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise LabelError(f"labels must lie in [0, {n}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def nll_from_log_probs(log_probs: Tensor, labels) -> Tensor:
    B, N = log_probs.shape
    labels = _check_labels(labels, N)
    if labels.shape[0] != B:
        raise DimensionError(f"{B} rows of scores but {labels.shape[0]} labels")
    picked = log_probs * _const(one_hot(labels, N), log_probs)
    return -picked.sum() * (1.0 / B)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax probability of the true labels."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be B×N, got {logits.shape}")
    return nll_from_log_probs(log_softmax(logits, axis=1), labels)


def mse(pred: Tensor, target) -> Tensor:
    target = as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


def bce_with_logits(pred: Tensor, target, weight=None) -> Tensor:
    """Mean binary cross-entropy on logits, stable for large |logit|."""
    target = as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"bce shape mismatch: {pred.shape} vs {target.shape}")
    abs_x = pred * _const(np.sign(pred.data), pred)
    loss = relu(pred) - pred * target + log(1.0 + exp(-abs_x))
    if weight is not None:
        weight = as_tensor(weight, dtype=pred.dtype)
        if weight.shape != pred.shape:
            raise DimensionError(f"bce weight shape {weight.shape} vs {pred.shape}")
        loss = loss * weight
    return loss.mean()


def accuracy(scores, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    scores = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    return float(np.mean(scores.argmax(axis=1) == np.asarray(labels)))


def evaluate(fn, *args, **kwargs):
    """Call ``fn`` with graph recording disabled."""
    with no_grad():
        return fn(*args, **kwargs)
