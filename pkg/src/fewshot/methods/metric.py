"""Metric heads: matching attention, class prototypes, and the learned relation module."""
from __future__ import annotations

import numpy as np

from ..numerics import functional as F
from ..numerics.tensor import (
    ContractError,
    Tensor,
    broadcast_to,
    concat,
    exp,
    log,
    matmul,
    reshape,
    transpose,
)
from .backbone import conv_init


class NumericGuardError(ArithmeticError):
    """An embedding with zero norm reached a cosine similarity."""


NORM_FLOOR = 1e-8


def _const(x, like: Tensor) -> Tensor:
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def l2_normalize(x: Tensor) -> Tensor:
    sq = (x * x).sum(axis=1, keepdims=True)
    if (sq.data == 0).any():
        raise NumericGuardError("cannot take the cosine of a zero-norm embedding")
    norm = sq ** 0.5
    short = NORM_FLOOR - norm.data
    if (short > 0).any():
        norm = norm + _const(np.maximum(short, 0.0), norm)
    return x / norm


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity matrix between A (n×d) and B (m×d)."""
    return matmul(l2_normalize(a), transpose(l2_normalize(b), (1, 0)))


def squared_euclidean(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise squared distances n×m."""
    aa = (a * a).sum(axis=1, keepdims=True)
    bb = transpose((b * b).sum(axis=1, keepdims=True), (1, 0))
    return aa + bb - matmul(a, transpose(b, (1, 0))) * 2.0


def similarity(query: Tensor, keys: Tensor, distance: str, scale: float = 1.0) -> Tensor:
    """Similarity logits: ``scale·cos`` or ``-scale·‖q-k‖²``."""
    if distance == "cosine":
        s = cosine_similarity(query, keys)
    elif distance in ("sqeuclidean", "euclidean"):
        s = -squared_euclidean(query, keys)
    else:
        raise ValueError(f"unknown distance {distance!r}")
    return s * scale if scale != 1.0 else s


def logsumexp(x: Tensor, axis: int = 1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    return log(exp(x - _const(m, x)).sum(axis=axis, keepdims=True)) + _const(m, x)


def _class_members(labels: np.ndarray, n_way: int) -> list[np.ndarray]:
    members = [np.flatnonzero(labels == c) for c in range(n_way)]
    missing = [c for c, m in enumerate(members) if m.size == 0]
    if missing:
        raise ContractError(f"support set has no entries for class(es) {missing}")
    return members


def compute_prototypes(support_emb: Tensor, support_labels, n_way: int | None = None) -> Tensor:
    """Per-class mean of support embeddings, N×D (works on flattened or spatial features)."""
    labels = np.asarray(support_labels)
    n_way = int(labels.max()) + 1 if n_way is None else n_way
    members = _class_members(labels, n_way)
    avg = np.zeros((n_way, labels.shape[0]))
    for c, idx in enumerate(members):
        avg[c, idx] = 1.0 / idx.size
    flat = reshape(support_emb, (support_emb.shape[0], -1))
    protos = matmul(_const(avg, flat), flat)
    return reshape(protos, (n_way,) + tuple(support_emb.shape[1:]))


def matching_log_probs(
    support_emb: Tensor,
    support_labels,
    query_emb: Tensor,
    n_way: int | None = None,
    distance: str = "cosine",
    scale: float = 10.0,
) -> Tensor:
    """log P(class | query): log of the summed softmax attention over each class's support entries."""
    if support_emb.shape[0] == 0:
        raise ContractError("matching needs a non-empty support set")
    labels = np.asarray(support_labels)
    n_way = int(labels.max()) + 1 if n_way is None else n_way
    members = _class_members(labels, n_way)
    scores = similarity(query_emb, support_emb, distance, scale)
    total = logsumexp(scores, axis=1)
    per_class = concat([logsumexp(scores[:, idx], axis=1) for idx in members], axis=1)
    return per_class - total


def matching_forward(support_emb, support_labels, query_emb, n_way=None, distance="cosine", scale=10.0) -> Tensor:
    return exp(matching_log_probs(support_emb, support_labels, query_emb, n_way, distance, scale))


def proto_logits(prototypes: Tensor, query_emb: Tensor, distance: str = "sqeuclidean", scale: float = 1.0) -> Tensor:
    return similarity(query_emb, prototypes, distance, scale)


def proto_forward(prototypes: Tensor, query_emb: Tensor, distance: str = "sqeuclidean", scale: float = 1.0) -> Tensor:
    """Softmax over classes of the (negative squared Euclidean by default) similarity to each prototype."""
    return F.softmax(proto_logits(prototypes, query_emb, distance, scale), axis=1)


# -- relation module ------------------------------------------------------------
def init_relation_module(rng: np.random.Generator, channels: int, feature_hw: tuple[int, int],
                         hidden: int = 8, prefix: str = "relation."):
    """Two conv blocks on concatenated (prototype, query) maps, then FC → ReLU → FC to a scalar."""
    params: dict[str, Tensor] = {}
    buffers: dict[str, dict[str, np.ndarray]] = {}
    cin = 2 * channels
    for i in range(2):
        params[f"{prefix}conv{i}.weight"] = Tensor(conv_init(rng, channels, cin), requires_grad=True)
        params[f"{prefix}bn{i}.weight"] = Tensor(np.ones(channels), requires_grad=True)
        params[f"{prefix}bn{i}.bias"] = Tensor(np.zeros(channels), requires_grad=True)
        buffers[f"{prefix}bn{i}"] = {"mean": np.zeros(channels, np.float32), "var": np.ones(channels, np.float32)}
        cin = channels
    flat = channels * _relation_out_hw(feature_hw)
    bound1 = 1.0 / np.sqrt(flat)
    bound2 = 1.0 / np.sqrt(hidden)
    params[f"{prefix}fc1.weight"] = Tensor(rng.uniform(-bound1, bound1, (hidden, flat)), requires_grad=True)
    params[f"{prefix}fc1.bias"] = Tensor(rng.uniform(-bound1, bound1, hidden), requires_grad=True)
    params[f"{prefix}fc2.weight"] = Tensor(rng.uniform(-bound2, bound2, (1, hidden)), requires_grad=True)
    params[f"{prefix}fc2.bias"] = Tensor(rng.uniform(-bound2, bound2, 1), requires_grad=True)
    return params, buffers


def _relation_out_hw(hw: tuple[int, int]) -> int:
    h, w = hw
    for _ in range(2):
        if h >= 2 and w >= 2:
            h, w = h // 2, w // 2
    return h * w


def relation_scores(params, buffers, pairs: Tensor, training: bool, prefix: str = "relation.") -> Tensor:
    h = pairs
    for i in range(2):
        h = F.conv2d(h, params[f"{prefix}conv{i}.weight"], padding=1)
        h = F.batch_norm(h, params[f"{prefix}bn{i}.weight"], params[f"{prefix}bn{i}.bias"],
                         running=buffers[f"{prefix}bn{i}"], training=training)
        if h.shape[2] >= 2 and h.shape[3] >= 2:
            h = F.max_pool2d(h, 2)
        h = F.relu(h)
    h = F.flatten(h)
    h = F.relu(F.linear(h, params[f"{prefix}fc1.weight"], params[f"{prefix}fc1.bias"]))
    return F.linear(h, params[f"{prefix}fc2.weight"], params[f"{prefix}fc2.bias"])


def relation_logits(params, buffers, support_maps: Tensor, support_labels, query_maps: Tensor,
                    n_way: int | None = None, training: bool = False) -> Tensor:
    """Relation score of every (query, class-prototype map) pair, Q×N."""
    protos = compute_prototypes(support_maps, support_labels, n_way)
    n, c, h, w = protos.shape
    q = query_maps.shape[0]
    p = broadcast_to(reshape(protos, (1, n, c, h, w)), (q, n, c, h, w))
    qq = broadcast_to(reshape(query_maps, (q, 1, c, h, w)), (q, n, c, h, w))
    pairs = reshape(concat([p, qq], axis=2), (q * n, 2 * c, h, w))
    return reshape(relation_scores(params, buffers, pairs, training), (q, n))


def relation_forward(params, buffers, support_maps, support_labels, query_maps, n_way=None, training=False) -> Tensor:
    return F.softmax(relation_logits(params, buffers, support_maps, support_labels, query_maps, n_way, training), axis=1)
