"""The six classification methods behind a common interface.

Every model keeps its weights as a flat ``params`` dict of leaf tensors plus a
``buffers`` dict of batch-norm running statistics. Training code computes
gradients of ``model.loss(...)`` and asks an optimizer for the next ``params``.
"""
from __future__ import annotations

import copy
from dataclasses import asdict
from typing import Iterable

import numpy as np

from ..episodes import Episode
from ..numerics import functional as F
from ..numerics.optim import make_optimizer
from ..numerics.tensor import Tensor, grad, no_grad, set_grad_enabled
from .backbone import BackboneConfig, backbone_forward, init_backbone
from .maml import maml_adapt, maml_meta_step
from .metric import (
    compute_prototypes,
    init_relation_module,
    l2_normalize,
    matching_log_probs,
    proto_logits,
    relation_logits,
)

METHOD_KINDS = ("baseline", "baseline++", "matching", "proto", "relation", "maml")
METRIC_KINDS = ("matching", "proto", "relation")


class WayChangeError(ValueError):
    """The method cannot be evaluated with a different number of classes than it was trained on."""


def _linear_init(rng, n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(n_in)
    return rng.uniform(-bound, bound, (n_out, n_in)), np.zeros(n_out)


class FewShotModel:
    """Shared state and plumbing. Subclasses define ``set_forward`` and ``loss``."""

    kind = ""
    #: episodes (or mini-batches) averaged into one parameter update
    episodes_per_update = 1
    #: whether train_epoch consumes episodes (True) or flat mini-batches (False)
    episodic = True

    def __init__(self, backbone: BackboneConfig, rng: np.random.Generator, n_way: int = 5, **hparams):
        self.backbone = backbone
        self.n_way = n_way
        self.hparams = dict(hparams)
        self.params, self.buffers = init_backbone(backbone, rng)

    # -- embedding ------------------------------------------------------------
    def embed(self, images, training: bool = False, params=None, flatten: bool = True) -> Tensor:
        """B×C×H×W images to B×embedding_dim (or spatial maps with ``flatten=False``)."""
        p = self.params if params is None else params
        return backbone_forward(p, self.buffers, images, self.backbone, training, flatten=flatten)

    def _embed_episode(self, episode: Episode, training: bool, flatten: bool = True):
        s = episode.support_images.shape[0]
        x = np.concatenate([episode.support_images, episode.query_images])
        emb = self.embed(x, training=training, flatten=flatten)
        return emb[:s], emb[s:]

    # -- interface --------------------------------------------------------------
    def set_forward(self, episode: Episode, training: bool = False, rng=None) -> Tensor:
        """Query class scores Q×N; ``log_softmax`` of them gives log-probabilities."""
        raise NotImplementedError

    def loss(self, episode: Episode) -> Tensor:
        return F.softmax_cross_entropy(self.set_forward(episode, training=True), episode.query_labels)

    def predict_proba(self, episode: Episode, rng=None) -> np.ndarray:
        with no_grad():
            scores = self.set_forward(episode, training=False, rng=rng)
            return F.softmax(scores, axis=1).data

    def check_way(self, n_way: int) -> None:
        """Raise if this model cannot run ``n_way``-way tasks."""

    def make_optimizer(self, kind: str = "adam", lr: float = 1e-3):
        return make_optimizer(kind, self.params, lr)

    def train_step(self, batch: list, optimizer) -> float:
        """One parameter update from a list of episodes; returns the mean loss."""
        names = list(self.params)
        total = {n: np.zeros_like(self.params[n].data) for n in names}
        losses = []
        for ep in batch:
            loss = self.loss(ep)
            for n, g in zip(names, grad(loss, [self.params[n] for n in names])):
                total[n] += g.data
            losses.append(float(loss.data))
        grads = {n: Tensor(total[n] / len(batch), dtype=total[n].dtype) for n in names}
        self.params = optimizer.step(self.params, grads)
        return float(np.mean(losses))

    def train_epoch(self, source: Iterable, optimizer) -> float:
        losses, batch = [], []
        for item in source:
            batch.append(item)
            if len(batch) == self.episodes_per_update:
                losses.append(self.train_step(batch, optimizer))
                batch = []
        if batch:
            losses.append(self.train_step(batch, optimizer))
        if not losses:
            return float("nan")
        loss = float(np.mean(losses))
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss in {self.kind}")
        return loss

    # -- persistence --------------------------------------------------------------
    def state_dict(self) -> dict:
        return {
            "params": {n: p.data.copy() for n, p in self.params.items()},
            "buffers": copy.deepcopy(self.buffers),
        }

    def load_state_dict(self, state: dict) -> None:
        self.params = {
            n: Tensor(np.array(a), requires_grad=self.params[n].requires_grad, dtype=self.params[n].dtype)
            for n, a in state["params"].items()
        }
        self.buffers = copy.deepcopy(state["buffers"])

    def describe(self) -> dict:
        return {"kind": self.kind, "n_way": self.n_way, "backbone": asdict(self.backbone), "hparams": self.hparams}


class ProtoNet(FewShotModel):
    kind = "proto"

    def __init__(self, backbone, rng, n_way=5, distance: str = "sqeuclidean", **hp):
        super().__init__(backbone, rng, n_way, distance=distance, **hp)

    def set_forward(self, episode, training=False, rng=None):
        s, q = self._embed_episode(episode, training)
        protos = compute_prototypes(s, episode.support_labels, episode.n_way)
        return proto_logits(protos, q, self.hparams["distance"])


class MatchingNet(FewShotModel):
    kind = "matching"

    def __init__(self, backbone, rng, n_way=5, distance: str = "cosine", scale: float = 10.0, **hp):
        super().__init__(backbone, rng, n_way, distance=distance, scale=scale, **hp)

    def set_forward(self, episode, training=False, rng=None):
        # log-probabilities; softmax of them is the identity
        s, q = self._embed_episode(episode, training)
        return matching_log_probs(s, episode.support_labels, q, episode.n_way,
                                  self.hparams["distance"], self.hparams["scale"])

    def loss(self, episode):
        return F.nll_from_log_probs(self.set_forward(episode, training=True), episode.query_labels)


class RelationNet(FewShotModel):
    kind = "relation"

    def __init__(self, backbone, rng, n_way=5, hidden: int = 8, **hp):
        if backbone.pooled_blocks is None:
            # keep spatial maps for the relation module
            backbone = BackboneConfig(backbone.block_count, backbone.channels, backbone.input_shape,
                                      pooled_blocks=max(backbone.block_count - 2, 0))
        super().__init__(backbone, rng, n_way, hidden=hidden, **hp)
        c, h, w = backbone.feature_shape
        rp, rb = init_relation_module(rng, c, (h, w), hidden)
        self.params.update(rp)
        self.buffers.update(rb)

    def set_forward(self, episode, training=False, rng=None):
        s, q = self._embed_episode(episode, training, flatten=False)
        return relation_logits(self.params, self.buffers, s, episode.support_labels, q, episode.n_way, training)


class MAML(FewShotModel):
    """Backbone + linear head; the whole network is adapted per task.

    Batch norm always normalizes with the current batch and keeps no running
    statistics, so the fast weights fully define the adapted model.
    """

    kind = "maml"
    episodes_per_update = 4

    def __init__(self, backbone, rng, n_way=5, inner_lr: float = 0.1, inner_steps: int = 2,
                 first_order: bool = False, eval_steps: int | None = None, **hp):
        if inner_steps < 1:
            raise ValueError("MAML requires inner_steps >= 1")
        super().__init__(backbone, rng, n_way, inner_lr=inner_lr, inner_steps=inner_steps,
                         first_order=first_order, eval_steps=eval_steps or inner_steps, **hp)
        self.buffers = {}
        w, b = _linear_init(rng, n_way, backbone.embedding_dim)
        self.params["head.weight"] = Tensor(w, requires_grad=True)
        self.params["head.bias"] = Tensor(b, requires_grad=True)

    def check_way(self, n_way):
        if n_way != self.n_way:
            raise WayChangeError(
                f"MAML was built for {self.n_way}-way tasks and cannot run {n_way}-way tasks: "
                "its classifier head has a fixed number of outputs"
            )

    def logits(self, params, images) -> Tensor:
        feats = backbone_forward(params, None, images, self.backbone, training=True)
        return F.linear(feats, params["head.weight"], params["head.bias"])

    def _support_loss(self, params, ep):
        return F.softmax_cross_entropy(self.logits(params, ep.support_images), ep.support_labels)

    def _query_loss(self, params, ep):
        return F.softmax_cross_entropy(self.logits(params, ep.query_images), ep.query_labels)

    def adapt(self, episode, n_updates=None, track_higher_order=False, params=None):
        self.check_way(episode.n_way)
        return maml_adapt(
            lambda p: self._support_loss(p, episode),
            self.params if params is None else params,
            self.hparams["inner_lr"],
            self.hparams["inner_steps"] if n_updates is None else n_updates,
            track_higher_order,
        )

    def set_forward(self, episode, training=False, rng=None):
        if training:
            fast = self.adapt(episode, track_higher_order=not self.hparams["first_order"])
            return self.logits(fast, episode.query_images)
        # evaluation: adapt detached copies so no graph back to the meta-parameters is kept
        start = {n: Tensor(p.data, requires_grad=True) for n, p in self.params.items()}
        with set_grad_enabled(True):
            fast = self.adapt(episode, n_updates=self.hparams["eval_steps"], params=start)
        with no_grad():
            return self.logits(fast, episode.query_images)

    def predict_proba(self, episode, rng=None):
        return F.softmax(self.set_forward(episode, training=False), axis=1).data

    def train_step(self, batch, optimizer):
        for ep in batch:
            self.check_way(ep.n_way)
        self.params, loss = maml_meta_step(
            self._support_loss, self._query_loss, self.params, batch,
            self.hparams["inner_lr"], self.hparams["inner_steps"], optimizer,
            first_order=self.hparams["first_order"],
        )
        return loss


class Baseline(FewShotModel):
    """Pretrained backbone plus a classifier that is re-initialized and fine-tuned per task.

    ``cosine=False`` is the plain linear head; ``cosine=True`` scores classes by the
    scaled cosine similarity between head weight rows and features (Baseline++).
    """

    kind = "baseline"
    episodic = False

    def __init__(self, backbone, rng, n_way=5, n_classes: int = 64, cosine: bool = False,
                 scale: float = 10.0, finetune_steps: int = 100, finetune_lr: float = 0.01, **hp):
        super().__init__(backbone, rng, n_way, n_classes=n_classes, cosine=cosine, scale=scale,
                         finetune_steps=finetune_steps, finetune_lr=finetune_lr, **hp)
        self.kind = "baseline++" if cosine else "baseline"
        w, b = self.init_head(rng, n_classes)
        self.params["head.weight"] = w
        if b is not None:
            self.params["head.bias"] = b

    def init_head(self, rng, n_out: int):
        w, b = _linear_init(rng, n_out, self.backbone.embedding_dim)
        wt = Tensor(w, requires_grad=True)
        return (wt, None) if self.hparams["cosine"] else (wt, Tensor(b, requires_grad=True))

    def head_scores(self, feats: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
        if self.hparams["cosine"]:
            cos = F.linear(l2_normalize(feats), l2_normalize(weight))
            return cos * self.hparams["scale"]
        return F.linear(feats, weight, bias)

    def loss_batch(self, images, labels) -> Tensor:
        feats = self.embed(images, training=True)
        scores = self.head_scores(feats, self.params["head.weight"], self.params.get("head.bias"))
        return F.softmax_cross_entropy(scores, labels)

    def train_step(self, batch, optimizer):
        names = list(self.params)
        total = {n: np.zeros_like(self.params[n].data) for n in names}
        losses = []
        for images, labels in batch:
            loss = self.loss_batch(images, labels)
            for n, g in zip(names, grad(loss, [self.params[n] for n in names])):
                total[n] += g.data
            losses.append(float(loss.data))
        grads = {n: Tensor(total[n] / len(batch), dtype=total[n].dtype) for n in names}
        self.params = optimizer.step(self.params, grads)
        return float(np.mean(losses))

    def finetune_head(self, support_feats: Tensor, support_labels, n_way: int, rng,
                      steps: int | None = None):
        """Fit a fresh N-way head on frozen support features with full-batch Adam."""
        steps = self.hparams["finetune_steps"] if steps is None else steps
        weight, bias = self.init_head(rng, n_way)
        head = {"w": weight} if bias is None else {"w": weight, "b": bias}
        opt = make_optimizer("adam", head, self.hparams["finetune_lr"])
        support_feats = Tensor(support_feats.data)
        with set_grad_enabled(True):
            for _ in range(steps):
                loss = F.softmax_cross_entropy(
                    self.head_scores(support_feats, head["w"], head.get("b")), support_labels
                )
                gs = grad(loss, list(head.values()))
                head = opt.step(head, dict(zip(head, gs)))
        return head

    def set_forward(self, episode, training=False, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        with no_grad():
            s, q = self._embed_episode(episode, training=False)
        head = self.finetune_head(s, episode.support_labels, episode.n_way, rng)
        with no_grad():
            return self.head_scores(q, head["w"], head.get("b"))


def build_model(kind: str, backbone: BackboneConfig, rng: np.random.Generator, n_way: int = 5,
                **hparams) -> FewShotModel:
    """Factory over :data:`METHOD_KINDS`. Unknown hyperparameters raise ``TypeError``."""
    if kind == "proto":
        return ProtoNet(backbone, rng, n_way, **hparams)
    if kind == "matching":
        return MatchingNet(backbone, rng, n_way, **hparams)
    if kind == "relation":
        return RelationNet(backbone, rng, n_way, **hparams)
    if kind == "maml":
        return MAML(backbone, rng, n_way, **hparams)
    if kind in ("baseline", "baseline++"):
        return Baseline(backbone, rng, n_way, cosine=(kind == "baseline++"), **hparams)
    raise ValueError(f"unknown method kind {kind!r}; expected one of {METHOD_KINDS}")



def baseline_pretrain(model: Baseline, stream, epochs: int, optimizer) -> tuple[Baseline, list[float]]:
    """Plain mini-batch classification over all training classes; returns per-epoch mean losses."""
    if stream.n_classes != model.hparams["n_classes"]:
        raise ValueError(
            f"stream has {stream.n_classes} classes but the pretraining head has {model.hparams['n_classes']}"
        )
    losses = [model.train_epoch(stream, optimizer) for _ in range(epochs)]
    return model, losses


def baseline_finetune_and_classify(model: Baseline, episode: Episode, finetune_steps: int | None = None,
                                   rng=None) -> np.ndarray:
    """Freeze the backbone, fit a fresh N-way head on the support set, return query probabilities."""
    rng = np.random.default_rng(0) if rng is None else rng
    with no_grad():
        s, q = model._embed_episode(episode, training=False)
    head = model.finetune_head(s, episode.support_labels, episode.n_way, rng, finetune_steps)
    with no_grad():
        return F.softmax(model.head_scores(q, head["w"], head.get("b")), axis=1).data
