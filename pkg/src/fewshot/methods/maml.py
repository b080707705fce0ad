"""Model-agnostic inner/outer loops over functional parameter dicts.

Both functions take a loss closure ``loss_fn(params) -> scalar Tensor`` so the
same code drives the classification MAML and YOLOMAML.
"""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from ..numerics.optim import sgd_step
from ..numerics.tensor import Tensor, grad

LossFn = Callable[[Mapping[str, Tensor]], Tensor]


def maml_adapt(
    loss_fn: LossFn,
    params: Mapping[str, Tensor],
    inner_lr: float,
    n_updates: int,
    track_higher_order: bool = True,
) -> dict[str, Tensor]:
    """Run ``n_updates`` plain gradient steps on ``loss_fn`` and return the fast weights.

    The input dict is never mutated. With ``track_higher_order`` the inner
    gradients are themselves recorded, so the fast weights are a twice
    differentiable function of ``params``. Without it the inner gradients are
    constants and d(fast)/d(params) is the identity (first-order MAML).
    """
    if n_updates < 0:
        raise ValueError("n_updates must be >= 0")
    fast = dict(params)
    names = [n for n, p in fast.items() if p.requires_grad]
    for _ in range(n_updates):
        loss = loss_fn(fast)
        # retain_graph keeps earlier fast-weight nodes alive for the outer backward
        grads = grad(loss, [fast[n] for n in names], create_graph=track_higher_order, retain_graph=True)
        fast = {**fast, **sgd_step({n: fast[n] for n in names}, dict(zip(names, grads)), inner_lr)}
    return fast


def maml_meta_gradient(
    support_loss: Callable[[Mapping[str, Tensor], object], Tensor],
    query_loss: Callable[[Mapping[str, Tensor], object], Tensor],
    params: Mapping[str, Tensor],
    episodes: Sequence,
    inner_lr: float,
    n_updates: int,
    first_order: bool = False,
    reduce: str = "mean",
) -> tuple[dict[str, np.ndarray], list[float]]:
    """Outer gradient of the query loss after adaptation, combined over ``episodes``.

    Episodes are differentiated one at a time so only one adaptation graph is
    alive at once; the result equals the gradient of the combined loss.
    Returns the gradient arrays keyed like ``params`` and the per-episode query losses.
    """
    if not episodes:
        raise ValueError("meta step needs at least one episode")
    if reduce not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduce!r}")
    names = [n for n, p in params.items() if p.requires_grad]
    total = {n: np.zeros_like(params[n].data) for n in names}
    losses = []
    for ep in episodes:
        fast = maml_adapt(lambda p: support_loss(p, ep), params, inner_lr, n_updates, not first_order)
        loss = query_loss(fast, ep)
        gs = grad(loss, [params[n] for n in names])
        for n, g in zip(names, gs):
            total[n] += g.data
        losses.append(float(loss.data))
    if reduce == "mean":
        for n in names:
            total[n] /= len(episodes)
    return total, losses


def maml_meta_step(
    support_loss,
    query_loss,
    params: Mapping[str, Tensor],
    episodes: Sequence,
    inner_lr: float,
    n_updates: int,
    outer_optimizer,
    first_order: bool = False,
    reduce: str = "mean",
) -> tuple[dict[str, Tensor], float]:
    """One outer update; returns the new parameters and the mean query loss."""
    grads, losses = maml_meta_gradient(
        support_loss, query_loss, params, episodes, inner_lr, n_updates, first_order, reduce
    )
    new = outer_optimizer.step(dict(params), {n: Tensor(g, dtype=g.dtype) for n, g in grads.items()})
    return new, float(np.mean(losses))
