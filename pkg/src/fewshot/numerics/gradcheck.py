"""Central finite differences and the gradient-oracle suite behind ``fewshot gradcheck``."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .tensor import Tensor, concat, grad, precision, stack


def finite_diff_grad(
    f: Callable[[Sequence[np.ndarray]], float],
    params: Sequence[np.ndarray],
    epsilon: float = 1e-6,
) -> list[np.ndarray]:
    """Central-difference gradient of a scalar function of several arrays."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    arrays = [np.array(p, dtype=np.float64) for p in params]
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = float(f(arrays))
            flat[i] = orig - epsilon
            lo = float(f(arrays))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * epsilon)
        grads.append(g)
    return grads


def relative_error(analytic, numeric) -> float:
    """Largest absolute deviation, scaled by the largest reference magnitude."""
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    scale = max(np.abs(n).max(initial=0.0), np.abs(a).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def check_gradient(
    build: Callable[[list[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    epsilon: float = 1e-6,
) -> float:
    """Compare backward against finite differences for ``build``; return the relative error.

    ``build`` maps a list of tensors to a scalar tensor. Runs in 64-bit.
    """
    with precision(np.float64):
        def value(xs):
            return build([Tensor(x) for x in xs]).item()

        leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        analytic = [g.data for g in grad(build(leaves), leaves)]
        numeric = finite_diff_grad(value, arrays, epsilon)
    return relative_error(analytic, numeric)


@dataclass
class CheckResult:
    name: str
    worst_error: float
    seeds: int
    passed: bool


def _cases():
    """Named (builder, array-factory) pairs covering every differentiable primitive."""

    def weights(rng, *shape):
        return rng.standard_normal(shape)

    yield "matmul", (lambda t: (t[0] @ t[1]).sum()), lambda r: [weights(r, 5, 4), weights(r, 4, 3)]
    yield "conv2d", (lambda t: (F.conv2d(t[0], t[1], padding=1) ** 2).sum()), \
        lambda r: [weights(r, 2, 3, 8, 8), weights(r, 2, 3, 3, 3)]
    yield "conv2d_stride2", (lambda t: (F.conv2d(t[0], t[1], stride=2) ** 2).sum()), \
        lambda r: [weights(r, 1, 2, 7, 7), weights(r, 3, 2, 3, 3)]
    yield "relu", (lambda t: (F.relu(t[0]) * t[1]).sum()), lambda r: [weights(r, 4, 5), weights(r, 4, 5)]
    yield "max_pool2d", (lambda t: (F.max_pool2d(t[0]) * t[1]).sum()), \
        lambda r: [weights(r, 2, 2, 6, 6), weights(r, 2, 2, 3, 3)]
    yield "batch_norm", (lambda t: (F.batch_norm(t[0], t[1], t[2]) * t[3]).sum()), \
        lambda r: [weights(r, 4, 3, 3, 3), weights(r, 3), weights(r, 3), weights(r, 4, 3, 3, 3)]
    yield "softmax_cross_entropy", (lambda t: F.softmax_cross_entropy(t[0], [0, 3, 1, 4])), \
        lambda r: [weights(r, 4, 5)]
    yield "mse", (lambda t: F.mse(t[0], t[1])), lambda r: [weights(r, 3, 4), weights(r, 3, 4)]
    yield "bce_with_logits", (lambda t: F.bce_with_logits(t[0], Tensor(np.linspace(0, 1, 12).reshape(3, 4)))), \
        lambda r: [3 * weights(r, 3, 4)]
    yield "exp_log_div", (lambda t: (t[0].exp() / (t[1] * t[1] + 1.0)).log().sum()), \
        lambda r: [weights(r, 6), weights(r, 6)]
    yield "sigmoid", (lambda t: (t[0].sigmoid() * t[1]).sum()), lambda r: [weights(r, 7), weights(r, 7)]
    yield "leaky_relu", (lambda t: (F.leaky_relu(t[0]) * t[1]).sum()), lambda r: [weights(r, 4, 5), weights(r, 4, 5)]
    yield "linear", (lambda t: (F.linear(t[0], t[1], t[2]) ** 2).sum()), \
        lambda r: [weights(r, 3, 4), weights(r, 2, 4), weights(r, 2)]
    yield "softmax", (lambda t: (F.softmax(t[0], axis=1) * t[1]).sum()), lambda r: [weights(r, 3, 5), weights(r, 3, 5)]
    yield "log_softmax", (lambda t: (F.log_softmax(t[0], axis=0) * t[1]).sum()), \
        lambda r: [weights(r, 4, 3), weights(r, 4, 3)]
    yield "flatten_transpose", (lambda t: (F.flatten(t[0]).T @ t[1]).sum() ** 2), \
        lambda r: [weights(r, 2, 2, 3), weights(r, 2, 3)]
    yield "mean_pow_sub", (lambda t: ((t[0] - t[1].mean(axis=0, keepdims=True)) ** 3).mean()), \
        lambda r: [weights(r, 3, 4), weights(r, 5, 4)]
    yield "getitem", (lambda t: (t[0][:, 1:3] * t[0][np.array([0, 2, 2])][:, :2]).sum()), \
        lambda r: [weights(r, 3, 4)]
    yield "concat_stack", (lambda t: (concat([t[0], t[1]], axis=1) * stack([t[1], t[0]], axis=1).reshape(2, 6)).sum()), \
        lambda r: [weights(r, 2, 3), weights(r, 2, 3)]
    yield "batch_norm_eval", (lambda t: (F.batch_norm(t[0], t[1], t[2], {"mean": np.full(3, 0.2), "var": np.full(3, 1.5)},
                                                      training=False) * t[0]).sum()), \
        lambda r: [weights(r, 2, 3, 2, 2), weights(r, 3), weights(r, 3)]


def run_gradcheck_suite(seeds: int = 20, tolerance: float = 1e-4) -> list[CheckResult]:
    results = []
    for name, build, make in _cases():
        worst = 0.0
        for seed in range(seeds):
            arrays = make(np.random.default_rng(seed))
            worst = max(worst, check_gradient(build, arrays))
        results.append(CheckResult(name, worst, seeds, worst < tolerance))
    return results


def main(seeds: int = 20) -> int:
    start = time.perf_counter()
    results = run_gradcheck_suite(seeds)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<24} max rel err {r.worst_error:.2e} over {r.seeds} seeds")
    print(f"gradcheck finished in {time.perf_counter() - start:.1f}s")
    return 0 if all(r.passed for r in results) else 4
