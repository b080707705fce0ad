"""Dense tensors recorded on a reverse-mode differentiation graph.

Each operation stores its inputs and a backward closure that is itself written
with Tensor operations. Running the backward pass with ``create_graph=True``
therefore records the gradient computation too, which is what makes
gradients-of-gradients (MAML's outer gradient) possible.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its documented preconditions."""


class TapeConsumedError(RuntimeError):
    """Backward was requested through a graph that has already been freed."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextmanager
def set_grad_enabled(mode: bool):
    prev = is_grad_enabled()
    _state.grad_enabled = bool(mode)
    try:
        yield
    finally:
        _state.grad_enabled = prev


def no_grad():
    return set_grad_enabled(False)


@contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


Backward = Callable[["Tensor"], Sequence["Tensor | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_released", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or get_default_dtype())
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None
        self._released = False

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], backward: Backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        out._released = False
        return out

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype), dtype=self.data.dtype)

    # -- introspection --------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._released

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4, threshold=8)}{flag})"

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)


def _raise_item(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# -- broadcasting -------------------------------------------------------------
def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce ``x`` by summation until it has ``shape`` (inverse of broadcasting)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    src_shape = x.shape
    return Tensor._make(data, (x,), lambda g: (broadcast_to(g, src_shape),))


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src_shape = x.shape
    data = np.broadcast_to(x.data, shape)
    return Tensor._make(data, (x,), lambda g: (sum_to(g, src_shape),))


# -- elementwise --------------------------------------------------------------
def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return (sum_to(g, a.shape) if a.requires_grad else None,
                sum_to(g, b.shape) if b.requires_grad else None)
    return Tensor._make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return (sum_to(g, a.shape) if a.requires_grad else None,
                sum_to(neg(g), b.shape) if b.requires_grad else None)
    return Tensor._make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return (sum_to(g * b, a.shape) if a.requires_grad else None,
                sum_to(g * a, b.shape) if b.requires_grad else None)
    return Tensor._make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        ga = sum_to(g / b, a.shape) if a.requires_grad else None
        gb = sum_to(neg(g * a) / (b * b), b.shape) if b.requires_grad else None
        return ga, gb
    return Tensor._make(a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (neg(g),))


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    if exponent == 1.0:
        return a

    def backward(g):
        if exponent == 2.0:
            return (g * a * 2.0,)
        return (g * power(a, exponent - 1.0) * exponent,)
    return Tensor._make(a.data ** exponent, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = Tensor._make(np.exp(a.data), (a,), lambda g: (g * out,))
    return out


def log(a: Tensor) -> Tensor:
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a,))


def sigmoid(a: Tensor) -> Tensor:
    data = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = Tensor._make(data.astype(a.dtype, copy=False), (a,), lambda g: (g * out * (1.0 - out),))
    return out


# -- linear algebra -----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = sum_to(matmul(g, swap_last(b)), a.shape) if a.requires_grad else None
        gb = sum_to(matmul(swap_last(a), g), b.shape) if b.requires_grad else None
        return ga, gb
    return Tensor._make(np.matmul(a.data, b.data), (a, b), backward)


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


# -- reductions and shape -----------------------------------------------------
def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
    src_shape = a.shape

    def backward(g):
        return (broadcast_to(reshape(g, kept), src_shape),)
    return Tensor._make(np.asarray(data), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    src_shape = a.shape
    data = a.data.reshape(shape)
    return Tensor._make(data, (a,), lambda g: (reshape(g, src_shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (transpose(g, inverse),))


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, slice)) for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    src_shape = a.shape
    return Tensor._make(np.asarray(a.data[index]), (a,), lambda g: (scatter(g, index, src_shape),))


def scatter(g: Tensor, index, shape) -> Tensor:
    """Adjoint of ``getitem``: place ``g`` into zeros of ``shape`` at ``index`` (summing repeats)."""
    data = np.zeros(shape, dtype=g.dtype)
    if _is_basic(index):
        data[index] = g.data
    else:
        np.add.at(data, index, g.data)
    return Tensor._make(data, (g,), lambda gg: (getitem(gg, index),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise DimensionError(f"concat shape mismatch: {ref.shape} vs {t.shape} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                out.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)
    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


# -- patch extraction (convolution support) ------------------------------------
def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0:
        return 0
    return span // stride + 1


def unfold(x: Tensor, kh: int, kw: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Extract sliding patches: B×C×H×W -> B×(C·kh·kw)×(H'·W')."""
    B, C, H, W = x.shape
    Ho, Wo = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
    if Ho <= 0 or Wo <= 0:
        raise DimensionError(
            f"kernel {kh}x{kw} with padding {padding} does not fit input {H}x{W}"
        )
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * kh * kw, Ho * Wo)
    geometry = (x.shape, kh, kw, stride, padding)
    return Tensor._make(np.ascontiguousarray(cols), (x,), lambda g: (fold(g, *geometry),))


def fold(cols: Tensor, shape, kh: int, kw: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of ``unfold``: scatter-add patches back onto a B×C×H×W canvas."""
    B, C, H, W = shape
    Ho, Wo = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
    c = cols.data.reshape(B, C, kh, kw, Ho, Wo)
    out = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += c[:, :, i, j]
    if padding:
        out = out[:, :, padding : padding + H, padding : padding + W]
    return Tensor._make(
        np.ascontiguousarray(out), (cols,), lambda g: (unfold(g, kh, kw, stride, padding),)
    )


# -- differentiation ----------------------------------------------------------
def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._released:
            raise TapeConsumedError(
                "graph was already freed by a previous backward; "
                "pass create_graph=True (or retain_graph=True) to backpropagate twice"
            )
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _release(order: Iterable[Tensor]) -> None:
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._released = True


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    create_graph: bool = False,
    retain_graph: bool | None = None,
) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each of ``inputs``.

    With ``create_graph`` the returned gradients are themselves recorded and can
    be differentiated again. Otherwise the graph is freed after the pass and a
    second backward through it raises :class:`TapeConsumedError`.
    """
    if output.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {output.shape}")
    if not output.requires_grad:
        raise ContractError("loss is not recorded on a differentiation graph")
    if retain_graph is None:
        retain_graph = create_graph
    order = _topological(output)
    wanted = {id(t) for t in inputs}
    found: dict[int, Tensor] = {}
    pending: dict[int, Tensor] = {id(output): Tensor(np.ones(output.shape, dtype=output.dtype),
                                                     dtype=output.dtype)}
    with set_grad_enabled(create_graph):
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                found[id(node)] = g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg
    if not retain_graph:
        _release(order)
    out = []
    for t in inputs:
        g = found.get(id(t))
        out.append(g if g is not None else Tensor(np.zeros(t.shape, dtype=t.dtype), dtype=t.dtype))
    return out


def backward(loss: Tensor, create_graph: bool = False) -> dict[Tensor, Tensor]:
    """Gradients of ``loss`` for every leaf tensor that requires them."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not recorded on a differentiation graph")
    leaves = [n for n in _topological(loss) if n._backward is None]
    grads = grad(loss, leaves, create_graph=create_graph)
    return dict(zip(leaves, grads))


# -- masked and pooled primitives ---------------------------------------------
def masked(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant boolean mask (ReLU-style gating)."""
    return Tensor._make(x.data * mask, (x,), lambda g: (masked(g, mask),))


def max_pool(x: Tensor, size: int) -> Tensor:
    """Non-overlapping max pooling; ties resolve to the first window position."""
    B, C, H, W = x.shape
    Ho, Wo = H // size, W // size
    if Ho == 0 or Wo == 0:
        raise DimensionError(f"max pooling of size {size} does not fit input {x.shape}")
    v = x.data[:, :, : Ho * size, : Wo * size].reshape(B, C, Ho, size, Wo, size)
    offsets = [(i, j) for i in range(size) for j in range(size)]
    out = v[:, :, :, 0, :, 0].copy()
    for i, j in offsets[1:]:
        np.maximum(out, v[:, :, :, i, :, j], out=out)
    mask = np.zeros(v.shape, dtype=bool)
    taken = np.zeros(out.shape, dtype=bool)
    for i, j in offsets:
        hit = v[:, :, :, i, :, j] == out
        hit &= ~taken
        mask[:, :, :, i, :, j] = hit
        taken |= hit
    return Tensor._make(out, (x,), lambda g: (_unpool(g, mask, x.shape),))


def _unpool(g: Tensor, mask: np.ndarray, shape) -> Tensor:
    B, C, Ho, s, Wo, _ = mask.shape
    full = np.zeros(shape, dtype=g.dtype)
    view = full[:, :, : Ho * s, : Wo * s].reshape(B, C, Ho, s, Wo, s) if full.flags.c_contiguous and \
        shape[2] == Ho * s and shape[3] == Wo * s else None
    for i in range(s):
        for j in range(s):
            part = g.data * mask[:, :, :, i, :, j]
            if view is not None:
                view[:, :, :, i, :, j] = part
            else:
                full[:, :, i : Ho * s : s, j : Wo * s : s] = part
    return Tensor._make(full, (g,), lambda gg: (_pool_select(gg, mask),))


def _pool_select(g: Tensor, mask: np.ndarray) -> Tensor:
    B, C, Ho, s, Wo, _ = mask.shape
    shape = g.shape
    out = np.zeros((B, C, Ho, Wo), dtype=g.dtype)
    for i in range(s):
        for j in range(s):
            out += g.data[:, :, i : Ho * s : s, j : Wo * s : s] * mask[:, :, :, i, :, j]
    return Tensor._make(out, (g,), lambda gg: (_unpool(gg, mask, shape),))
