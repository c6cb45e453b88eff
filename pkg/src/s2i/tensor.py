"""Dense arrays with tape-based reverse-mode differentiation.

Only the operations the decoder network and its losses need are provided.
Every op records a node on the output tensor; :func:`backward` walks the
recorded nodes in exact reverse execution order.
"""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import ConfigError

DEFAULT_DTYPE = np.float32

_op_counter = itertools.count()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Backward called on a non-scalar, unrecorded or already consumed graph."""


class _Node:
    __slots__ = ("seq", "parents", "backward_fn", "name")

    def __init__(self, parents, backward_fn, name):
        self.seq = next(_op_counter)
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name


class Tensor:
    """N-d array of floats with an optional gradient buffer.

    ``grad`` is allocated (zeros) iff ``requires_grad`` is set. Gradients
    accumulate across backward passes until :meth:`zero_grad`.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._node: _Node | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        if exponent != 2:
            raise NotImplementedError("only squaring is supported")
        return square(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _coerce_pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b), dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a), dtype=b.dtype)
    return as_tensor(a), as_tensor(b)


def _check_finite(out: np.ndarray, name: str) -> None:
    if not np.isfinite(out).all():
        raise FloatingPointError(f"{name} produced non-finite values")


def _make(out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    _check_finite(out, name)
    t = Tensor(out, dtype=out.dtype)
    if any(p.requires_grad or p._node is not None for p in parents):
        t._node = _Node(tuple(parents), backward_fn, name)
    return t


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t._node is not None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw, "div")


def square(a: Tensor) -> Tensor:
    out = a.data * a.data
    return _make(out, (a,), lambda g: (2.0 * a.data * g,), "square")


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    mask = a.data > 0
    out = np.where(mask, a.data, 0).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def dropout(a: Tensor, p: float, training: bool, seed: int) -> Tensor:
    """Inverted dropout. The mask is a pure function of ``seed``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    rng = np.random.default_rng(seed)
    keep = rng.random(a.shape) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=a.dtype)
    mask = keep.astype(a.dtype) * scale
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------- reductions

def tsum(a: Tensor, axis=None) -> Tensor:
    # accumulate in double, then return to the operand dtype
    out = np.asarray(a.data.sum(axis=axis, dtype=np.float64), dtype=a.dtype)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = np.asarray(a.data.mean(axis=axis, dtype=np.float64), dtype=a.dtype)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, a.shape) / n).astype(a.dtype),)

    return _make(out, (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


# ---------------------------------------------------------------- dense

def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` for x of shape (B, N), weight (N, M)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"dense expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"dense inner dimension mismatch: input axis 1 is {x.shape[1]}, weight axis 0 is {weight.shape[0]}")
    out = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"dense bias must have shape ({weight.shape[1]},), got {bias.shape}")
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        grads = [g @ weight.data.T if _tracks(x) else None,
                 x.data.T @ g if _tracks(weight) else None]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, bw, "dense")


# ---------------------------------------------------------------- convolution

def _check_4d(name, **tensors):
    for label, t in tensors.items():
        if t.ndim != 4:
            raise DimensionError(f"{name}: {label} must be 4-d, got shape {t.shape}")


def _corr_windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _corr(x: np.ndarray, k: np.ndarray, stride: int, padding: int):
    """Cross-correlate x (B,C,H,W) with k (O,C,kh,kw); returns (out, windows)."""
    win = _corr_windows(x, k.shape[2], k.shape[3], stride, padding)
    out = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), win


def _corr_adjoint(g: np.ndarray, k: np.ndarray, stride: int, padding: int, out_hw) -> np.ndarray:
    """Adjoint of :func:`_corr` w.r.t. its input: scatter g (B,O,H',W') back to (B,C,H,W)."""
    B, O, Ho, Wo = g.shape
    C, kh, kw = k.shape[1:]
    H, W = out_hw
    Hp, Wp = H + 2 * padding, W + 2 * padding
    cols = np.tensordot(g, k, axes=([1], [0]))  # B,Ho,Wo,C,kh,kw
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # B,C,kh,kw,Ho,Wo
    dx = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
    hspan = stride * (Ho - 1) + 1
    wspan = stride * (Wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + hspan:stride, j:j + wspan:stride] += cols[:, :, i, j]
    if padding:
        dx = dx[:, :, padding:Hp - padding, padding:Wp - padding]
    return np.ascontiguousarray(dx)


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv_transpose_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n - 1) * stride - 2 * padding + k


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding.

    x is (B, Cin, H, W) and kernels (Cout, Cin, kh, kw); the output is
    (B, Cout, floor((H + 2p - kh) / stride) + 1, ...).
    """
    _check_4d("conv2d", input=x, kernels=kernels)
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    if x.shape[1] != kernels.shape[1]:
        raise DimensionError(
            f"conv2d: channel axis mismatch, input has {x.shape[1]}, kernels expect {kernels.shape[1]}")
    kh, kw = kernels.shape[2:]
    H, W = x.shape[2:]
    if kh > H + 2 * padding:
        raise DimensionError(f"conv2d: kernel height {kh} exceeds padded input height {H + 2 * padding}")
    if kw > W + 2 * padding:
        raise DimensionError(f"conv2d: kernel width {kw} exceeds padded input width {W + 2 * padding}")
    out, win = _corr(x.data, kernels.data, stride, padding)

    def bw(g):
        gx = _corr_adjoint(g, kernels.data, stride, padding, (H, W)) if _tracks(x) else None
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])) if _tracks(kernels) else None
        return gx, gk

    return _make(out, (x, kernels), bw, "conv2d")


def conv_transpose2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d`.

    x is (B, Cin, H, W) and kernels (Cin, Cout, kh, kw); output height is
    (H - 1) * stride - 2 * padding + kh.
    """
    _check_4d("conv_transpose2d", input=x, kernels=kernels)
    if stride < 1:
        raise DimensionError(f"conv_transpose2d: stride must be >= 1, got {stride}")
    if x.shape[1] != kernels.shape[0]:
        raise DimensionError(
            f"conv_transpose2d: channel axis mismatch, input has {x.shape[1]}, kernels expect {kernels.shape[0]}")
    kh, kw = kernels.shape[2:]
    Ho = conv_transpose_output_size(x.shape[2], kh, stride, padding)
    Wo = conv_transpose_output_size(x.shape[3], kw, stride, padding)
    if Ho < 1:
        raise DimensionError(f"conv_transpose2d: output height {Ho} is not positive")
    if Wo < 1:
        raise DimensionError(f"conv_transpose2d: output width {Wo} is not positive")
    out = _corr_adjoint(x.data, kernels.data, stride, padding, (Ho, Wo))

    def bw(g):
        win = _corr_windows(g, kh, kw, stride, padding)
        gx = None
        if _tracks(x):
            gx = np.ascontiguousarray(
                np.tensordot(win, kernels.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2))
        gk = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3])) if _tracks(kernels) else None
        return gx, gk

    return _make(out, (x, kernels), bw, "conv_transpose2d")


def maxpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """k x k max pooling. Ties route the gradient to the first element in row-major order."""
    _check_4d("maxpool2d", input=x)
    stride = k if stride is None else stride
    H, W = x.shape[2:]
    if k > H:
        raise DimensionError(f"maxpool2d: window {k} larger than input height {H}")
    if k > W:
        raise DimensionError(f"maxpool2d: window {k} larger than input width {W}")
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    B, C, Ho, Wo = win.shape[:4]
    flat = win.reshape(B, C, Ho, Wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dx = np.zeros_like(x.data)
        hspan = stride * (Ho - 1) + 1
        wspan = stride * (Wo - 1) + 1
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + hspan:stride, j:j + wspan:stride] += g * (arg == i * k + j)
        return (dx,)

    return _make(np.ascontiguousarray(out), (x,), bw, "maxpool2d")


# ---------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    A graph can be consumed once; a second call raises :class:`GraphError`.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward call; re-run the forward pass")
    if loss._node is None:
        raise GraphError("loss was not produced by a recorded graph")

    # collect every recorded tensor, then replay in reverse execution order
    tensors: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._node is None or t._node.seq in tensors:
            continue
        tensors[t._node.seq] = t
        stack.extend(t._node.parents)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for seq in sorted(tensors, reverse=True):
        t = tensors[seq]
        g = grads.pop(id(t), None)
        node = t._node
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not _tracks(p):
                continue
            if p._node is None:
                p.grad += pg.astype(p.dtype, copy=False)
            elif id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    for t in tensors.values():
        t._consumed = True
        t._node = None
