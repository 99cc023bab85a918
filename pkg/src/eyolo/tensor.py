"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the detector graph needs are provided: 3x3/1x1
convolution, leaky-ReLU and sigmoid, nearest 2x upsampling, channel
concat/add, plus the elementwise and reduction ops the loss and the grid
decoder are built from.

Every op result remembers its parents and a closure mapping the output
gradient to parent gradients. ``backward`` walks that record once and then
drops it, so a second call on the same graph raises ``GraphStateError``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

LEAKY_SLOPE = 0.1


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced (or was handed) NaN or Inf values."""


class GraphStateError(RuntimeError):
    """The recorded graph was already consumed by a backward pass."""


def _check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        bad = int(arr.size - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{where}: {bad} non-finite value(s)")
    return arr


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode AD."""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None,
        _op: str = "leaf",
    ):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=np.float64)
        self.data = _check_finite(arr, _op)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._consumed = False

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{rg})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> "Tensor":
        return mul(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __getitem__(self, idx) -> "Tensor":
        return getitem(self, idx)

    def sum(self) -> "Tensor":
        return tsum(self)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes)

    # -- differentiation ----------------------------------------------------

    def backward(self) -> None:
        backward(self)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(
    data: np.ndarray,
    parents: Tuple[Tensor, ...],
    backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]],
    op: str,
) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, _op=op)
    return Tensor(data, _op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic ---------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), _bw, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(out, (a, b), _bw, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), _bw, "mul")


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    out = a.data**p

    def _bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _result(out, (a,), _bw, "pow")


def tsum(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum())

    def _bw(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), _bw, "sum")


# -- shape manipulation -------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc

    def _bw(g):
        return (g.reshape(a.shape),)

    return _result(out, (a,), _bw, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def _bw(g):
        return (g.transpose(inverse),)

    return _result(out, (a,), _bw, "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    a = as_tensor(a)
    out = np.array(a.data[idx])

    basic = all(isinstance(k, (slice, int, type(Ellipsis))) for k in (idx if isinstance(idx, tuple) else (idx,)))

    def _bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(out, (a,), _bw, "getitem")


# -- activations --------------------------------------------------------------


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)

    def _bw(g):
        return (np.where(pos, g, slope * g),)

    return _result(out, (a,), _bw, "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)

    def _bw(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), _bw, "sigmoid")


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation {kind!r}")


# -- network ops --------------------------------------------------------------


@dataclass
class ConvParams:
    """Weights and geometry for one convolution layer."""

    weight: Tensor  # (out_ch, in_ch, kh, kw)
    bias: Tensor  # (out_ch,)
    stride: int = 1
    padding: Optional[int] = None

    def __post_init__(self):
        self.weight = as_tensor(self.weight)
        self.bias = as_tensor(self.bias)
        if self.weight.ndim != 4:
            raise DimensionError(f"conv kernel must be rank 4, got shape {self.weight.shape}")
        out_ch, _, kh, kw = self.weight.shape
        if kh != kw or kh not in (1, 3):
            raise DimensionError(f"kernel must be 1x1 or 3x3, got {kh}x{kw}")
        if self.stride not in (1, 2):
            raise DimensionError(f"stride must be 1 or 2, got {self.stride}")
        if self.stride == 2 and kh != 3:
            raise DimensionError("stride 2 is only used with 3x3 kernels")
        if self.bias.shape != (out_ch,):
            raise DimensionError(f"bias shape {self.bias.shape} does not match {out_ch} output channels")
        if self.padding is None:
            self.padding = kh // 2

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Zero-padded 2D cross-correlation over an NCHW tensor.

    The kernel is applied as kh*kw shifted matrix products in NHWC layout,
    which keeps memory at one padded copy of the input instead of a full
    im2col buffer.
    """
    x = as_tensor(x)
    w, b, s, p = params.weight, params.bias, params.stride, params.padding
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects a rank-4 input, got shape {x.shape}")
    bsz, cin, height, width = x.shape
    cout, wcin, kh, kw = w.shape
    if cin != wcin:
        raise DimensionError(f"conv2d: input shape {x.shape} has {cin} channels, kernel shape {w.shape} expects {wcin}")
    if height % s or width % s:
        raise DimensionError(f"conv2d: spatial dims {(height, width)} not divisible by stride {s}")
    ho, wo = (height + 2 * p - kh) // s + 1, (width + 2 * p - kw) // s + 1

    xh = np.ascontiguousarray(np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))).transpose(0, 2, 3, 1))
    wd = w.data
    rows = bsz * ho * wo

    def patch(i, j):
        return np.ascontiguousarray(xh[:, i : i + s * ho : s, j : j + s * wo : s, :]).reshape(rows, cin)

    # (kh, kw, cin, cout): contiguous per-tap matrices keep matmul on the BLAS path
    w_taps = np.ascontiguousarray(wd.transpose(2, 3, 1, 0))
    out = np.zeros((rows, cout))
    for i in range(kh):
        for j in range(kw):
            out += patch(i, j) @ w_taps[i, j]
    out += b.data
    out_nchw = np.ascontiguousarray(out.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2))

    def _bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(rows, cout)
        gw = np.zeros_like(wd) if w.requires_grad else None
        gx = np.zeros_like(xh) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                if gw is not None:
                    gw[:, :, i, j] = g2.T @ patch(i, j)
                if gx is not None:
                    gx[:, i : i + s * ho : s, j : j + s * wo : s, :] += (g2 @ w_taps[i, j].T).reshape(bsz, ho, wo, cin)
        if gx is not None:
            gx = np.ascontiguousarray(gx[:, p : p + height, p : p + width, :].transpose(0, 3, 1, 2))
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _result(out_nchw, (x, w, b), _bw, "conv2d")


def upsample_nearest_2x(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"upsample expects a rank-4 input, got shape {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    bsz, ch, height, width = x.shape

    def _bw(g):
        return (g.reshape(bsz, ch, height, 2, width, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), _bw, "upsample")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"concat: shapes {a.shape} and {b.shape} differ outside the channel axis")
    out = np.concatenate([a.data, b.data], axis=1)
    ca = a.shape[1]

    def _bw(g):
        return g[:, :ca], g[:, ca:]

    return _result(out, (a, b), _bw, "concat")


def merge(a: Tensor, b: Tensor, mode: str = "concat_channels") -> Tensor:
    """Join two feature maps: channel concat (``a`` first) or residual add."""
    if mode == "concat_channels":
        return concat_channels(a, b)
    if mode == "add":
        a, b = as_tensor(a), as_tensor(b)
        if a.shape != b.shape:
            raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
        return add(a, b)
    raise ValueError(f"unknown merge mode {mode!r}")


def split_channels(x: Tensor, at: int) -> Tuple[Tensor, Tensor]:
    x = as_tensor(x)
    return getitem(x, (slice(None), slice(0, at))), getitem(x, (slice(None), slice(at, None)))


# -- reverse pass -------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``."""
    if loss._consumed:
        raise GraphStateError("backward() already ran on this graph")
    if loss.size != 1:
        raise DimensionError(f"backward needs a single-element loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphStateError("loss does not depend on any tensor that requires grad")

    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._consumed:
            raise GraphStateError(f"graph node {node._op} was consumed by an earlier backward()")
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg

    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True
    loss._consumed = True


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
