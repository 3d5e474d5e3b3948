"""Dense tensors with reverse-mode automatic differentiation.

Every op takes :class:`Tensor` inputs, computes its value eagerly with numpy
and, when any input requires a gradient, records a closure that maps the
output gradient to input gradients.  :meth:`Tensor.backward` walks the
recorded graph in reverse topological order and accumulates gradients into
:class:`Parameter` leaves.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Parameter", "ShapeError", "default_dtype", "get_default_dtype",
    "set_default_dtype", "no_grad", "record_branches", "topological_order", "backward",
    "add", "sub", "mul", "scale", "relu", "sigmoid", "maximum", "concat",
    "conv2d", "softmax", "instance_norm", "upsample2x", "matmul", "einsum",
    "take", "reshape", "transpose", "tsum", "mean", "cast",
    "bce_with_logits",
]

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_BRANCH_LOG: list | None = None


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the precision used for new tensors and parameters."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording the graph."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


@contextlib.contextmanager
def record_branches() -> Iterator[list]:
    """Collect the branch pattern of every piecewise op (relu, maximum) evaluated.

    Two evaluations with equal logs lie on the same smooth piece of the graph.
    """
    global _BRANCH_LOG
    previous = _BRANCH_LOG
    _BRANCH_LOG = []
    try:
        yield _BRANCH_LOG
    finally:
        _BRANCH_LOG = previous


def _log_branch(pattern: np.ndarray) -> None:
    if _BRANCH_LOG is not None:
        _BRANCH_LOG.append(pattern.tobytes())


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of 4")
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __mul__(self, other): return mul(self, other)
    def __matmul__(self, other): return matmul(self, other)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A named leaf tensor with a gradient slot of the same shape."""

    __slots__ = ("name", "grad")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=_DEFAULT_DTYPE), requires_grad=True, op="param")
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), fn, op)
    return Tensor(data, op=op)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``param.grad`` for every reachable parameter."""
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _same_shape(op: str, *ts: Tensor) -> None:
    first = ts[0].shape
    for t in ts[1:]:
        if t.shape != first:
            shapes = ", ".join(str(t.shape) for t in ts)
            raise ShapeError(f"{op}: operands must have identical shapes, got {shapes}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    factor = x.data.dtype.type(factor)
    return _result(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_branch(mask)
    return _result(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                   lambda g: (g * mask,), "relu")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def maximum(*ts: Tensor) -> Tensor:
    """Elementwise maximum of k same-shaped tensors; ties route the gradient to the first."""
    if not ts:
        raise ShapeError("maximum: needs at least one operand")
    _same_shape("maximum", *ts)
    stacked = np.stack([t.data for t in ts])
    winner = np.argmax(stacked, axis=0)
    _log_branch(winner)
    out = np.take_along_axis(stacked, winner[None], axis=0)[0]

    def fn(g):
        return tuple(g * (winner == i) for i in range(len(ts)))

    return _result(out, ts, fn, "maximum")


def concat(ts: Sequence[Tensor], axis: int = 1) -> Tensor:
    ts = tuple(ts)
    ref = ts[0].shape
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
                a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            shapes = ", ".join(str(t.shape) for t in ts)
            raise ShapeError(f"concat: shapes must agree off axis {axis}, got {shapes}")
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def fn(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, fn, "concat")


def cast(x: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    source = x.dtype
    if dtype == source:
        return x
    return _result(x.data.astype(dtype), (x,), lambda g: (g.astype(source),), "cast")


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    source = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(source),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inverse),), "transpose")


def take(x: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis`` (an embedding lookup when axis=0)."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim

    def fn(g):
        gx = np.zeros_like(x.data)
        # move gathered axes to the front so add.at scatters along one axis
        moved_g = np.moveaxis(g, list(range(axis, axis + indices.ndim)),
                              list(range(indices.ndim)))
        moved_x = np.moveaxis(gx, axis, 0)
        np.add.at(moved_x, indices, moved_g)
        return (gx,)

    return _result(np.take(x.data, indices, axis=axis), (x,), fn, "take")


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _result(x.data.mean(), (x,),
                   lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


# ---------------------------------------------------------------- linear algebra

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), fn, "matmul")


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum; every input index must appear in the output or the other operand."""
    lhs, out = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if len(set(s)) != len(s) or any(c not in out and c not in other for c in s):
            raise ShapeError(f"einsum: unsupported subscripts {subscripts!r}")

    def fn(g):
        ga = np.einsum(f"{out},{sb}->{sa}", g, b.data, optimize=True)
        gb = np.einsum(f"{out},{sa}->{sb}", g, a.data, optimize=True)
        return ga, gb

    try:
        data = np.einsum(subscripts, a.data, b.data, optimize=True)
    except ValueError as exc:
        raise ShapeError(f"einsum {subscripts!r}: {a.shape}, {b.shape}: {exc}") from None
    return _result(data, (a, b), fn, "einsum")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a [B,Cin,H,W] input with a [Cout,Cin,kh,kw] kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = weight.shape
    if C != Ck:
        raise ShapeError(f"conv2d: input has {C} channels but kernel expects {Ck} "
                         f"(input {x.shape}, kernel {weight.shape})")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {O} output channels")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape}")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    w = weight.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        flat = xs.reshape(B, C, Ho * Wo)
        w2 = w[:, :, 0, 0]
        out = np.matmul(w2, flat).reshape(B, O, Ho, Wo)
        if bias is not None:
            out += bias.data[None, :, None, None]

        def fn(g):
            gf = g.reshape(B, O, Ho * Wo)
            gw = np.einsum("bop,bcp->oc", gf, flat, optimize=True)[:, :, None, None]
            gxs = np.matmul(w2.T, gf).reshape(B, C, Ho, Wo)
            if stride > 1:
                gx = np.zeros_like(x.data)
                gx[:, :, ::stride, ::stride] = gxs
            else:
                gx = gxs
            grads = (gx, gw)
            return grads if bias is None else grads + (g.sum(axis=(0, 2, 3)),)

        return _result(out, parents, fn, "conv2d")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols: [B, C, Ho, Wo, kh, kw] -> contiguous [B, Ho, Wo, C*kh*kw]
    cols = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(B, Ho, Wo, C * kh * kw)
    wflat = w.reshape(O, C * kh * kw)
    out = (cols @ wflat.T).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def fn(g):
        gt = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (gt.T @ cols.reshape(-1, C * kh * kw)).reshape(w.shape)
        gcols = (gt @ wflat).reshape(B, Ho, Wo, C, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        grads = (gx, gw)
        return grads if bias is None else grads + (g.sum(axis=(0, 2, 3)),)

    return _result(out, parents, fn, "conv2d")


# ---------------------------------------------------------------- nonlinear reductions

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0."""
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), fn, "softmax")


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial dims with learned scale/shift."""
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"instance_norm: input {x.shape}, scale {gamma.shape}, shift {beta.shape}")
    n = x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    inv = 1 / np.sqrt(var + x.dtype.type(eps))
    xhat = centered * inv
    gm = gamma.data[None, :, None, None]
    out = xhat * gm + beta.data[None, :, None, None]

    def fn(g):
        gxhat = g * gm
        gx = inv / n * (n * gxhat - gxhat.sum(axis=(2, 3), keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=(2, 3), keepdims=True))
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _result(out, (x, gamma, beta), fn, "instance_norm")


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    # half-pixel centres, source coordinate clamped to the valid range
    src = np.clip((np.arange(2 * n) + 0.5) / 2 - 0.5, 0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    m = np.zeros((2 * n, n), dtype=dtype)
    np.add.at(m, (np.arange(2 * n), lo), 1 - frac)
    np.add.at(m, (np.arange(2 * n), hi), frac)
    return m


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling of a [B,C,H,W] tensor."""
    if x.ndim != 4:
        raise ShapeError(f"upsample2x: expected 4-D input, got {x.shape}")
    uh = _upsample_matrix(x.shape[2], x.dtype)
    uw = _upsample_matrix(x.shape[3], x.dtype)
    out = uh @ x.data @ uw.T
    return _result(out, (x,), lambda g: (uh.T @ g @ uw,), "upsample2x")


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy between sigmoid(logits) and soft targets in [0, 1]."""
    y = np.asarray(target, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} vs target {y.shape}")
    z = logits.data
    per_pixel = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def fn(g):
        return ((_stable_sigmoid(z) - y) * (g / n),)

    return _result(per_pixel.mean(), (logits,), fn, "bce_with_logits")
