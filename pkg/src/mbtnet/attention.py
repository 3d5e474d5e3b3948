"""Axial self-attention with relative positions, and the residual blocks built on it."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import tensor as T
from .nn import Conv2d, ConvNormReLU, InstanceNorm, Module, uniform_fan_in
from .tensor import Parameter, ShapeError, Tensor

AXES = ("height", "width")

# einsum subscripts per attended axis: (q.k, q.r_q, k.r_k, A.v, A.r_v)
_SUBSCRIPTS = {
    "height": ("bdow,bdpw->bwop", "bdow,opd->bwop", "bdpw,opd->bwop",
               "bwop,bdpw->bdow", "bwop,opd->bdow"),
    "width": ("bdyo,bdyp->byop", "bdyo,opd->byop", "bdyp,opd->byop",
              "byop,bdyp->bdyo", "byop,opd->bdyo"),
}


@lru_cache(maxsize=64)
def window_layout(length: int, span: int) -> tuple[np.ndarray, np.ndarray]:
    """Window membership mask ``[L, L]`` and relative-table row index ``[L, L]``.

    The effective span is ``min(span, length)``.  Windows are centred on the
    query and shifted (never wrapped) to stay inside the axis, so a span at
    least as long as the axis gives global attention.  Row ``span - 1`` of a
    relative table holds offset 0.
    """
    m = min(span, length)
    o = np.arange(length)
    start = np.clip(o - m // 2, 0, length - m)
    p = np.arange(length)
    mask = (p[None, :] >= start[:, None]) & (p[None, :] < start[:, None] + m)
    rows = np.clip(p[None, :] - o[:, None], -(span - 1), span - 1) + span - 1
    mask.setflags(write=False)
    rows.setflags(write=False)
    return mask, rows


class AxialHead(Module):
    """Projections and relative-position tables of a single attention head."""

    def __init__(self, channels: int, dim_qk: int, dim_v: int, span: int,
                 rng: np.random.Generator):
        self.span = span
        self.w_q = Parameter(uniform_fan_in(rng, (dim_qk, channels, 1, 1), channels))
        self.w_k = Parameter(uniform_fan_in(rng, (dim_qk, channels, 1, 1), channels))
        self.w_v = Parameter(uniform_fan_in(rng, (dim_v, channels, 1, 1), channels))
        rows = 2 * span - 1
        self.r_q = Parameter(np.zeros((rows, dim_qk)))
        self.r_k = Parameter(np.zeros((rows, dim_qk)))
        self.r_v = Parameter(np.zeros((rows, dim_v)))


def axial_self_attention(x: Tensor, head: AxialHead, axis: str) -> Tensor:
    """Single-head attention along one spatial axis of a [B,C,H,W] map.

    For every position o the output is the softmax-weighted sum over the
    window positions p of ``v_p + r_v[p-o]`` with logits
    ``q_o.k_p + q_o.r_q[p-o] + k_p.r_k[p-o]``.  The other spatial axis is
    treated as batch.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    if x.ndim != 4 or x.shape[1] != head.w_q.shape[1]:
        raise ShapeError(f"axial attention expects [B,{head.w_q.shape[1]},H,W], got {x.shape}")
    length = x.shape[2] if axis == "height" else x.shape[3]
    mask, rows = window_layout(length, head.span)
    s_qk, s_qr, s_kr, s_av, s_ar = _SUBSCRIPTS[axis]
    q = T.conv2d(x, head.w_q)
    k = T.conv2d(x, head.w_k)
    v = T.conv2d(x, head.w_v)
    rel_q = T.take(head.r_q, rows, axis=0)
    rel_k = T.take(head.r_k, rows, axis=0)
    rel_v = T.take(head.r_v, rows, axis=0)
    logits = T.add(T.add(T.einsum(s_qk, q, k), T.einsum(s_qr, q, rel_q)),
                   T.einsum(s_kr, k, rel_k))
    attn = T.softmax(logits, axis=-1, mask=mask)
    return T.add(T.einsum(s_av, attn, v), T.einsum(s_ar, attn, rel_v))


class MultiHeadAxialAttention(Module):
    def __init__(self, channels: int, heads: int, span: int, axis: str,
                 rng: np.random.Generator):
        if axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
        if heads < 1 or channels % heads:
            raise ValueError(f"width {channels} is not divisible by {heads} heads")
        if span < 1:
            raise ValueError(f"span must be >= 1, got {span}")
        self.axis = axis
        dim = channels // heads
        self.heads = [AxialHead(channels, dim, dim, span, rng) for _ in range(heads)]

    def forward(self, x: Tensor) -> Tensor:
        outs = [axial_self_attention(x, h, self.axis) for h in self.heads]
        return outs[0] if len(outs) == 1 else T.concat(outs, axis=1)


class ResidualTransformerBlock(Module):
    """x + exit(width_attn(height_attn(relu(norm(entry(x)))))).

    The exit projection starts at zero, so a fresh block is the identity.
    """

    def __init__(self, channels: int, heads: int, span: int, rng: np.random.Generator,
                 bottleneck: int = 2):
        mid = max(channels // bottleneck, 1)
        if mid % heads:
            raise ValueError(f"bottleneck width {mid} (block width {channels} / {bottleneck}) "
                             f"is not divisible by {heads} heads")
        self.channels = channels
        self.entry = Conv2d(channels, mid, 1, rng, bias=False)
        self.entry_norm = InstanceNorm(mid)
        self.height_attn = MultiHeadAxialAttention(mid, heads, span, "height", rng)
        self.width_attn = MultiHeadAxialAttention(mid, heads, span, "width", rng)
        self.exit = Conv2d(mid, channels, 1, rng, zero_init=True)

    def residual(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"transformer block of width {self.channels} got input {x.shape}")
        h = T.relu(self.entry_norm(self.entry(x)))
        return self.exit(self.width_attn(self.height_attn(h)))

    def forward(self, x: Tensor) -> Tensor:
        return T.add(x, self.residual(x))


class ConvResidualBlock(Module):
    """relu(norm(conv(relu(norm(conv(x))))) + skip(x)) with 3x3 convs."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, stride: int = 1):
        self.in_ch = in_ch
        self.stride = stride
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, stride=stride, bias=False)
        self.norm1 = InstanceNorm(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, bias=False)
        self.norm2 = InstanceNorm(out_ch)
        self.skip = Conv2d(in_ch, out_ch, 1, rng, stride=stride) \
            if in_ch != out_ch or stride > 1 else None

    def residual(self, x: Tensor) -> Tensor:
        h = T.relu(self.norm1(self.conv1(x)))
        return self.norm2(self.conv2(h))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"conv block of width {self.in_ch} got input {x.shape}")
        shortcut = x if self.skip is None else self.skip(x)
        return T.relu(T.add(self.residual(x), shortcut))


class TransformerStage(Module):
    """Optional strided 3x3 transition followed by residual transformer blocks."""

    def __init__(self, in_ch: int, out_ch: int, heads: int, span: int,
                 rng: np.random.Generator, stride: int = 1, blocks: int = 2,
                 bottleneck: int = 2):
        self.transition = ConvNormReLU(in_ch, out_ch, 3, rng, stride=stride) \
            if in_ch != out_ch or stride > 1 else None
        self.blocks = [ResidualTransformerBlock(out_ch, heads, span, rng, bottleneck)
                       for _ in range(blocks)]

    def forward(self, x: Tensor) -> Tensor:
        if self.transition is not None:
            x = self.transition(x)
        for block in self.blocks:
            x = block(x)
        return x


class ConvStage(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, stride: int = 1,
                 blocks: int = 2):
        self.blocks = [ConvResidualBlock(in_ch if i == 0 else out_ch, out_ch, rng,
                                         stride if i == 0 else 1) for i in range(blocks)]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x
