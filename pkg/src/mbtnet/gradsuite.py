"""Named finite-difference checks over every differentiable op and block.

Each case maps a seed to ``(builder, params)`` for :func:`gradient_check`.
Cases are built in float64 and weight the op output with a fixed random
tensor so that no gradient component cancels by symmetry.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import (AxialHead, ConvResidualBlock, MultiHeadAxialAttention,
                        ResidualTransformerBlock, axial_self_attention)
from .gradcheck import GradCheckReport, gradient_check
from .nn import Module
from .tensor import Parameter, Tensor

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


def randomize_parameters(module: Module, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Overwrite every parameter (zero-initialised ones included) with random values."""
    for p in module.parameters():
        p.data[...] = rng.normal(0, scale, size=p.shape)


def perturb_parameters(module: Module, rng: np.random.Generator, scale: float) -> None:
    """Add noise to the initialised values, keeping norm gains near one."""
    for p in module.parameters():
        p.data += rng.normal(0, scale, size=p.shape)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.tsum(T.mul(out, Tensor(weights)))


def _params(rng, *shapes, names=None):
    names = names or [f"x{i}" for i in range(len(shapes))]
    return [Parameter(rng.normal(size=s), name=n) for s, n in zip(shapes, names)]


def _op_case(fn: Callable | str, *shapes):
    def make(seed: int):
        # op names resolve at call time so a patched op is what gets checked
        op = getattr(T, fn) if isinstance(fn, str) else fn
        rng = np.random.default_rng(seed)
        params = _params(rng, *shapes)
        weights = rng.normal(size=op(*params).shape)
        return (lambda: _weighted_sum(op(*params), weights)), params
    return make


def _conv_case(stride: int, padding: int):
    def make(seed: int):
        rng = np.random.default_rng(seed)
        x, w, b = _params(rng, (2, 3, 5, 5), (2, 3, 3, 3), (2,), names=["input", "kernel", "bias"])
        weights = rng.normal(size=T.conv2d(x, w, b, stride, padding).shape)
        return (lambda: _weighted_sum(T.conv2d(x, w, b, stride, padding), weights)), [x, w, b]
    return make


def _conv_relu_case(seed: int):
    rng = np.random.default_rng(seed)
    x, w, b = _params(rng, (1, 2, 6, 6), (3, 2, 3, 3), (3,), names=["input", "kernel", "bias"])
    return (lambda: T.tsum(T.relu(T.conv2d(x, w, b, 1, 1)))), [x, w, b]


def _masked_softmax_case(seed: int):
    rng = np.random.default_rng(seed)
    (x,) = _params(rng, (2, 4, 4))
    mask = rng.random((4, 4)) < 0.7
    mask[np.arange(4), np.arange(4)] = True
    weights = rng.normal(size=(2, 4, 4))
    return (lambda: _weighted_sum(T.softmax(x, -1, mask), weights)), [x]


def _take_case(seed: int):
    rng = np.random.default_rng(seed)
    (table,) = _params(rng, (5, 3), names=["table"])
    idx = rng.integers(0, 5, size=(4, 4))
    weights = rng.normal(size=(4, 4, 3))
    return (lambda: _weighted_sum(T.take(table, idx), weights)), [table]


def _bce_case(seed: int):
    rng = np.random.default_rng(seed)
    (z,) = _params(rng, (1, 1, 4, 4), names=["logits"])
    y = rng.random((1, 1, 4, 4))
    return (lambda: T.bce_with_logits(z, y)), [z]


def _module_case(factory: Callable, shape: tuple, method: str = "forward"):
    def make(seed: int):
        rng = np.random.default_rng(seed)
        module = factory(rng)
        module.assign_names()
        randomize_parameters(module, rng)
        (x,) = _params(rng, shape, names=["input"])
        call = getattr(module, method)
        weights = rng.normal(size=call(x).shape)
        return (lambda: _weighted_sum(call(x), weights)), [x] + module.parameters()
    return make


def _axial_case(axis: str, span: int, shape=(1, 4, 5, 6)):
    def make(seed: int):
        rng = np.random.default_rng(seed)
        head = AxialHead(shape[1], 3, 4, span, rng)
        head.assign_names()
        randomize_parameters(head, rng)
        (x,) = _params(rng, shape, names=["input"])
        weights = rng.normal(size=axial_self_attention(x, head, axis).shape)
        return (lambda: _weighted_sum(axial_self_attention(x, head, axis), weights)), \
            [x] + head.parameters()
    return make


def model_case(seed: int, tr_depth: int = 2):
    """Full toy network (32x32 input, widths 4-8-16-32, two heads) under the joint loss."""
    from .model import MBTNet, ModelConfig
    from .supervision import LossWeights, MaskTriplet, joint_loss

    rng = np.random.default_rng(seed)
    model = MBTNet(ModelConfig(tr_depth=tr_depth, widths=(4, 8, 16, 32), heads=2, span=48,
                               input_size=(32, 32)), seed=seed)
    # perturbing (not replacing) the init keeps gradients well above float64
    # round-off of the loss; zero-initialised exits become active
    perturb_parameters(model, rng, scale=0.2)
    image = Tensor(rng.random((1, 1, 32, 32)))
    final = (rng.random((32, 32)) < 0.2).astype(np.float64)
    masks = MaskTriplet(final=final, edge=(rng.random((32, 32)) < 0.1).astype(np.float64),
                        body=rng.random((32, 32)))
    return (lambda: joint_loss(model(image), masks, LossWeights()).total), model.parameters()


CASES: dict[str, Callable] = {
    "add": _op_case("add", (2, 3), (2, 3)),
    "sub": _op_case("sub", (2, 3), (2, 3)),
    "mul": _op_case("mul", (2, 3), (2, 3)),
    "scale": _op_case(lambda x: T.scale(x, -1.7), (3, 4)),
    "relu": _op_case("relu", (3, 4)),
    "sigmoid": _op_case("sigmoid", (3, 4)),
    "maximum": _op_case("maximum", (2, 3), (2, 3), (2, 3)),
    "concat": _op_case(lambda a, b: T.concat([a, b], axis=1), (1, 2, 3, 3), (1, 3, 3, 3)),
    "reshape": _op_case(lambda x: T.reshape(x, (3, 4)), (2, 6)),
    "transpose": _op_case(lambda x: T.transpose(x, (2, 0, 1)), (2, 3, 4)),
    "take": _take_case,
    "sum": _op_case(lambda x: T.scale(T.tsum(x), 1.3), (3, 3)),
    "mean": _op_case(lambda x: T.scale(T.mean(x), 2.1), (3, 3)),
    "matmul": _op_case("matmul", (2, 3, 4), (2, 4, 5)),
    "einsum": _op_case(lambda a, b: T.einsum("bdow,opd->bwop", a, b), (1, 2, 3, 4), (3, 3, 2)),
    "conv2d": _conv_case(1, 0),
    "conv2d_stride2_pad1": _conv_case(2, 1),
    "conv2d_1x1": _op_case(lambda x, w: T.conv2d(x, w), (2, 3, 4, 4), (5, 3, 1, 1)),
    "conv2d_relu_sum": _conv_relu_case,
    "softmax": _op_case(lambda x: T.softmax(x, -1), (3, 5)),
    "softmax_masked": _masked_softmax_case,
    "instance_norm": _op_case("instance_norm", (2, 3, 4, 4), (3,), (3,)),
    "upsample2x": _op_case("upsample2x", (1, 2, 3, 4)),
    "bce_with_logits": _bce_case,
    "axial_attention_height": _axial_case("height", 3),
    "axial_attention_width": _axial_case("width", 4),
    "axial_attention_global": _axial_case("width", 48),
    "multi_head_axial": _module_case(
        lambda rng: MultiHeadAxialAttention(4, 2, 3, "height", rng), (1, 4, 4, 3)),
    "conv_residual_block": _module_case(lambda rng: ConvResidualBlock(4, 4, rng), (1, 4, 6, 6)),
    "conv_residual_block_stride2": _module_case(
        lambda rng: ConvResidualBlock(3, 4, rng, stride=2), (1, 3, 6, 6)),
    "residual_transformer_block": _module_case(
        lambda rng: ResidualTransformerBlock(8, 2, 4, rng), (1, 8, 4, 4)),
}


BLOCK_CASES = ("axial_attention_height", "axial_attention_width", "axial_attention_global",
               "multi_head_axial", "conv_residual_block", "conv_residual_block_stride2",
               "residual_transformer_block")
PRIMITIVE_CASES = tuple(name for name in CASES if name not in BLOCK_CASES)


@dataclass
class SuiteResult:
    name: str
    report: GradCheckReport


def run_case(name: str, seed: int = 0, tolerance: float = OP_TOLERANCE,
             max_elements: int | None = None) -> GradCheckReport:
    with T.default_dtype(np.float64):
        builder, params = CASES[name](seed)
        return gradient_check(builder, params, tolerance, max_elements=max_elements, seed=seed)


def run_model_case(seed: int = 0, tr_depth: int = 2, max_elements: int = 3) -> GradCheckReport:
    with T.default_dtype(np.float64):
        builder, params = model_case(seed, tr_depth)
        return gradient_check(builder, params, MODEL_TOLERANCE, max_elements=max_elements,
                              seed=seed, avoid_kinks=True)


def run_suite(seeds=(0,), include_model: bool = True) -> list[SuiteResult]:
    results = []
    for name in CASES:
        for seed in seeds:
            results.append(SuiteResult(f"{name}[seed={seed}]", run_case(name, seed)))
    if include_model:
        results.append(SuiteResult("full_model[toy]", run_model_case()))
    return results
