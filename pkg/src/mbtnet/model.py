"""Hybrid conv/transformer encoder-decoder with body, edge and final branches."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .attention import ConvStage, TransformerStage
from .nn import Conv2d, ConvNormReLU, Module
from .tensor import Tensor


@dataclass
class ModelConfig:
    """Network hyperparameters.

    ``tr_depth`` is the number of deepest encoder/decoder stage pairs built
    from transformer blocks: 0 is fully convolutional, 2 makes e3, e4, d3, d4
    transformer stages, 4 is transformer throughout.  ``body_edge=False``
    drops the body/edge branch and its max fusion; the final head then reads
    the decoder output directly.
    """

    tr_depth: int = 2
    widths: tuple[int, int, int, int] = (32, 64, 128, 256)
    heads: int = 8
    span: int = 48
    input_size: tuple[int, int] = (192, 192)
    bottleneck: int = 2
    body_edge: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.input_size = tuple(int(s) for s in self.input_size)
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.tr_depth <= 4:
            raise ValueError(f"tr_depth must be in 0..4, got {self.tr_depth}")
        if len(self.widths) != 4 or any(w <= 0 for w in self.widths):
            raise ValueError(f"widths must be 4 positive ints, got {self.widths}")
        if self.heads < 1:
            raise ValueError(f"heads must be >= 1, got {self.heads}")
        if self.span < 1:
            raise ValueError(f"span must be >= 1, got {self.span}")
        if self.bottleneck < 1:
            raise ValueError(f"bottleneck must be >= 1, got {self.bottleneck}")
        if len(self.input_size) != 2 or any(s <= 0 or s % 8 for s in self.input_size):
            raise ValueError(f"input_size must be positive multiples of 8, got {self.input_size}")
        for i, kind in enumerate(self.stage_kinds()):
            mid = max(self.widths[i] // self.bottleneck, 1)
            if kind == "transformer" and mid % self.heads:
                raise ValueError(f"widths: stage {i + 1} bottleneck width {mid} is not "
                                 f"divisible by heads={self.heads}")

    def stage_kinds(self) -> list[str]:
        return ["transformer" if i >= 4 - self.tr_depth else "conv" for i in range(4)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


@dataclass
class BranchOutputs:
    """Branch logits and intermediate features; the body/edge fields are None
    when the model is built without that branch."""

    final_logits: Tensor
    edge_logits: Tensor | None
    body_logits: Tensor | None
    features: Tensor
    edge_features: Tensor | None = None
    body_features: Tensor | None = None
    e1_projection: Tensor | None = None
    fused_features: Tensor | None = None
    encoder: list[Tensor] = field(default_factory=list)


class MBTNet(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        w = config.widths
        kinds = config.stage_kinds()

        def stage(kind, cin, cout, stride):
            if kind == "transformer":
                return TransformerStage(cin, cout, config.heads, config.span, rng,
                                        stride=stride, bottleneck=config.bottleneck)
            return ConvStage(cin, cout, rng, stride=stride)

        self.encoder = [stage(kinds[i], 1 if i == 0 else w[i - 1], w[i], 1 if i == 0 else 2)
                        for i in range(4)]
        # decoder[i] is d_{i+1}; d4 sits on the e4 bottleneck directly
        self.decoder = [stage(kinds[i], w[i], w[i], 1) for i in range(4)]
        self.up_proj = [Conv2d(w[i + 1], w[i], 1, rng) for i in range(3)]
        self.skip_proj = [Conv2d(2 * w[i], w[i], 1, rng) for i in range(3)]
        self.final_out = Conv2d(w[0], 1, 1, rng, gain=0.1)
        # without the body/edge branch the network is a plain encoder-decoder
        self.body_head, self.edge_proj, self.edge_out, self.body_out = [], None, None, None
        if config.body_edge:
            self.body_head = [ConvNormReLU(w[0], w[0], 3, rng), ConvNormReLU(w[0], w[0], 3, rng)]
            self.edge_proj = Conv2d(w[0], w[0], 1, rng)
            self.edge_out = Conv2d(w[0], 1, 1, rng, gain=0.1)
            self.body_out = Conv2d(w[0], 1, 1, rng, gain=0.1)
        self.assign_names()

    def stage_kinds(self) -> tuple[list[str], list[str]]:
        enc = ["transformer" if isinstance(s, TransformerStage) else "conv" for s in self.encoder]
        dec = ["transformer" if isinstance(s, TransformerStage) else "conv" for s in self.decoder]
        return enc, dec

    def decouple(self, features: Tensor) -> Tensor:
        if not self.body_head:
            raise ValueError("decouple: model was built with body_edge=False")
        body = features
        for layer in self.body_head:
            body = layer(body)
        return body

    def forward(self, image: Tensor) -> BranchOutputs:
        cfg = self.config
        if image.ndim != 4 or image.shape[1] != 1:
            raise T.ShapeError(f"expected a [B,1,H,W] image, got {image.shape}")
        if tuple(image.shape[2:]) != cfg.input_size:
            raise T.ShapeError(f"image size {tuple(image.shape[2:])} does not match "
                               f"configured input_size {cfg.input_size}")
        enc = []
        x = image
        for stage in self.encoder:
            x = stage(x)
            enc.append(x)
        d = self.decoder[3](enc[3])
        for i in (2, 1, 0):
            up = self.up_proj[i](T.upsample2x(d))
            refined = T.add(up, self.skip_proj[i](T.concat([up, enc[i]], axis=1)))
            d = self.decoder[i](refined)
        feat = d
        if not cfg.body_edge:
            return BranchOutputs(final_logits=self.final_out(feat), edge_logits=None,
                                 body_logits=None, features=feat, encoder=enc)
        body = self.decouple(feat)
        psi = self.edge_proj(enc[0])
        edge_wide = _decouple_edge(feat, body, psi)
        edge = T.cast(edge_wide, feat.dtype)
        fused = T.maximum(feat, edge, body)
        return BranchOutputs(
            final_logits=self.final_out(fused),
            edge_logits=self.edge_out(edge),
            body_logits=self.body_out(body),
            features=feat, edge_features=edge_wide, body_features=body,
            e1_projection=psi, fused_features=fused, encoder=enc,
        )

    def parameter_count(self) -> int:
        return self.num_parameters()

    def resized(self, input_size: tuple[int, int]) -> "MBTNet":
        """Same weights, rebuilt for another input size (no parameter depends on it)."""
        if tuple(input_size) == self.config.input_size:
            return self
        clone = MBTNet(replace(self.config, input_size=tuple(input_size)))
        for mine, theirs in zip(clone.parameters(), self.parameters()):
            mine.data = theirs.data.copy()
        return clone


def _decouple_edge(feat: Tensor, body: Tensor, psi: Tensor) -> Tensor:
    """(F - F_body) + psi, formed in double precision.

    Differences and sums of single-precision operands are exact in double
    precision whenever their magnitudes lie within 2**29 of each other, so
    ``F_body + F_edge - psi`` recovers ``F`` bit for bit in 32-bit runs.
    """
    wide = np.float64
    return T.add(T.sub(T.cast(feat, wide), T.cast(body, wide)), T.cast(psi, wide))


def build(config: ModelConfig, seed: int = 0) -> MBTNet:
    return MBTNet(config, seed=seed)


def parameter_count(model: MBTNet) -> int:
    return model.parameter_count()
