"""Training targets, the joint branch loss, and segmentation metrics.

The positive class everywhere in this module is the cell border.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy import ndimage

from . import tensor as T
from .tensor import Tensor

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)


@dataclass
class MaskTriplet:
    final: np.ndarray
    edge: np.ndarray
    body: np.ndarray

    def __post_init__(self):
        if not (self.final.shape == self.edge.shape == self.body.shape):
            raise ValueError(f"mask extents differ: final {self.final.shape}, "
                             f"edge {self.edge.shape}, body {self.body.shape}")


@dataclass(frozen=True)
class LossWeights:
    body: float = 0.5
    edge: float = 0.5
    final: float = 1.2

    def __post_init__(self):
        values = (self.body, self.edge, self.final)
        if any(v < 0 for v in values) or not any(v > 0 for v in values):
            raise ValueError(f"loss weights must be non-negative with one positive, got {values}")


@dataclass
class LossBreakdown:
    """Total loss plus the weighted per-branch terms that sum to it."""

    total: Tensor
    body: float
    edge: float
    final: float


@dataclass
class MetricsReport:
    dice: float
    f1: float
    sensitivity: float
    specificity: float
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float = 0.5

    def as_row(self) -> dict:
        return {"dice": self.dice, "f1": self.f1, "se": self.sensitivity, "sp": self.specificity}


# ---------------------------------------------------------------- masks

def gaussian_kernel(sigma: float, ksize: int) -> np.ndarray:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if ksize < 1 or ksize % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {ksize}")
    r = np.arange(ksize) - ksize // 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _check_binary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be {0,1}-valued")
    return mask


def derive_edge_mask(final: np.ndarray, sigma: float = 1.0, ksize: int = 5,
                     low: float = 0.1, high: float = 0.3) -> np.ndarray:
    """Canny edges of a binary mask rendered as an 8-bit image.

    ``low`` and ``high`` are hysteresis thresholds as fractions of the peak
    gradient magnitude.  Non-maximum suppression keeps the pixel on the
    up-gradient side of a tie, so a filled region yields its own outermost
    pixel layer.
    """
    final = _check_binary(final)
    img = final.astype(np.float64) * 255.0
    smooth = ndimage.convolve(img, gaussian_kernel(sigma, ksize), mode="nearest")
    gx = ndimage.correlate(smooth, _SOBEL_X, mode="nearest")
    gy = ndimage.correlate(smooth, _SOBEL_X.T, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 1e-9:
        return np.zeros(final.shape, dtype=np.uint8)
    mag[mag < peak * 1e-9] = 0

    # gradient direction quantised to the 8-neighbourhood
    sector = np.round(np.arctan2(gy, gx) / (np.pi / 4)).astype(int) % 8
    step_x = np.array([1, 1, 0, -1, -1, -1, 0, 1])[sector]
    step_y = np.array([0, 1, 1, 1, 0, -1, -1, -1])[sector]
    H, W = mag.shape
    padded = np.pad(mag, 1)
    yy, xx = np.mgrid[0:H, 0:W]
    ahead = padded[yy + 1 + step_y, xx + 1 + step_x]
    behind = padded[yy + 1 - step_y, xx + 1 - step_x]
    tie = 1e-7 * peak
    thin = np.where((mag > 0) & (mag > ahead + tie) & (mag >= behind - tie), mag, 0.0)

    strong = thin >= high * peak
    weak = thin >= low * peak
    labels, n = ndimage.label(weak, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros(final.shape, dtype=np.uint8)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels].astype(np.uint8)


def derive_body_mask(final: np.ndarray, sigma: float = 2.0, ksize: int = 5) -> np.ndarray:
    """Inverted border mask relaxed by a normalized Gaussian; values in [0, 1]."""
    final = _check_binary(final)
    # 1 - blur(final) equals blur(1 - final) for a normalized kernel, and is
    # exactly 1 wherever the kernel sees no border (no rounding of sum(k))
    blurred = ndimage.convolve(final.astype(np.float64), gaussian_kernel(sigma, ksize),
                               mode="nearest")
    return np.clip(1.0 - blurred, 0.0, 1.0)


def make_triplet(final: np.ndarray, edge_sigma: float = 1.0, edge_low: float = 0.1,
                 edge_high: float = 0.3, body_sigma: float = 2.0,
                 body_ksize: int = 5) -> MaskTriplet:
    final = _check_binary(final).astype(np.uint8)
    return MaskTriplet(
        final=final,
        edge=derive_edge_mask(final, edge_sigma, 5, edge_low, edge_high),
        body=derive_body_mask(final, body_sigma, body_ksize),
    )


# ---------------------------------------------------------------- loss

def bce_loss(pred_logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against (soft) targets."""
    target = np.asarray(target)
    if target.shape != pred_logits.shape and target.size == pred_logits.data.size:
        # an H x W mask against [1,1,H,W] logits
        target = target.reshape(pred_logits.shape)
    if not np.all(np.isfinite(pred_logits.data)):
        raise FloatingPointError("bce_loss: non-finite logits")
    return T.bce_with_logits(pred_logits, target)


def joint_loss(outputs, masks: MaskTriplet, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Weighted sum of body, edge and final BCE terms; zero-weight terms are skipped."""
    terms = []
    parts = {}
    for name, logits, target in (("body", outputs.body_logits, masks.body),
                                 ("edge", outputs.edge_logits, masks.edge),
                                 ("final", outputs.final_logits, masks.final)):
        lam = getattr(weights, name)
        if lam == 0:
            parts[name] = 0.0
            continue
        if logits is None:
            raise ValueError(f"joint_loss: weight {name}={lam} but the model has no {name} branch")
        term = T.scale(bce_loss(logits, target), lam)
        parts[name] = float(term.data)
        terms.append(term)
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return LossBreakdown(total=total, **parts)


# ---------------------------------------------------------------- metrics

def _ratio(num: int, den: int, empty_ok: bool) -> float:
    if den > 0:
        return num / den
    return 1.0 if empty_ok else 0.0


def metrics_from_counts(tp: int, fp: int, tn: int, fn: int,
                        threshold: float = 0.5) -> MetricsReport:
    dice = _ratio(2 * tp, 2 * tp + fp + fn, True)
    precision = _ratio(tp, tp + fp, fn == 0)
    recall = _ratio(tp, tp + fn, fp == 0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MetricsReport(
        dice=dice, f1=f1,
        sensitivity=recall,
        specificity=_ratio(tn, tn + fp, fn == 0),
        tp=tp, fp=fp, tn=tn, fn=fn, threshold=threshold,
    )


def confusion_counts(pred: np.ndarray, truth: np.ndarray) -> tuple[int, int, int, int]:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {truth.shape} differ")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return tp, fp, truth.size - tp - fp - fn, fn


def binarize(pred_logits, threshold: float = 0.5) -> np.ndarray:
    z = pred_logits.data if isinstance(pred_logits, Tensor) else np.asarray(pred_logits)
    return (T._stable_sigmoid(z.astype(np.float64)) > threshold).astype(np.uint8)


def evaluate(pred_logits, final_gt: np.ndarray, threshold: float = 0.5) -> MetricsReport:
    """Threshold sigmoid(logits) and score it against the border ground truth."""
    pred = binarize(pred_logits, threshold)
    truth = np.asarray(final_gt)
    if pred.size != truth.size:
        raise ValueError(f"prediction {pred.shape} and ground truth {truth.shape} differ")
    return metrics_from_counts(*confusion_counts(pred.reshape(truth.shape), truth), threshold)


def evaluate_masks(pred: np.ndarray, final_gt: np.ndarray) -> MetricsReport:
    return metrics_from_counts(*confusion_counts(pred, final_gt))


def pooled(reports: Iterable[MetricsReport]) -> MetricsReport:
    """Metrics of the summed confusion counts."""
    reports = list(reports)
    counts = [sum(getattr(r, k) for r in reports) for k in ("tp", "fp", "tn", "fn")]
    threshold = reports[0].threshold if reports else 0.5
    return metrics_from_counts(*counts, threshold)


def mean_of(reports: Iterable[MetricsReport]) -> dict:
    """Per-image metrics averaged over images."""
    reports = list(reports)
    if not reports:
        return {"dice": 0.0, "f1": 0.0, "se": 0.0, "sp": 0.0}
    rows = [r.as_row() for r in reports]
    return {k: float(np.mean([row[k] for row in rows])) for k in rows[0]}
