"""scikit-learn style wrapper around the network and trainer.

Images are arrays of shape (n, H, W), either uint8 or floats in [0, 1];
masks are binary arrays of the same shape with 1 on cell borders.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import tensor as T
from .data import SampleRecord, histogram_equalize, to_uint8
from .model import MBTNet, ModelConfig
from .supervision import LossWeights, binarize, evaluate_masks, make_triplet, pooled
from .trainer import TrainOptions, train


def check_images(X, name: str = "X") -> np.ndarray:
    """Validate a stack of grayscale images and return it as float32 in [0, 1]."""
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"{name} must have shape (n, H, W), got {X.shape}")
    uint8 = X.dtype == np.uint8
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=None if uint8 else np.float64,
                    input_name=name)
    if any(s % 8 for s in X.shape[1:]):
        raise ValueError(f"{name}: image size {X.shape[1:]} must be a multiple of 8; "
                         f"pad the images first")
    if uint8:
        return X.astype(np.float32) / np.float32(255)
    if X.min() < 0 or X.max() > 1:
        raise ValueError(f"{name}: float images must lie in [0, 1]")
    return X.astype(np.float32)


def check_masks(y, X: np.ndarray, name: str = "y") -> np.ndarray:
    """Validate binary masks matching the image stack ``X``."""
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.shape != X.shape:
        raise ValueError(f"{name} shape {y.shape} does not match images {X.shape}")
    y = check_array(y, allow_nd=True, ensure_2d=False, dtype=None, input_name=name)
    if not np.isin(y, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1)")
    return y.astype(np.uint8)


class HistogramEqualizer(TransformerMixin, BaseEstimator):
    """Stateless per-image global histogram equalization; outputs floats in [0, 1]."""

    def fit(self, X, y=None):
        check_images(X)
        return self

    def transform(self, X):
        X = check_images(X)
        return np.stack([histogram_equalize(to_uint8(x)) for x in X]).astype(np.float32) / 255


class MBTNetSegmenter(BaseEstimator):
    """Cell-border segmenter with fit/predict on in-memory image stacks.

    ``equalize`` applies global histogram equalization to every input image,
    matching what the synthetic dataset stores on disk.
    """

    def __init__(self, tr_depth=2, widths=(8, 16, 32, 64), heads=2, span=48,
                 body_edge=True, epochs=30, lr=2e-4, lambda_body=0.5, lambda_edge=0.5,
                 lambda_final=1.2, threshold=0.5, equalize=False, seed=0):
        self.tr_depth = tr_depth
        self.widths = widths
        self.heads = heads
        self.span = span
        self.body_edge = body_edge
        self.epochs = epochs
        self.lr = lr
        self.lambda_body = lambda_body
        self.lambda_edge = lambda_edge
        self.lambda_final = lambda_final
        self.threshold = threshold
        self.equalize = equalize
        self.seed = seed

    def _prepare(self, X, name="X"):
        return HistogramEqualizer().transform(X) if self.equalize else check_images(X, name)

    def _records(self, X, y, prefix):
        return [SampleRecord(x[None], make_triplet(m), ident=f"{prefix}{i:04d}")
                for i, (x, m) in enumerate(zip(X, y))]

    def fit(self, X, y, X_val=None, y_val=None):
        X = self._prepare(X)
        y = check_masks(y, X)
        val = []
        if X_val is not None:
            Xv = self._prepare(X_val, "X_val")
            val = self._records(Xv, check_masks(y_val, Xv, "y_val"), "val")
        config = ModelConfig(tr_depth=self.tr_depth, widths=tuple(self.widths), heads=self.heads,
                             span=self.span, input_size=X.shape[1:], body_edge=self.body_edge)
        # without the body/edge branch only the final term can be trained
        weights = (LossWeights(self.lambda_body, self.lambda_edge, self.lambda_final)
                   if self.body_edge else LossWeights(0.0, 0.0, self.lambda_final))
        self.model_ = MBTNet(config, seed=self.seed)
        self.report_ = train(self.model_, self._records(X, y, "train"), val, self.epochs,
                             weights, seed=self.seed, options=TrainOptions(lr=self.lr,
                                                                           threshold=self.threshold))
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X) -> np.ndarray:
        """Final-branch logits, shape (n, H, W)."""
        check_is_fitted(self, "model_")
        X = self._prepare(X)
        model = self.model_.resized(X.shape[1:])
        dtype = model.parameters()[0].dtype
        with T.no_grad():
            return np.stack([model(T.Tensor(x[None, None].astype(dtype))).final_logits.data[0, 0]
                             for x in X])

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel border probability, shape (n, H, W)."""
        return T.sigmoid(T.Tensor(self.decision_function(X))).data

    def predict(self, X) -> np.ndarray:
        return binarize(self.decision_function(X), self.threshold)

    def score(self, X, y) -> float:
        """Pooled DICE of the predicted borders."""
        pred = self.predict(X)
        y = check_masks(y, pred)
        return pooled(evaluate_masks(p, t) for p, t in zip(pred, y)).dice
