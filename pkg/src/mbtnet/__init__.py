"""Multi-branch hybrid transformer network for cell-border segmentation."""
from .estimator import MBTNetSegmenter
from .model import MBTNet, ModelConfig
from .supervision import LossWeights, MaskTriplet

__version__ = "0.1.0"

__all__ = ["MBTNet", "ModelConfig", "MBTNetSegmenter", "LossWeights", "MaskTriplet"]
