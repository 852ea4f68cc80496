"""Volumetric brain-tumor segmentation (UNet, ResUNet, AttUNet) on a small reverse-mode
autodiff engine, with Grad-CAM and attention heatmaps."""

from .errors import DataError, GraphStateError, ShapeError
from .tensor import Tensor, backward, detect_anomaly, no_grad, precision

__all__ = ["Tensor", "backward", "no_grad", "precision", "detect_anomaly",
           "ShapeError", "GraphStateError", "DataError"]
__version__ = "0.1.0"
