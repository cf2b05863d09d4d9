"""U-Net vertebra segmentation on lateral radiographs, in plain numpy."""
from .imaging import BinaryMask, ClaheParams, GrayImage
from .objectives import MetricsReport, combined_loss, dice_score, iou
from .tensor import Graph, Tensor
from .unet import UNetConfig, UNetModel, build, forward

__version__ = "0.1.0"

__all__ = [
    "BinaryMask", "ClaheParams", "GrayImage", "Graph", "MetricsReport", "Tensor",
    "UNetConfig", "UNetModel", "build", "combined_loss", "dice_score", "forward", "iou",
]
