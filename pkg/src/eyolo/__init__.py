"""RGB-D 3D object detection on a cubic grid, built on a small numpy autodiff engine."""

from .codec import GridSpec, TargetGrid, decode_grid, decode_tensor, encode_targets, split_to_depth
from .geometry import Box3D, NmsConfig, iou2d, iou3d, nms3d
from .loss import LossConfig, compute_loss
from .net import NetConfig, Network, build_network, preset
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "Box3D",
    "GridSpec",
    "LossConfig",
    "NetConfig",
    "Network",
    "NmsConfig",
    "TargetGrid",
    "Tensor",
    "build_network",
    "compute_loss",
    "decode_grid",
    "decode_tensor",
    "encode_targets",
    "iou2d",
    "iou3d",
    "nms3d",
    "preset",
    "split_to_depth",
]
