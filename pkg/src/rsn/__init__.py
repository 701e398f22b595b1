"""Range-image sparse 3D object detection toolkit."""

from .core import Box7, Detection, DetectorConfig, make_rng, wrap_angle
from .geometry import iou_3d, iou_bev
from .range_image import RangeImage, project, unproject

__all__ = ["Box7", "Detection", "DetectorConfig", "RangeImage", "iou_3d", "iou_bev",
           "make_rng", "project", "unproject", "wrap_angle"]
__version__ = "0.1.0"
