"""Two-stage 3D object detection on point clouds.

Stage one voxelizes a cropped scan and runs a fully-convolutional network
over the grid to propose oriented boxes; stage two pools the points and
convolutional features inside each proposal and regresses refined corner
positions. Everything runs on numpy with a small reverse-mode autodiff
core (:mod:`fastpoint.autodiff`), so the whole pipeline is dependency-light
and deterministic.
"""

from .geometry import Box3D, BoxBEV, iou_bev, iou_3d

__version__ = "0.1.0"

__all__ = ["Box3D", "BoxBEV", "iou_bev", "iou_3d", "__version__"]
