"""Interactive stroke-based segmentation and editing of voxelized radiance
fields: train a field with distilled per-voxel semantic features, mark
objects with positive/negative brush strokes, extract them via exemplar
feature matching plus bilateral spatio-semantic region growing, and apply
geometric/appearance edits to the segmented volume."""

__version__ = "0.1.0"

from .field import Decoder, VoxelField
from .grid import Bitmap3D, DenseGrid, GridGeometry, VMGrid
from .render import Camera, Ray, RenderSample

__all__ = [
    "Bitmap3D",
    "Camera",
    "Decoder",
    "DenseGrid",
    "GridGeometry",
    "Ray",
    "RenderSample",
    "VMGrid",
    "VoxelField",
    "__version__",
]
