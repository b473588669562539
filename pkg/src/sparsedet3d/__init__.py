"""sparsedet3d: sparse 3D voxel computation and a two-stage point-cloud
object detection pipeline, CPU-only, verified against independent oracles."""

from ._kernels import BACKEND
from .geometry import Box3D
from .sparse import ConvWeights, KernelMap, SparseTensor
from .voxelize import ClassSizeTable, PointCloud

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Box3D",
    "ConvWeights",
    "KernelMap",
    "SparseTensor",
    "ClassSizeTable",
    "PointCloud",
    "__version__",
]
