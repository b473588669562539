"""Point-cloud quantization with average-pooling feature encoding.

Quantization uses floor, so a point exactly on a cell boundary belongs to
the higher-index cell. Clouds without feature channels are encoded with a
single constant occupancy channel so downstream tensors always carry C >= 1.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._kernels import pack_coords
from .sparse import SparseTensor

__all__ = ["PointCloud", "ClassSizeTable", "voxelize_avg", "class_revoxelize", "quantize"]


@dataclass
class PointCloud:
    """N points in meters with optional per-point feature channels."""

    positions: np.ndarray
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(np.asarray(self.positions, dtype=np.float64).reshape(-1, 3))
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("non-finite point coordinates")
        if self.features is not None:
            self.features = np.ascontiguousarray(np.atleast_2d(self.features))
            if len(self.features) != len(self.positions):
                raise ValueError("feature rows must match point count")

    def __len__(self):
        return len(self.positions)

    def feature_matrix(self) -> np.ndarray:
        """Features, or a constant ones column when none are attached."""
        if self.features is not None:
            return self.features
        return np.ones((len(self.positions), 1))


@dataclass
class ClassSizeTable:
    """Per-class mean spatial dimensions, axis order (w, l, h) = (x, y, z)."""

    sizes: np.ndarray

    def __post_init__(self):
        self.sizes = np.asarray(self.sizes, dtype=np.float64).reshape(-1, 3)
        if np.any(self.sizes <= 0):
            raise ValueError("class sizes must be strictly positive")

    @property
    def n_class(self) -> int:
        return len(self.sizes)

    def __getitem__(self, class_id) -> np.ndarray:
        return self.sizes[class_id]

    @classmethod
    def from_boxes(cls, boxes, class_ids, n_class):
        """Per-class mean of (w, l, h) over ground-truth boxes."""
        sums = np.zeros((n_class, 3))
        counts = np.zeros(n_class)
        for b, c in zip(boxes, class_ids):
            sums[c] += (b.w, b.l, b.h)
            counts[c] += 1
        if np.any(counts == 0):
            raise ValueError("every class needs at least one box")
        return cls(sums / counts[:, None])


def quantize(positions, voxel_size):
    """Floor-quantize metric positions onto a grid.

    Returns (cells, uniq_coords, inverse): per-point int32 cells, the unique
    occupied coordinates sorted lexicographically, and the index of each
    point's cell within uniq_coords.
    """
    vs = np.asarray(voxel_size, dtype=np.float64).reshape(3)
    if np.any(vs <= 0):
        raise ValueError(f"voxel size must be strictly positive, got {vs}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    cells = np.floor(pos / vs).astype(np.int64)
    if len(cells) == 0:
        return cells.astype(np.int32), np.empty((0, 3), np.int32), np.empty(0, np.int64)
    keys = pack_coords(cells)
    uniq_keys, inverse = np.unique(keys, return_inverse=True)
    first = np.zeros(len(uniq_keys), dtype=np.int64)
    first[inverse[::-1]] = np.arange(len(cells) - 1, -1, -1)
    uniq = cells[first].astype(np.int32)
    return cells.astype(np.int32), uniq, inverse


def voxelize_avg(cloud: PointCloud, voxel_size) -> SparseTensor:
    """Quantize a point cloud; each occupied cell averages its members'
    feature rows. An empty cloud yields an empty tensor."""
    vs = np.asarray(voxel_size, dtype=np.float64).reshape(3)
    if np.any(vs <= 0):
        raise ValueError(f"voxel size must be strictly positive, got {vs}")
    feats = cloud.feature_matrix()
    if len(cloud) == 0:
        return SparseTensor.empty(feats.shape[1] if feats.ndim == 2 and feats.shape[1] else 1,
                                  voxel_size=vs)
    _, uniq, inverse = quantize(cloud.positions, vs)
    sums = np.zeros((len(uniq), feats.shape[1]), dtype=np.float64)
    np.add.at(sums, inverse, feats)
    counts = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)
    return SparseTensor(uniq, (sums / counts[:, None]).astype(feats.dtype, copy=False), 1, vs)


def class_revoxelize(votes: PointCloud, class_id: int, sizes: ClassSizeTable, alpha: float) -> SparseTensor:
    """Voxelize votes of one class at its own cell size alpha * d_j; the
    returned tensor records that per-class metric voxel size."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if not 0 <= class_id < sizes.n_class:
        raise ValueError(f"class_id {class_id} out of range")
    return voxelize_avg(votes, alpha * sizes[class_id])
