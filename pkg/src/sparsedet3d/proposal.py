"""Stage I: vote and semantic heads, ground-truth target assignment,
class-aware local grouping, the anchor-free proposal head, and oriented NMS.

Grouping semantics: a vote enters every class whose score exceeds the
threshold (multi-membership is deliberate), each class slice is voxelized
on its own grid of cell size alpha * d_j, and a class-specific submanifold
convolution of kernel size k_a aggregates context inside the slice.
"""
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from . import geometry
from .autodiff import Var
from .geometry import Box3D
from .nn import Linear, SparseConv
from .sparse import KernelMap, SparseTensor, build_kernel_map
from .voxelize import ClassSizeTable, PointCloud, quantize

__all__ = [
    "VoteOutput", "VoxelTargets", "Proposal",
    "assign_targets", "tau_schedule", "group_slices", "class_aware_group",
    "centerness_targets", "encode_stage1_box", "decode_stage1_boxes",
    "filter_nms", "VoteHead", "SemanticHead", "ProposalHead", "identity_kmap",
]


@dataclass
class VoteOutput:
    """Per-voxel spatial offsets (meters) and feature offsets."""

    delta_x: np.ndarray
    delta_f: np.ndarray


@dataclass
class VoxelTargets:
    """Per-voxel supervision: assigned class (-1 background), metric offset
    from voxel center to the assigned box center, and the box index."""

    class_id: np.ndarray
    center_offset: np.ndarray
    box_id: np.ndarray


@dataclass
class Proposal:
    box: Box3D
    score: float
    class_id: int
    centerness: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


# ---------------------------------------------------------------------------
# Target assignment
# ---------------------------------------------------------------------------


def assign_targets(voxels: SparseTensor, boxes: List[Box3D], class_ids) -> VoxelTargets:
    """Assign each voxel the minimum-volume ground-truth box containing its
    metric center; ties resolve to the lowest box index."""
    n = voxels.n_voxels
    out_cls = np.full(n, -1, dtype=np.int64)
    out_box = np.full(n, -1, dtype=np.int64)
    out_off = np.zeros((n, 3))
    if n == 0 or len(boxes) == 0:
        return VoxelTargets(out_cls, out_off, out_box)
    centers = voxels.centers()
    order = sorted(range(len(boxes)), key=lambda j: (geometry.volume(boxes[j]), j))
    unassigned = np.ones(n, dtype=bool)
    for j in order:
        if not unassigned.any():
            break
        hit = unassigned & geometry.contains_points(boxes[j], centers)
        if hit.any():
            out_box[hit] = j
            out_cls[hit] = class_ids[j]
            out_off[hit] = boxes[j].center - centers[hit]
            unassigned &= ~hit
    return VoxelTargets(out_cls, out_off, out_box)


# ---------------------------------------------------------------------------
# Semantic threshold schedule
# ---------------------------------------------------------------------------

_TAU_PERIODS = {"scannet": 10, "sunrgbd": 4}


def tau_schedule(epoch: int, dataset_preset: str = "scannet",
                 start=0.15, step=0.02, floor=0.05, period: Optional[int] = None) -> float:
    """Semantic threshold: starts at 0.15 and drops by 0.02 every schedule
    period (10 epochs for the scannet preset, 4 for sunrgbd), floored at 0.05."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if period is None:
        if dataset_preset not in _TAU_PERIODS:
            raise ValueError(f"unknown dataset preset {dataset_preset!r}")
        period = _TAU_PERIODS[dataset_preset]
    return max(floor, start - step * (epoch // period))


# ---------------------------------------------------------------------------
# Class-aware local grouping
# ---------------------------------------------------------------------------


def group_slices(scores, tau: float) -> List[np.ndarray]:
    """Vote indices with score > tau per class; one vote may appear in
    several slices."""
    scores = np.asarray(scores)
    return [np.nonzero(scores[:, j] > tau)[0] for j in range(scores.shape[1])]


def class_aware_group(votes: PointCloud, scores, tau: float, alpha: float,
                      sizes: ClassSizeTable, k_a: int, per_class_weights) -> List[SparseTensor]:
    """Slice votes by semantic score, re-voxelize each slice at alpha * d_j,
    and aggregate with the class's own submanifold convolution.

    per_class_weights: indexed collection of ConvWeights, one per class,
    all of identical shape.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie strictly between 0 and 1")
    from .sparse import sparse_conv_forward

    feats = votes.feature_matrix()
    out = []
    for j, idx in enumerate(group_slices(scores, tau)):
        cell = alpha * sizes[j]
        if len(idx) == 0:
            out.append(SparseTensor.empty(per_class_weights[j].c_out, voxel_size=cell))
            continue
        _, uniq, inverse = quantize(votes.positions[idx], cell)
        sums = np.zeros((len(uniq), feats.shape[1]), dtype=np.float64)
        np.add.at(sums, inverse, feats[idx])
        counts = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)
        vox = SparseTensor(uniq, sums / counts[:, None], 1, cell)
        agg, _ = sparse_conv_forward(vox, per_class_weights[j], vox.coords, k_a)
        out.append(agg)
    return out


# ---------------------------------------------------------------------------
# Box parameterization of the proposal head
# ---------------------------------------------------------------------------
# Per-voxel regression output, 8 channels: center offset in units of the
# class grid cell, log extent ratios against the class prior d_j, and the
# heading as (sin, cos). A zero vector decodes to the prior-sized box at
# the emitting voxel with yaw 0.


def encode_stage1_box(box: Box3D, voxel_center, class_id: int,
                      sizes: ClassSizeTable, alpha: float) -> np.ndarray:
    cell = alpha * sizes[class_id]
    prior = sizes[class_id]
    delta = (box.center - np.asarray(voxel_center)) / cell
    logs = np.log(box.dims / prior)
    return np.concatenate([delta, logs, [math.sin(box.theta), math.cos(box.theta)]])


def decode_stage1_boxes(reg, voxel_centers, class_id: int,
                        sizes: ClassSizeTable, alpha: float) -> np.ndarray:
    """Decode (M, 8) regression rows to (M, 7) box parameter rows."""
    reg = np.atleast_2d(np.asarray(reg))
    cell = alpha * sizes[class_id]
    prior = sizes[class_id]
    centers = np.atleast_2d(voxel_centers) + reg[:, 0:3] * cell
    dims = prior * np.exp(reg[:, 3:6])
    theta = np.arctan2(reg[:, 6], reg[:, 7])
    return np.concatenate([centers, dims, theta[:, None]], axis=1)


def centerness_targets(boxes: List[Box3D], points) -> np.ndarray:
    """Cube root of the product over axes of min(face-, face+)/max(face-, face+)
    in each box's canonical frame, clamped to [0, 1]; 1 at the center, 0 on
    any face. boxes[i] pairs with points[i]."""
    points = np.atleast_2d(points)
    out = np.zeros(len(points))
    for i, (b, p) in enumerate(zip(boxes, points)):
        d = p - b.center
        c, s = math.cos(b.theta), math.sin(b.theta)
        q = np.array([c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]])
        half = 0.5 * b.dims
        lo = half + q
        hi = half - q
        ratios = np.minimum(lo, hi) / np.maximum(np.maximum(lo, hi), 1e-12)
        prod = np.clip(ratios, 0.0, 1.0).prod()
        out[i] = np.cbrt(prod)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Heads (parameterized modules; pure-array speced surfaces wrap these)
# ---------------------------------------------------------------------------


def identity_kmap(n: int) -> KernelMap:
    """The 1^3 kernel map on a fixed coordinate set (out rows = in rows)."""
    idx = np.arange(n, dtype=np.int32)
    return KernelMap(idx, idx, np.zeros(n, dtype=np.int32), 1, n, n)


class VoteHead:
    """Shared single-hidden-layer perceptron emitting (delta_x, delta_f)."""

    def __init__(self, store, name, c, hidden, rng):
        self.fc1 = Linear(store, f"{name}.fc1", c, hidden, rng)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, 3 + c, rng)
        self.c = c

    def __call__(self, feats: Var):
        h = ad.relu(self.fc1(feats))
        out = self.fc2(h)
        return ad.take_cols(out, 0, 3), ad.take_cols(out, 3, 3 + self.c)


class SemanticHead:
    """One-layer perceptron producing per-class sigmoid scores."""

    def __init__(self, store, name, c, n_class, rng):
        self.fc = Linear(store, f"{name}.fc", c, n_class, rng)

    def logits(self, feats: Var) -> Var:
        return self.fc(feats)

    def __call__(self, feats: Var) -> Var:
        return ad.sigmoid(self.logits(feats))


class ProposalHead:
    """Three parallel 1^3 sparse convolutions shared across all class
    tensors: classification logits, box regression, and centerness."""

    def __init__(self, store, name, c, n_class, rng):
        self.cls = SparseConv(store, f"{name}.cls", c, n_class, 1, rng, init="zeros")
        self.reg = SparseConv(store, f"{name}.reg", c, 8, 1, rng, init="zeros")
        self.cntr = SparseConv(store, f"{name}.cntr", c, 1, 1, rng, init="zeros")

    def __call__(self, feats: Var):
        kmap = identity_kmap(feats.data.shape[0])
        return self.cls(feats, kmap), self.reg(feats, kmap), self.cntr(feats, kmap)


def head_to_proposals(cls_logits, reg, cntr_logits, voxel_centers, class_id: int,
                      sizes: ClassSizeTable, alpha: float) -> List[Proposal]:
    """Decode one class tensor's head outputs into Proposal records. The
    class score is the tensor's own class column."""
    cls_logits = np.atleast_2d(cls_logits)
    if cls_logits.shape[0] == 0:
        return []
    p_cls = 1.0 / (1.0 + np.exp(-cls_logits[:, class_id]))
    p_cntr = 1.0 / (1.0 + np.exp(-np.asarray(cntr_logits).reshape(-1)))
    boxes = decode_stage1_boxes(reg, voxel_centers, class_id, sizes, alpha)
    out = []
    for row, pc, pn in zip(boxes, p_cls, p_cntr):
        out.append(Proposal(Box3D(*row), float(pc * pn), class_id, float(pn)))
    return out


def filter_nms(proposals: List[Proposal], score_min: float, iou_thresh: float) -> List[Proposal]:
    """Drop low scores, then greedy descending-score suppression under
    rotated IoU; survivors have pairwise IoU <= iou_thresh."""
    if not 0.0 <= iou_thresh <= 1.0:
        raise ValueError("iou_thresh must lie in [0, 1]")
    cand = [p for p in proposals if p.score >= score_min]
    if not cand:
        return []
    order = sorted(range(len(cand)), key=lambda i: (-cand[i].score, i))
    arr = geometry.boxes_to_array([cand[i].box for i in order])
    iou = geometry.iou_matrix(arr, arr)
    kept: List[int] = []
    for i in range(len(order)):
        if all(iou[i, j] <= iou_thresh for j in kept):
            kept.append(i)
    return [cand[order[i]] for i in kept]
