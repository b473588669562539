"""Stage II: RoI-guided grid sampling, sparse abstraction blocks, canonical
transform, the two-block RoI pooling stack, and the refinement head.

Grid points use the cell-center convention ((2i+1)/(2G) along each canonical
axis), so a 1x1x1 resolution lands exactly on the proposal center. Block 1
runs once on the merged grid of all proposals; block 2 re-derives sampling
per proposal in its canonical frame, on a grid of cell size dims/G1 so the
final kernel window spans the whole box.
"""
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .geometry import Box3D, iou_matrix, wrap_angle
from .nn import Linear
from .sparse import build_kernel_map
from .voxelize import quantize

__all__ = [
    "GridSample", "sample_roi_grid", "canonical_transform", "sparse_abstraction",
    "roiconv_pool", "select_training_proposals", "encode_residual",
    "decode_residual", "RefineHead", "RoiConvParams",
]


@dataclass
class GridSample:
    """Unique quantized grid points plus, per point, the generating proposal
    indices in first-seen order (a proposal may appear twice if two of its
    grid points quantize to the same voxel)."""

    points: np.ndarray
    owners: List[List[int]]


def _grid_fractions(g: int) -> np.ndarray:
    return (2.0 * np.arange(g) + 1.0) / (2.0 * g) - 0.5


def roi_grid_points_metric(box: Box3D, resolution) -> np.ndarray:
    """G_x*G_y*G_z metric points uniformly filling the oriented box interior."""
    gx, gy, gz = resolution
    ux = _grid_fractions(gx) * box.w
    uy = _grid_fractions(gy) * box.l
    uz = _grid_fractions(gz) * box.h
    local = np.stack(np.meshgrid(ux, uy, uz, indexing="ij"), axis=-1).reshape(-1, 3)
    c, s = math.cos(box.theta), math.sin(box.theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + box.center


def sample_roi_grid(proposals, resolution, voxel_size, stride: int = 1) -> GridSample:
    """Quantized proposal grid points with duplicates merged, owners kept.

    proposals may be Proposal records or bare Box3D boxes.
    """
    if any(g < 1 for g in resolution):
        raise ValueError(f"resolution components must be >= 1, got {resolution}")
    vs = np.asarray(voxel_size, dtype=np.float64).reshape(3)
    index: dict = {}
    points: List[tuple] = []
    owners: List[List[int]] = []
    for m, p in enumerate(proposals):
        box = p.box if hasattr(p, "box") else p
        pts = roi_grid_points_metric(box, resolution)
        cells = np.floor(pts / vs).astype(np.int64)
        coords = (cells // stride) * stride
        for key in map(tuple, coords.tolist()):
            at = index.get(key)
            if at is None:
                index[key] = len(points)
                points.append(key)
                owners.append([m])
            else:
                owners[at].append(m)
    return GridSample(np.array(points, dtype=np.int32).reshape(-1, 3), owners)


def canonical_transform(points, box: Box3D) -> np.ndarray:
    """Subtract the proposal center and rotate by -theta about the vertical
    axis; the proposal center maps to the origin."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64)) - box.center
    c, s = math.cos(box.theta), math.sin(box.theta)
    out = np.empty_like(p)
    out[:, 0] = c * p[:, 0] + s * p[:, 1]
    out[:, 1] = -s * p[:, 0] + c * p[:, 1]
    out[:, 2] = p[:, 2]
    return out


def sparse_abstraction(coords, feats: Var, stride, voxel_size, proposals,
                       resolution, kernel_size, kernel: Var, bias):
    """One abstraction block: RoI grid sampling, then a shared sparse
    convolution centered on every sampled point, empty rows dropped.

    Returns (out_coords, out_feats Var, grid_sample, keep_mask).
    """
    if kernel_size % 2 == 0:
        raise ValueError("kernel_size must be odd")
    gs = sample_roi_grid(proposals, resolution, voxel_size, stride)
    if len(gs.points) == 0 or feats.data.shape[0] == 0:
        keep = np.zeros(len(gs.points), dtype=bool)
        c_out = kernel.data.shape[2]
        return gs.points[:0], Var(np.zeros((0, c_out), dtype=feats.data.dtype)), gs, keep
    kmap = build_kernel_map(coords, gs.points, kernel_size, dilation=stride)
    full = ad.sparse_conv(feats, kernel, bias, kmap)
    keep = kmap.covered_out_mask()
    kept_rows = np.nonzero(keep)[0]
    return gs.points[keep], ad.take_rows(full, kept_rows), gs, keep


@dataclass
class RoiConvParams:
    """Weights of the two abstraction blocks (shared across proposals).

    post1, when set, is applied to the block-1 feature rows before the
    canonical re-sampling (the detector uses normalization + ReLU there,
    matching its convolution convention elsewhere)."""

    kernel1: Var
    bias1: Optional[Var]
    kernel2: Var
    bias2: Optional[Var]
    resolution1: tuple = (7, 7, 7)
    resolution2: tuple = (1, 1, 1)
    kernel_size1: int = 5
    kernel_size2: int = 7
    post1: Optional[object] = None


def roiconv_pool(coords, feats: Var, stride, voxel_size, proposals,
                 params: RoiConvParams):
    """Two-block pooling producing one feature row per proposal.

    Block 1 abstracts backbone voxels onto the merged proposal grids; block 2
    re-samples each proposal at resolution2 in its canonical frame and
    aggregates its surviving block-1 voxels with the final kernel. Proposals
    whose pooled set is empty yield a zero row and a hollow flag.

    Returns (roi_feats Var (P, C2), hollow bool array).
    """
    if len(proposals) == 0:
        raise ValueError("roiconv_pool requires at least one proposal")
    c2 = params.kernel2.data.shape[2]
    dtype = feats.data.dtype
    q1_coords, q1_feats, gs, keep = sparse_abstraction(
        coords, feats, stride, voxel_size, proposals,
        params.resolution1, params.kernel_size1, params.kernel1, params.bias1)
    if params.post1 is not None and q1_feats.data.shape[0]:
        q1_feats = params.post1(q1_feats)

    members: List[List[int]] = [[] for _ in proposals]
    kept_owner_lists = [own for own, k in zip(gs.owners, keep) if k]
    for row, own in enumerate(kept_owner_lists):
        for m in dict.fromkeys(own):
            members[m].append(row)

    vs = np.asarray(voxel_size, dtype=np.float64).reshape(3)
    q1_centers = (q1_coords.astype(np.float64) + 0.5 * stride) * vs

    rows = []
    hollow = np.zeros(len(proposals), dtype=bool)
    zero_row = Var(np.zeros((1, c2), dtype=dtype))
    for m, p in enumerate(proposals):
        box = p.box if hasattr(p, "box") else p
        if not members[m]:
            hollow[m] = True
            rows.append(zero_row)
            continue
        idx = np.asarray(members[m], dtype=np.int64)
        local = canonical_transform(q1_centers[idx], box)
        cell = box.dims / np.maximum(np.asarray(params.resolution1, dtype=np.float64), 1.0)
        _, uniq, inverse = quantize(local, cell)
        merged = ad.segment_mean(ad.take_rows(q1_feats, idx), inverse, len(uniq))
        # resolution2 grid re-derived in the canonical frame; the origin for (1,1,1)
        out_pts = np.floor(
            roi_grid_points_metric(
                Box3D(0.0, 0.0, 0.0, box.w, box.l, box.h, 0.0), params.resolution2
            ) / cell
        ).astype(np.int32)
        uniq_pts = np.unique(out_pts, axis=0)
        kmap = build_kernel_map(uniq, uniq_pts, params.kernel_size2, dilation=1)
        if kmap.n_triples == 0:
            hollow[m] = True
            rows.append(zero_row)
            continue
        full = ad.sparse_conv(merged, params.kernel2, params.bias2, kmap)
        covered = np.nonzero(kmap.covered_out_mask())[0]
        pooled = ad.take_rows(full, covered).mean(axis=0).reshape(1, c2)
        rows.append(pooled)
    return ad.concat_rows(rows), hollow


def select_training_proposals(proposals, gt_boxes, iou_min: float = 0.3, cap: int = 128):
    """Keep proposals whose best rotated IoU against ground truth exceeds
    iou_min, capped by descending IoU. Returns (kept proposals, matched gt
    indices, their IoUs)."""
    if len(proposals) == 0 or len(gt_boxes) == 0:
        return [], np.empty(0, np.int64), np.empty(0)
    boxes = [p.box if hasattr(p, "box") else p for p in proposals]
    iou = iou_matrix(boxes, gt_boxes)
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(len(boxes)), best_gt]
    order = sorted(np.nonzero(best_iou > iou_min)[0], key=lambda i: (-best_iou[i], i))
    order = order[:cap]
    return ([proposals[i] for i in order],
            best_gt[order].astype(np.int64),
            best_iou[order])


# ---------------------------------------------------------------------------
# Residual encoding of the refinement targets
# ---------------------------------------------------------------------------
# t = ((xg-x)/d, (yg-y)/d, (zg-z)/d, log hg/h, log wg/w, log lg/l,
#      sin dtheta, cos dtheta), d = sqrt(h^2 + w^2 + l^2) of the proposal.


def encode_residual(proposal: Box3D, gt: Box3D) -> np.ndarray:
    d = math.sqrt(proposal.h ** 2 + proposal.w ** 2 + proposal.l ** 2)
    dtheta = gt.theta - proposal.theta
    return np.array([
        (gt.cx - proposal.cx) / d,
        (gt.cy - proposal.cy) / d,
        (gt.cz - proposal.cz) / d,
        math.log(gt.h / proposal.h),
        math.log(gt.w / proposal.w),
        math.log(gt.l / proposal.l),
        math.sin(dtheta),
        math.cos(dtheta),
    ])


def decode_residual(t, proposal: Box3D) -> Box3D:
    t = np.asarray(t, dtype=np.float64).reshape(8)
    d = math.sqrt(proposal.h ** 2 + proposal.w ** 2 + proposal.l ** 2)
    dtheta = math.atan2(t[6], t[7])
    return Box3D(
        proposal.cx + d * t[0],
        proposal.cy + d * t[1],
        proposal.cz + d * t[2],
        proposal.w * math.exp(t[4]),
        proposal.l * math.exp(t[5]),
        proposal.h * math.exp(t[3]),
        wrap_angle(proposal.theta + dtheta),
    )


class RefineHead:
    """Normalization, then a two-layer perceptron from pooled RoI features
    to the 8 residuals; the output layer starts at zero so refinement
    begins at the identity. Input normalization matters: pooled features
    arrive at whatever scale the sparse occupancy left them."""

    def __init__(self, store, name, c_in, hidden, rng, norm="batch"):
        from .nn import Norm

        self.norm = Norm(store, f"{name}.norm", c_in, norm)
        self.fc1 = Linear(store, f"{name}.fc1", c_in, hidden, rng)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, 8, rng, init="zeros")

    def __call__(self, roi: Var, training: bool = False) -> Var:
        return self.fc2(ad.relu(self.fc1(self.norm(roi, training))))
