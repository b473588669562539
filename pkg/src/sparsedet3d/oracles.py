"""Independent brute-force reference implementations.

Everything here is deliberately naive and structured differently from the
fast paths it checks: dense-grid arithmetic instead of kernel maps, double
loops instead of hashing, Monte-Carlo volumes instead of polygon clipping.
Tests freeze expected values computed by these oracles; the `oracles` CLI
subcommand re-runs the suites end to end.
"""
import math

import numpy as np

from . import geometry
from .geometry import Box3D
from .sparse import kernel_offsets


def brute_kernel_map(in_coords, out_coords, kernel_size, dilation=1):
    """All (i, o, d) with in[i] == out[o] + dilation*offset(d), via a double
    loop over coordinate pairs. Returns a set of triples."""
    offs = kernel_offsets(kernel_size) * dilation
    lookup = {tuple(map(int, off)): d for d, off in enumerate(offs)}
    triples = set()
    for i, ic in enumerate(np.asarray(in_coords, dtype=np.int64)):
        for o, oc in enumerate(np.asarray(out_coords, dtype=np.int64)):
            d = lookup.get(tuple(map(int, ic - oc)))
            if d is not None:
                triples.add((i, o, d))
    return triples


def dense_conv_oracle(in_coords, feats, kernel, out_coords, kernel_size, dilation=1, bias=None):
    """Sparse convolution evaluated through a dense grid.

    Scatters features onto a zero-filled dense volume, then accumulates
    kernel[d]^T . grid[out + dilation*offset(d)] per offset, entirely
    without kernel maps or hashing.
    """
    in_coords = np.asarray(in_coords, dtype=np.int64)
    out_coords = np.asarray(out_coords, dtype=np.int64)
    feats = np.asarray(feats)
    r = (kernel_size // 2) * dilation
    all_c = np.concatenate([in_coords, out_coords], axis=0)
    lo = all_c.min(axis=0) - r
    hi = all_c.max(axis=0) + r + 1
    shape = tuple((hi - lo).tolist())
    c_in = feats.shape[1]
    c_out = kernel.shape[2]
    grid = np.zeros(shape + (c_in,), dtype=feats.dtype)
    gi = in_coords - lo
    grid[gi[:, 0], gi[:, 1], gi[:, 2]] = feats
    out = np.zeros((len(out_coords), c_out), dtype=feats.dtype)
    offs = kernel_offsets(kernel_size) * dilation
    go = out_coords - lo
    for d, off in enumerate(offs):
        src = go + off
        vals = grid[src[:, 0], src[:, 1], src[:, 2]]
        out += vals @ kernel[d]
    if bias is not None:
        out += bias
    return out


def mc_iou(a: Box3D, b: Box3D, n_samples=1_000_000, rng=None):
    """Monte-Carlo IoU: sample the joint AABB, count membership."""
    rng = rng or np.random.default_rng(0)
    pts = np.concatenate([geometry.corners(a), geometry.corners(b)], axis=0)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    sample = rng.uniform(lo, hi, size=(n_samples, 3))
    in_a = geometry.contains_points(a, sample)
    in_b = geometry.contains_points(b, sample)
    n_union = np.count_nonzero(in_a | in_b)
    if n_union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / n_union


def brute_nms(boxes, scores, iou_thresh):
    """Reference greedy suppression: repeatedly take the highest-scoring
    remaining box and discard everything overlapping it above threshold."""
    remaining = list(range(len(boxes)))
    remaining.sort(key=lambda i: (-scores[i], i))
    kept = []
    while remaining:
        best = remaining.pop(0)
        kept.append(best)
        still = []
        for i in remaining:
            if geometry.iou3d(boxes[best], boxes[i]) <= iou_thresh:
                still.append(i)
        remaining = still
    return kept


def brute_assign(points, boxes):
    """Minimum-volume containing box per point (-1 when uncovered), by an
    explicit scan over every (point, box) pair."""
    points = np.atleast_2d(points)
    out = np.full(len(points), -1, dtype=np.int64)
    for i, p in enumerate(points):
        best, best_vol = -1, math.inf
        for j, b in enumerate(boxes):
            if geometry.contains(b, p):
                v = geometry.volume(b)
                if v < best_vol:
                    best, best_vol = j, v
        out[i] = best
    return out


def reference_average_precision(scores, is_tp, n_gt):
    """Area under the precision envelope over recall, computed pointwise:
    at each recall level take the max precision at that recall or beyond."""
    if n_gt == 0:
        return float("nan")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    tp = np.cumsum([1 if is_tp[i] else 0 for i in order])
    fp = np.cumsum([0 if is_tp[i] else 1 for i in order])
    recalls = tp / n_gt
    precisions = tp / np.maximum(tp + fp, 1)
    ap = 0.0
    prev_r = 0.0
    for k in range(len(order)):
        if not is_tp[order[k]]:
            continue
        r = recalls[k]
        p_max = max(precisions[j] for j in range(k, len(order)))
        ap += (r - prev_r) * p_max
        prev_r = r
    return ap


def fd_gradient(fn, x, h=1e-6):
    """Central finite differences of a scalar function of an ndarray."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return np.abs(a - b).max(initial=0.0) / denom
