"""Pure-numpy implementations of the hot kernels.

This module mirrors the compiled extension (`_ckern`) function for function.
Coordinates are packed into 64-bit keys (three 21-bit biased fields) and
neighbor discovery runs as one vectorized sorted-array lookup per kernel
offset, so the fallback stays usable at desk scale.
"""
import numpy as np

# Each signed component must fit a 21-bit biased field.
COORD_BOUND = 1 << 20


def pack_coords(coords):
    """Pack integer (N, 3) coordinates into unique int64 keys.

    Raises ValueError if any component falls outside the packable range
    [-2**20, 2**20).
    """
    c = np.asarray(coords, dtype=np.int64)
    if c.ndim != 2 or c.shape[1] != 3:
        raise ValueError(f"expected (N, 3) coordinates, got shape {c.shape}")
    if c.size and (c.min() < -COORD_BOUND or c.max() >= COORD_BOUND):
        raise ValueError("coordinate outside packable range [-2**20, 2**20)")
    u = c + COORD_BOUND
    return (u[:, 0] << 42) | (u[:, 1] << 21) | u[:, 2]


def _pack_unchecked(c):
    # caller guarantees range; used for candidate probes
    u = c + COORD_BOUND
    return (u[:, 0] << 42) | (u[:, 1] << 21) | u[:, 2]


def kernel_offsets(kernel_size):
    """The k^3 integer offsets in {-(k-1)/2 .. (k-1)/2}^3, lexicographic
    with z varying fastest. Offset index d recovers the displacement."""
    r = kernel_size // 2
    axis = np.arange(-r, r + 1, dtype=np.int64)
    ox, oy, oz = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([ox.ravel(), oy.ravel(), oz.ravel()], axis=1)


def coord_lookup(table_coords, query_coords):
    """Row index of each query coordinate in table_coords, -1 if absent."""
    table_coords = np.asarray(table_coords, dtype=np.int64)
    query_coords = np.asarray(query_coords, dtype=np.int64)
    out = np.full(len(query_coords), -1, dtype=np.int32)
    if len(table_coords) == 0 or len(query_coords) == 0:
        return out
    keys = pack_coords(table_coords)
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    in_range = np.all(
        (query_coords >= -COORD_BOUND) & (query_coords < COORD_BOUND), axis=1
    )
    qk = _pack_unchecked(np.where(in_range[:, None], query_coords, 0))
    pos = np.searchsorted(sk, qk)
    pos_c = np.minimum(pos, len(sk) - 1)
    hit = in_range & (pos < len(sk)) & (sk[pos_c] == qk)
    out[hit] = order[pos_c[hit]].astype(np.int32)
    return out


def kmap_build(in_coords, out_coords, kernel_size, dilation):
    """Enumerate (in_idx, out_idx, offset_idx) triples for a sparse conv.

    A triple (i, o, d) is emitted iff
        in_coords[i] == out_coords[o] + dilation * offset(d).

    Returns three int32 arrays sorted offset-major, output-index ascending
    within each offset bucket (a deterministic order the gather-scatter
    path relies on: within one bucket both in and out indices are unique).
    """
    in_coords = np.asarray(in_coords, dtype=np.int64)
    out_coords = np.asarray(out_coords, dtype=np.int64)
    k3 = kernel_size ** 3
    empty = (np.empty(0, np.int32),) * 3
    if len(in_coords) == 0 or len(out_coords) == 0:
        return empty

    keys = pack_coords(in_coords)
    order = np.argsort(keys, kind="stable").astype(np.int32)
    sk = keys[order]
    offsets = kernel_offsets(kernel_size) * int(dilation)

    ins, outs, ds = [], [], []
    n = len(sk)
    for d in range(k3):
        cand = out_coords + offsets[d]
        in_range = np.all((cand >= -COORD_BOUND) & (cand < COORD_BOUND), axis=1)
        ck = _pack_unchecked(np.where(in_range[:, None], cand, 0))
        pos = np.searchsorted(sk, ck)
        pos_c = np.minimum(pos, n - 1)
        hit = in_range & (pos < n) & (sk[pos_c] == ck)
        o_idx = np.nonzero(hit)[0]
        if len(o_idx):
            ins.append(order[pos_c[o_idx]])
            outs.append(o_idx.astype(np.int32))
            ds.append(np.full(len(o_idx), d, dtype=np.int32))
    if not ins:
        return empty
    return np.concatenate(ins), np.concatenate(outs), np.concatenate(ds)


# ---------------------------------------------------------------------------
# Rotated-box IoU. Scalar Sutherland-Hodgman clipping of two yaw-rotated
# rectangles; the compiled extension reimplements the identical arithmetic.
# ---------------------------------------------------------------------------

AREA_EPS = 1e-12


def _rect_corners_2d(cx, cy, w, l, theta):
    import math

    c, s = math.cos(theta), math.sin(theta)
    hw, hl = 0.5 * w, 0.5 * l
    pts = []
    for dx, dy in ((-hw, -hl), (hw, -hl), (hw, hl), (-hw, hl)):
        pts.append((cx + c * dx - s * dy, cy + s * dx + c * dy))
    return pts


def rect_intersection_area(cx1, cy1, w1, l1, t1, cx2, cy2, w2, l2, t2):
    """Intersection area of two rotated rectangles in the plane."""
    poly = _rect_corners_2d(cx1, cy1, w1, l1, t1)
    clip = _rect_corners_2d(cx2, cy2, w2, l2, t2)
    for j in range(4):
        ax, ay = clip[j]
        bx, by = clip[(j + 1) % 4]
        ex, ey = bx - ax, by - ay
        out = []
        m = len(poly)
        for i in range(m):
            px, py = poly[i]
            qx, qy = poly[(i + 1) % m]
            # signed area sign: inside = left of directed clip edge (CCW rect)
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            if sp >= 0.0:
                out.append((px, py))
            if (sp > 0.0 and sq < 0.0) or (sp < 0.0 and sq > 0.0):
                t = sp / (sp - sq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
        poly = out
        if not poly:
            return 0.0
    area = 0.0
    m = len(poly)
    for i in range(m):
        px, py = poly[i]
        qx, qy = poly[(i + 1) % m]
        area += px * qy - qx * py
    area = 0.5 * abs(area)
    return area if area > AREA_EPS else 0.0


def iou3d_single(a, b):
    """IoU of two 7-parameter boxes (cx, cy, cz, w, l, h, theta)."""
    zlo = max(a[2] - 0.5 * a[5], b[2] - 0.5 * b[5])
    zhi = min(a[2] + 0.5 * a[5], b[2] + 0.5 * b[5])
    dz = zhi - zlo
    if dz <= 0.0:
        return 0.0
    area = rect_intersection_area(
        a[0], a[1], a[3], a[4], a[6], b[0], b[1], b[3], b[4], b[6]
    )
    inter = area * dz
    if inter <= 0.0:
        return 0.0
    union = a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter
    return inter / union


def iou3d_pairs(boxes_a, boxes_b):
    """Pairwise IoU matrix between (N, 7) and (M, 7) box arrays."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64)
    boxes_b = np.asarray(boxes_b, dtype=np.float64)
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = iou3d_single(a, b)
    return out
