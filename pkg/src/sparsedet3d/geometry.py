"""Oriented 3D box algebra: containment, volume, rotated IoU, corners.

Boxes are 7-DoF: center (cx, cy, cz), extents (w, l, h) along the box's
own x/y/z axes, and yaw theta about the vertical (z) axis, wrapped to
(-pi, pi]. Planar intersection uses convex polygon clipping; the vertical
extent contributes a simple interval overlap.

For the IoU training loss, `iou3d_grad` re-runs the identical clipping
arithmetic on dual numbers carrying d/d(box_a) partials, which yields the
analytic gradient of whichever smooth branch the clipping selected. Inputs
that sit on a branch boundary are flagged and handled by the caller with
central finite differences.
"""
import math
from dataclasses import dataclass

import numpy as np

from ._kernels import iou3d_pairs as _iou3d_pairs
from ._kernels import iou3d_single as _iou3d_single

__all__ = [
    "Box3D", "wrap_angle", "volume", "corners", "contains",
    "contains_points", "iou3d", "iou_matrix", "boxes_to_array",
    "boxes_from_array", "iou3d_grad",
]

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    return math.pi - (math.pi - theta) % TWO_PI


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    w: float
    l: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got {(self.w, self.l, self.h)}")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.w, self.l, self.h])


def volume(box: Box3D) -> float:
    return box.w * box.l * box.h


_CORNER_SIGNS = np.array(
    [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
    dtype=np.float64,
)


def corners(box: Box3D) -> np.ndarray:
    """The 8 corners, ordered by sign of (x, y, z) half-extents with z
    varying fastest: (---), (--+), (-+-), ... (+++)."""
    half = 0.5 * _CORNER_SIGNS * [box.w, box.l, box.h]
    c, s = math.cos(box.theta), math.sin(box.theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return half @ rot.T + [box.cx, box.cy, box.cz]


def contains_points(box: Box3D, points) -> np.ndarray:
    """Closed-boundary containment test for an (N, 3) array of points."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    dx = p[:, 0] - box.cx
    dy = p[:, 1] - box.cy
    dz = p[:, 2] - box.cz
    c, s = math.cos(box.theta), math.sin(box.theta)
    qx = c * dx + s * dy
    qy = -s * dx + c * dy
    return (
        (np.abs(qx) <= 0.5 * box.w)
        & (np.abs(qy) <= 0.5 * box.l)
        & (np.abs(dz) <= 0.5 * box.h)
    )


def contains(box: Box3D, point) -> bool:
    return bool(contains_points(box, np.asarray(point).reshape(1, 3))[0])


def boxes_to_array(boxes) -> np.ndarray:
    out = np.empty((len(boxes), 7))
    for i, b in enumerate(boxes):
        out[i] = (b.cx, b.cy, b.cz, b.w, b.l, b.h, b.theta)
    return out


def boxes_from_array(arr) -> list:
    return [Box3D(*row) for row in np.asarray(arr, dtype=np.float64)]


def iou3d(a: Box3D, b: Box3D) -> float:
    """Rotated 3D IoU: planar polygon-clipping area times vertical overlap."""
    return float(
        _iou3d_single(
            (a.cx, a.cy, a.cz, a.w, a.l, a.h, a.theta),
            (b.cx, b.cy, b.cz, b.w, b.l, b.h, b.theta),
        )
    )


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise IoU between two box collections (lists of Box3D or (N, 7))."""
    arr_a = boxes_a if isinstance(boxes_a, np.ndarray) else boxes_to_array(boxes_a)
    arr_b = boxes_b if isinstance(boxes_b, np.ndarray) else boxes_to_array(boxes_b)
    return np.asarray(_iou3d_pairs(arr_a, arr_b))


# ---------------------------------------------------------------------------
# Dual-number gradient of the IoU with respect to the first box's 7 params.
# ---------------------------------------------------------------------------


class _Dual:
    """Scalar forward-mode dual carrying a 7-vector of partials."""

    __slots__ = ("v", "g")

    def __init__(self, v, g):
        self.v = v
        self.g = g

    def __add__(self, o):
        if isinstance(o, _Dual):
            return _Dual(self.v + o.v, self.g + o.g)
        return _Dual(self.v + o, self.g)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, _Dual):
            return _Dual(self.v - o.v, self.g - o.g)
        return _Dual(self.v - o, self.g)

    def __rsub__(self, o):
        return _Dual(o - self.v, -self.g)

    def __mul__(self, o):
        if isinstance(o, _Dual):
            return _Dual(self.v * o.v, self.g * o.v + o.g * self.v)
        return _Dual(self.v * o, self.g * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, _Dual):
            return _Dual(self.v / o.v, (self.g * o.v - o.g * self.v) / (o.v * o.v))
        return _Dual(self.v / o, self.g / o)

    def __rtruediv__(self, o):
        return _Dual(o / self.v, -o * self.g / (self.v * self.v))

    def __neg__(self):
        return _Dual(-self.v, -self.g)


def _val(x):
    return x.v if isinstance(x, _Dual) else x


def _sin(x):
    if isinstance(x, _Dual):
        return _Dual(math.sin(x.v), math.cos(x.v) * x.g)
    return math.sin(x)


def _cos(x):
    if isinstance(x, _Dual):
        return _Dual(math.cos(x.v), -math.sin(x.v) * x.g)
    return math.cos(x)


_BRANCH_EPS = 1e-12


def _generic_rect_corners(cx, cy, w, l, theta):
    c, s = _cos(theta), _sin(theta)
    hw, hl = 0.5 * w, 0.5 * l
    return [
        (cx + c * dx - s * dy, cy + s * dx + c * dy)
        for dx, dy in ((-hw, -hl), (hw, -hl), (hw, hl), (-hw, hl))
    ]


def _generic_iou3d(a, b, flags):
    """Same algorithm as the float path, evaluated on scalar-likes.

    `flags` is a one-element list; flags[0] is set True whenever a branch
    decision sits within _BRANCH_EPS of its boundary (the taken-branch
    derivative then may not be the two-sided derivative).
    """
    zlo_a, zhi_a = a[2] - 0.5 * a[5], a[2] + 0.5 * a[5]
    zlo_b, zhi_b = b[2] - 0.5 * b[5], b[2] + 0.5 * b[5]
    zlo = zlo_a if _val(zlo_a) >= _val(zlo_b) else zlo_b
    zhi = zhi_a if _val(zhi_a) <= _val(zhi_b) else zhi_b
    dz = zhi - zlo
    if abs(_val(zlo_a) - _val(zlo_b)) < _BRANCH_EPS or abs(_val(zhi_a) - _val(zhi_b)) < _BRANCH_EPS:
        flags[0] = True
    if _val(dz) <= 0.0:
        flags[0] = flags[0] or _val(dz) > -_BRANCH_EPS
        return 0.0

    poly = _generic_rect_corners(a[0], a[1], a[3], a[4], a[6])
    clip = _generic_rect_corners(b[0], b[1], b[3], b[4], b[6])
    for j in range(4):
        ax, ay = clip[j]
        bx, by = clip[(j + 1) % 4]
        ex, ey = bx - ax, by - ay
        out = []
        m = len(poly)
        for i in range(m):
            px, py = poly[i]
            qx, qy = poly[(i + 1) % m]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            vp, vq = _val(sp), _val(sq)
            if abs(vp) < _BRANCH_EPS:
                flags[0] = True
            if vp >= 0.0:
                out.append((px, py))
            if (vp > 0.0 and vq < 0.0) or (vp < 0.0 and vq > 0.0):
                t = sp / (sp - sq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
        poly = out
        if not poly:
            return 0.0
    area2 = 0.0
    m = len(poly)
    for i in range(m):
        px, py = poly[i]
        qx, qy = poly[(i + 1) % m]
        area2 = area2 + (px * qy - qx * py)
    if _val(area2) < 0.0:
        area2 = -area2
    area = 0.5 * area2
    if _val(area) <= 1e-12:
        flags[0] = True
        return 0.0
    inter = area * dz
    union = a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter
    return inter / union


def iou3d_grad(a_params, b_params):
    """IoU and its gradient with respect to the 7 parameters of box a.

    Returns (iou, grad (7,)). Where the dual-number pass crosses a branch
    boundary, the gradient is recomputed with central finite differences
    on the float path (documented degeneracy fallback).
    """
    a_params = np.asarray(a_params, dtype=np.float64)
    b = tuple(float(v) for v in b_params)
    duals = [_Dual(float(a_params[i]), np.eye(7)[i]) for i in range(7)]
    flags = [False]
    res = _generic_iou3d(duals, b, flags)
    if isinstance(res, _Dual):
        iou, grad = res.v, res.g
    else:
        iou, grad = float(res), np.zeros(7)
    if flags[0]:
        grad = np.empty(7)
        h = 1e-6
        for i in range(7):
            hi = a_params.copy()
            lo = a_params.copy()
            hi[i] += h
            lo[i] -= h
            grad[i] = (_iou3d_single(tuple(hi), b) - _iou3d_single(tuple(lo), b)) / (2 * h)
    return iou, grad
