import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from util import random_box

from sparsedet3d import oracles
from sparsedet3d.geometry import (
    Box3D,
    contains,
    corners,
    iou3d,
    iou3d_grad,
    iou_matrix,
    volume,
    wrap_angle,
)


def halfspace_contains(box, point):
    """Oracle: inside iff on the inner side of all six face planes derived
    from the corner array."""
    cs = corners(box)
    center = cs.mean(axis=0)
    # faces as (origin corner, two edge vectors): use axis-aligned structure
    # of the canonical corner ordering (signs of x, y, z half-extents)
    faces = [
        (cs[0], cs[1] - cs[0], cs[2] - cs[0]),  # -x face spans z, y edges
        (cs[4], cs[5] - cs[4], cs[6] - cs[4]),  # +x face
        (cs[0], cs[1] - cs[0], cs[4] - cs[0]),  # -y face
        (cs[2], cs[3] - cs[2], cs[6] - cs[2]),  # +y face
        (cs[0], cs[2] - cs[0], cs[4] - cs[0]),  # -z face
        (cs[1], cs[3] - cs[1], cs[5] - cs[1]),  # +z face
    ]
    for origin, e1, e2 in faces:
        n = np.cross(e1, e2)
        if np.dot(n, center - origin) < 0:
            n = -n
        if np.dot(n, np.asarray(point) - origin) < -1e-9 * np.linalg.norm(n):
            return False
    return True


class TestContains:
    def test_center(self):
        b = Box3D(1, 2, 3, 1, 1, 1, 0.3)
        assert contains(b, (1, 2, 3))

    def test_face_point_closed_boundary(self):
        b = Box3D(0, 0, 0, 2, 2, 2, 0.0)
        assert contains(b, (1.0, 0.0, 0.0))

    def test_matches_halfspace_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(200):
            b = random_box(rng)
            p = rng.uniform(-3, 3, size=3)
            assert contains(b, p) == halfspace_contains(b, p)


class TestCorners:
    def test_unit_cube(self):
        cs = corners(Box3D(0, 0, 0, 1, 1, 1, 0.0))
        want = {(sx * 0.5, sy * 0.5, sz * 0.5) for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)}
        got = {tuple(np.round(c, 12)) for c in cs}
        assert got == want

    def test_quarter_turn_permutes_corners(self):
        a = corners(Box3D(0, 0, 0, 1, 1, 1, 0.0))
        b = corners(Box3D(0, 0, 0, 1, 1, 1, math.pi / 2))
        sa = {tuple(np.round(c, 12)) for c in a}
        sb = {tuple(np.round(c, 12)) for c in b}
        assert sa == sb

    def test_centroid_identity(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            b = random_box(rng)
            np.testing.assert_allclose(corners(b).mean(axis=0), b.center, atol=1e-12)


class TestIoU3D:
    def test_self_iou_is_one(self):
        b = Box3D(0.3, -1, 2, 1.5, 0.7, 2.1, 0.9)
        assert iou3d(b, b) == pytest.approx(1.0, abs=1e-12)

    def test_half_overlap_unit_cubes(self):
        a = Box3D(0, 0, 0, 1, 1, 1, 0.0)
        b = Box3D(0.5, 0, 0, 1, 1, 1, 0.0)
        # overlap 1/2, union 3/2
        assert iou3d(a, b) == pytest.approx(1.0 / 3.0, abs=1e-9)

    def test_disjoint_boxes(self):
        a = Box3D(0, 0, 0, 1, 1, 1, 0.2)
        b = Box3D(5, 5, 5, 1, 1, 1, -0.4)
        assert iou3d(a, b) == 0.0

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(42)
        for i in range(25):
            a = random_box(rng)
            b = random_box(rng)
            got = iou3d(a, b)
            mc = oracles.mc_iou(a, b, n_samples=200_000, rng=np.random.default_rng(i))
            assert got == pytest.approx(mc, abs=0.02)

    def test_symmetry(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            a, b = random_box(rng), random_box(rng)
            assert abs(iou3d(a, b) - iou3d(b, a)) <= 1e-12

    def test_bounds_and_volume_consistency(self):
        rng = np.random.default_rng(18)
        for _ in range(200):
            a, b = random_box(rng), random_box(rng)
            v = iou3d(a, b)
            assert 0.0 <= v <= 1.0
            inter = v * (volume(a) + volume(b)) / (1.0 + v)
            assert inter <= min(volume(a), volume(b)) + 1e-9

    def test_yaw_invariance(self):
        rng = np.random.default_rng(19)
        for _ in range(50):
            a, b = random_box(rng), random_box(rng)
            base = iou3d(a, b)
            phi = rng.uniform(-np.pi, np.pi)
            c, s = math.cos(phi), math.sin(phi)

            def rot(box):
                x, y = box.cx, box.cy
                return Box3D(c * x - s * y, s * x + c * y, box.cz,
                             box.w, box.l, box.h, box.theta + phi)

            assert iou3d(rot(a), rot(b)) == pytest.approx(base, abs=1e-9)

    def test_iou_matrix_agrees_with_scalar(self):
        rng = np.random.default_rng(23)
        boxes_a = [random_box(rng) for _ in range(8)]
        boxes_b = [random_box(rng) for _ in range(5)]
        mat = iou_matrix(boxes_a, boxes_b)
        for i, a in enumerate(boxes_a):
            for j, b in enumerate(boxes_b):
                assert mat[i, j] == iou3d(a, b)


class TestIoUGradient:
    def test_matches_finite_differences_away_from_degeneracy(self):
        rng = np.random.default_rng(31)
        checked = 0
        while checked < 40:
            a = random_box(rng, center_scale=0.4)
            b = random_box(rng, center_scale=0.4)
            val = iou3d(a, b)
            if not 0.1 <= val <= 0.9:
                continue
            pa = np.array([a.cx, a.cy, a.cz, a.w, a.l, a.h, a.theta])
            pb = np.array([b.cx, b.cy, b.cz, b.w, b.l, b.h, b.theta])
            got_val, got_grad = iou3d_grad(pa, pb)
            assert got_val == pytest.approx(val, abs=1e-12)

            def f(p):
                return iou3d(Box3D(*p), b)

            fd = oracles.fd_gradient(f, pa.copy())
            assert oracles.rel_err(got_grad, fd) <= 1e-5
            checked += 1


class TestAngles:
    @given(st.floats(-50, 50))
    @settings(max_examples=200, deadline=None)
    def test_wrap_angle_range_and_identity(self, t):
        w = wrap_angle(t)
        assert -math.pi < w <= math.pi
        assert math.cos(w) == pytest.approx(math.cos(t), abs=1e-9)
        assert math.sin(w) == pytest.approx(math.sin(t), abs=1e-9)

    def test_box_rejects_nonpositive_dims(self):
        with pytest.raises(ValueError):
            Box3D(0, 0, 0, 0.0, 1, 1, 0)
