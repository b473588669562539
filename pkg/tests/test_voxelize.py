import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsedet3d.voxelize import ClassSizeTable, PointCloud, class_revoxelize, voxelize_avg

finite_pts = st.lists(
    st.tuples(*[st.floats(-5, 5, allow_nan=False, width=32)] * 3), min_size=1, max_size=60
)


class TestVoxelizeAvg:
    def test_single_point(self):
        cloud = PointCloud([[0.01, 0.01, 0.01]], [[3.0, 4.0]])
        t = voxelize_avg(cloud, (0.02, 0.02, 0.02))
        assert t.coords.tolist() == [[0, 0, 0]]
        np.testing.assert_array_equal(t.feats, [[3.0, 4.0]])

    def test_two_points_one_cell_mean(self):
        cloud = PointCloud([[0.1, 0.1, 0.1], [0.15, 0.12, 0.11]], [[1.0, 0.0], [0.0, 1.0]])
        t = voxelize_avg(cloud, (0.5, 0.5, 0.5))
        assert t.n_voxels == 1
        np.testing.assert_allclose(t.feats, [[0.5, 0.5]])

    def test_empty_cloud(self):
        t = voxelize_avg(PointCloud(np.empty((0, 3))), (0.02,) * 3)
        assert t.n_voxels == 0

    def test_boundary_point_goes_to_higher_cell(self):
        t = voxelize_avg(PointCloud([[0.5, -0.5, 0.0]]), (0.5, 0.5, 0.5))
        assert t.coords.tolist() == [[1, -1, 0]]

    def test_nonpositive_voxel_size_rejected(self):
        with pytest.raises(ValueError):
            voxelize_avg(PointCloud([[0, 0, 0]]), (0.0, 1, 1))

    def test_no_features_gives_ones_channel(self):
        t = voxelize_avg(PointCloud([[0.1, 0.1, 0.1], [0.11, 0.1, 0.1]]), (1, 1, 1))
        np.testing.assert_array_equal(t.feats, [[1.0]])

    @given(finite_pts)
    @settings(max_examples=60, deadline=None)
    def test_mass_conservation(self, pts):
        pos = np.array(pts, dtype=np.float64)
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(len(pos), 2))
        t = voxelize_avg(PointCloud(pos, feats), (0.37, 0.41, 0.53))
        _, _, inv = _quantize(pos, (0.37, 0.41, 0.53))
        counts = np.bincount(inv, minlength=t.n_voxels)
        total = (t.feats * counts[:, None]).sum(axis=0)
        np.testing.assert_allclose(total, feats.sum(axis=0), rtol=1e-6, atol=1e-9)

    @given(finite_pts)
    @settings(max_examples=60, deadline=None)
    def test_halving_cell_size_never_decreases_count(self, pts):
        pos = np.array(pts, dtype=np.float64)
        coarse = voxelize_avg(PointCloud(pos), (0.8, 0.8, 0.8))
        fine = voxelize_avg(PointCloud(pos), (0.4, 0.4, 0.4))
        assert fine.n_voxels >= coarse.n_voxels

    def test_idempotence_on_voxel_centers(self):
        rng = np.random.default_rng(1)
        pos = rng.uniform(-2, 2, size=(40, 3))
        vs = (0.25, 0.25, 0.25)
        t = voxelize_avg(PointCloud(pos), vs)
        centers = (t.coords + 0.5) * np.array(vs)
        t2 = voxelize_avg(PointCloud(centers), vs)
        assert {tuple(c) for c in t2.coords.tolist()} == {tuple(c) for c in t.coords.tolist()}


def _quantize(pos, vs):
    from sparsedet3d.voxelize import quantize

    return quantize(pos, vs)


class TestClassRevoxelize:
    def test_unit_table_alpha_one_reduces_to_voxelize(self):
        rng = np.random.default_rng(2)
        pos = rng.uniform(-1, 1, size=(30, 3))
        votes = PointCloud(pos, rng.normal(size=(30, 4)))
        table = ClassSizeTable([[1.0, 1.0, 1.0]])
        a = class_revoxelize(votes, 0, table, 1.0)
        b = voxelize_avg(votes, (1.0, 1.0, 1.0))
        np.testing.assert_array_equal(a.coords, b.coords)
        np.testing.assert_allclose(a.feats, b.feats)

    def test_records_class_voxel_size_exactly(self):
        table = ClassSizeTable([[0.4, 0.6, 0.8], [1.6, 2.4, 3.2]])
        votes = PointCloud([[0.0, 0.0, 0.0]])
        t = class_revoxelize(votes, 1, table, 0.15)
        assert np.array_equal(t.voxel_size, 0.15 * table[1])

    def test_per_class_counts_match_bruteforce(self):
        rng = np.random.default_rng(3)
        pos = rng.uniform(-3, 3, size=(200, 3))
        votes = PointCloud(pos)
        table = ClassSizeTable([[0.3, 0.3, 0.3], [1.2, 1.2, 1.2]])
        for j in range(2):
            t = class_revoxelize(votes, j, table, 0.5)
            cells = {tuple(np.floor(p / (0.5 * table[j])).astype(int)) for p in pos}
            assert t.n_voxels == len(cells)

    def test_invalid_class_rejected(self):
        with pytest.raises(ValueError):
            class_revoxelize(PointCloud([[0, 0, 0]]), 5, ClassSizeTable([[1, 1, 1]]), 0.15)

    def test_nonpositive_alpha_rejected(self):
        with pytest.raises(ValueError):
            class_revoxelize(PointCloud([[0, 0, 0]]), 0, ClassSizeTable([[1, 1, 1]]), 0.0)

    def test_class_size_table_estimator(self):
        from sparsedet3d.geometry import Box3D

        boxes = [Box3D(0, 0, 0, 1, 2, 3), Box3D(0, 0, 0, 3, 2, 1), Box3D(5, 5, 5, 0.5, 0.5, 0.5)]
        table = ClassSizeTable.from_boxes(boxes, [0, 0, 1], 2)
        np.testing.assert_allclose(table[0], [2.0, 2.0, 2.0])
        np.testing.assert_allclose(table[1], [0.5, 0.5, 0.5])
