import numpy as np
import pytest
from util import occupancy_coords, random_coords

from sparsedet3d import oracles
from sparsedet3d.sparse import (
    ConvWeights,
    SparseTensor,
    build_kernel_map,
    kernel_offsets,
    sparse_conv_backward,
    sparse_conv_forward,
    strided_downsample_coords,
    upsample_interpolate,
)


def identity_weights(k, c, bias=False):
    kernel = np.zeros((k ** 3, c, c))
    kernel[k ** 3 // 2] = np.eye(c)
    return ConvWeights(kernel, np.zeros(c) if bias else None)


class TestKernelMap:
    def test_identity_neighborhood(self):
        km = build_kernel_map([[0, 0, 0]], [[0, 0, 0]], kernel_size=1)
        assert km.triples() == [(0, 0, 0)]

    def test_offset_indices_recover_displacements(self):
        km = build_kernel_map([[0, 0, 0], [1, 0, 0]], [[0, 0, 0]], kernel_size=3)
        assert km.n_triples == 2
        offs = kernel_offsets(3)
        disp = {tuple(offs[d]) for d in km.off_idx}
        assert disp == {(0, 0, 0), (1, 0, 0)}

    @pytest.mark.parametrize("dilation", [1, 2])
    def test_matches_bruteforce_oracle(self, dilation):
        rng = np.random.default_rng(7)
        ic = random_coords(rng, 50, 0, 8)
        oc = random_coords(rng, 30, 0, 8)
        km = build_kernel_map(ic, oc, kernel_size=5, dilation=dilation)
        assert set(km.triples()) == oracles.brute_kernel_map(ic, oc, 5, dilation)
        assert km.n_triples == len(oracles.brute_kernel_map(ic, oc, 5, dilation))

    def test_rejects_even_kernel(self):
        with pytest.raises(ValueError):
            build_kernel_map([[0, 0, 0]], [[0, 0, 0]], kernel_size=2)

    def test_rejects_duplicate_coords(self):
        with pytest.raises(ValueError):
            build_kernel_map([[0, 0, 0], [0, 0, 0]], [[0, 0, 0]], kernel_size=3)

    def test_deterministic_order(self):
        rng = np.random.default_rng(3)
        ic = random_coords(rng, 40, 0, 6)
        a = build_kernel_map(ic, ic, 3)
        b = build_kernel_map(ic, ic, 3)
        assert np.array_equal(a.in_idx, b.in_idx)
        assert np.array_equal(a.off_idx, b.off_idx)
        # offset-major ordering
        assert np.all(np.diff(a.off_idx) >= 0)


class TestConvForward:
    def test_identity_kernel(self):
        x = SparseTensor([[0, 0, 0]], [[1.5, -2.0]])
        y, _ = sparse_conv_forward(x, identity_weights(1, 2), x.coords, 1)
        np.testing.assert_array_equal(y.feats, x.feats)

    def test_drop_empty_removes_uncovered_rows(self):
        x = SparseTensor([[0, 0, 0]], [[1.0]])
        w = ConvWeights(np.ones((27, 1, 1)))
        out_coords = [[0, 0, 0], [10, 10, 10]]
        y, _ = sparse_conv_forward(x, w, out_coords, 3, drop_empty=True)
        assert y.n_voxels == 1
        assert tuple(y.coords[0]) == (0, 0, 0)

    def test_keep_empty_rows_are_bias_only(self):
        x = SparseTensor([[0, 0, 0]], [[1.0]])
        w = ConvWeights(np.ones((27, 1, 1)), np.array([0.25]))
        y, _ = sparse_conv_forward(x, w, [[0, 0, 0], [10, 10, 10]], 3, drop_empty=False)
        assert y.feats[1, 0] == pytest.approx(0.25, abs=0)

    @pytest.mark.parametrize("occupancy,k", [(0.3, 3), (0.05, 5), (1.0, 1)])
    def test_matches_dense_oracle(self, occupancy, k):
        rng = np.random.default_rng(11)
        coords = occupancy_coords(rng, 8, occupancy)
        feats = rng.normal(size=(len(coords), 4))
        kernel = rng.normal(size=(k ** 3, 4, 3))
        bias = rng.normal(size=3)
        x = SparseTensor(coords, feats)
        y, _ = sparse_conv_forward(x, ConvWeights(kernel, bias), coords, k)
        ref = oracles.dense_conv_oracle(coords, feats, kernel, coords, k, bias=bias)
        assert oracles.rel_err(y.feats, ref) <= 1e-6

    def test_channel_mismatch_rejected(self):
        x = SparseTensor([[0, 0, 0]], [[1.0, 2.0]])
        with pytest.raises(ValueError, match="channel"):
            sparse_conv_forward(x, identity_weights(1, 3), x.coords, 1)

    def test_nonfinite_weights_rejected(self):
        kernel = np.full((1, 1, 1), np.nan)
        with pytest.raises(ValueError):
            ConvWeights(kernel)

    def test_linearity(self):
        rng = np.random.default_rng(5)
        coords = random_coords(rng, 30, 0, 6)
        fx = rng.normal(size=(30, 3))
        fy = rng.normal(size=(30, 3))
        w = ConvWeights(rng.normal(size=(27, 3, 2)))
        a, b = 0.7, -1.3

        def fwd(f):
            t, _ = sparse_conv_forward(SparseTensor(coords, f), w, coords, 3)
            return t.feats

        lhs = fwd(a * fx + b * fy)
        rhs = a * fwd(fx) + b * fwd(fy)
        assert oracles.rel_err(lhs, rhs) <= 1e-10

    def test_translation_equivariance(self):
        rng = np.random.default_rng(6)
        coords = random_coords(rng, 40, 0, 8)
        feats = rng.normal(size=(40, 2))
        w = ConvWeights(rng.normal(size=(27, 2, 2)), rng.normal(size=2))
        shift = np.array([17, -9, 4], dtype=np.int32)
        y0, _ = sparse_conv_forward(SparseTensor(coords, feats), w, coords, 3)
        y1, _ = sparse_conv_forward(SparseTensor(coords + shift, feats), w, coords + shift, 3)
        assert np.abs(y0.feats - y1.feats).max() <= 1e-12


class TestConvBackward:
    def _random_setup(self, seed, n=20, k=3, c_in=3, c_out=2):
        rng = np.random.default_rng(seed)
        coords = random_coords(rng, n, 0, 5)
        feats = rng.normal(size=(n, c_in))
        kernel = rng.normal(size=(k ** 3, c_in, c_out))
        bias = rng.normal(size=c_out)
        x = SparseTensor(coords, feats)
        w = ConvWeights(kernel, bias)
        kmap = build_kernel_map(coords, coords, k)
        return x, w, kmap

    def test_zero_grad_out(self):
        x, w, kmap = self._random_setup(0)
        gi, gw = sparse_conv_backward(x, w, kmap, np.zeros((kmap.n_out, w.c_out)))
        assert not gi.any() and not gw.kernel.any() and not gw.bias.any()

    def test_identity_setup(self):
        x = SparseTensor([[0, 0, 0], [1, 1, 1]], np.eye(2))
        w = identity_weights(1, 2)
        kmap = build_kernel_map(x.coords, x.coords, 1)
        g = np.array([[1.0, 2.0], [3.0, 4.0]])
        gi, _ = sparse_conv_backward(x, w, kmap, g)
        np.testing.assert_array_equal(gi, g)

    def test_matches_finite_differences(self):
        x, w, kmap = self._random_setup(9)

        def loss_of_feats(f):
            t, _ = sparse_conv_forward(SparseTensor(x.coords, f), w, x.coords, 3, kmap=kmap)
            return t.feats.sum()

        def loss_of_kernel(kern):
            t, _ = sparse_conv_forward(x, ConvWeights(kern, w.bias), x.coords, 3, kmap=kmap)
            return t.feats.sum()

        grad_out = np.ones((kmap.n_out, w.c_out))
        gi, gw = sparse_conv_backward(x, w, kmap, grad_out)
        fd_i = oracles.fd_gradient(loss_of_feats, x.feats.copy())
        fd_k = oracles.fd_gradient(loss_of_kernel, w.kernel.copy())
        assert oracles.rel_err(gi, fd_i) <= 1e-5
        assert oracles.rel_err(gw.kernel, fd_k) <= 1e-5

    def test_shape_mismatch_rejected(self):
        x, w, kmap = self._random_setup(1)
        with pytest.raises(ValueError):
            sparse_conv_backward(x, w, kmap, np.zeros((kmap.n_out + 1, w.c_out)))


class TestDownsampleUpsample:
    def test_single_voxel(self):
        out = strided_downsample_coords([[0, 0, 0]], 2)
        assert out.tolist() == [[0, 0, 0]]

    def test_merges_cells(self):
        out = strided_downsample_coords([[0, 0, 0], [1, 0, 0]], 2)
        assert out.tolist() == [[0, 0, 0]]

    def test_negative_coords_floor(self):
        out = strided_downsample_coords([[-1, -3, 1]], 2)
        assert out.tolist() == [[-2, -4, 0]]

    def test_matches_set_oracle(self):
        rng = np.random.default_rng(2)
        coords = random_coords(rng, 60, -16, 16)
        got = {tuple(c) for c in strided_downsample_coords(coords, 4)}
        want = {tuple((np.floor_divide(c, 4) * 4).tolist()) for c in coords}
        assert got == want

    def test_upsample_copies_parent_feature(self):
        low = SparseTensor([[0, 0, 0], [2, 0, 0]], [[1.0], [2.0]], stride=2)
        up = upsample_interpolate(low, [[0, 0, 0], [1, 0, 0], [3, 1, 1]], 1)
        np.testing.assert_array_equal(up.feats[:, 0], [1.0, 1.0, 2.0])

    def test_upsample_empty_parent_zero(self):
        low = SparseTensor([[0, 0, 0]], [[1.0]], stride=2)
        up = upsample_interpolate(low, [[4, 4, 4]], 1)
        assert up.feats[0, 0] == 0.0

    def test_upsample_matches_bruteforce_parent_lookup(self):
        rng = np.random.default_rng(13)
        parents = random_coords(rng, 20, 0, 4) * 4
        low = SparseTensor(parents, rng.normal(size=(20, 3)), stride=4)
        targets = random_coords(rng, 50, 0, 16)
        up = upsample_interpolate(low, targets, 1)
        lut = {tuple(c): f for c, f in zip(parents.tolist(), low.feats)}
        for t, f in zip(targets.tolist(), up.feats):
            want = lut.get(tuple(int(v) // 4 * 4 for v in t), np.zeros(3))
            np.testing.assert_array_equal(f, want)

    def test_stride_incompatibility_rejected(self):
        low = SparseTensor([[0, 0, 0]], [[1.0]], stride=3)
        with pytest.raises(ValueError):
            upsample_interpolate(low, [[0, 0, 0]], 2)


class TestSparseTensorInvariants:
    def test_duplicate_coords_rejected(self):
        with pytest.raises(ValueError):
            SparseTensor([[0, 0, 0], [0, 0, 0]], np.ones((2, 1)))

    def test_row_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            SparseTensor([[0, 0, 0]], np.ones((2, 1)))

    def test_stride_multiple_enforced(self):
        with pytest.raises(ValueError):
            SparseTensor([[1, 0, 0]], np.ones((1, 1)), stride=2)

    def test_centers(self):
        t = SparseTensor([[2, 0, -2]], np.ones((1, 1)), stride=2, voxel_size=(0.5, 0.5, 0.5))
        np.testing.assert_allclose(t.centers()[0], [1.5, 0.5, -0.5])
