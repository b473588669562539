import numpy as np
import pytest
from util import random_coords

from sparsedet3d.backbone import Backbone, BackboneConfig, FusionWeights, VoxelVar, bilateral_fuse
from sparsedet3d.nn import ParamStore
from sparsedet3d.sparse import (
    ConvWeights,
    KernelMapCache,
    SparseTensor,
    build_kernel_map,
    conv_gather_scatter,
    strided_downsample_coords,
    upsample_interpolate,
)


def small_cfg(**kw):
    base = dict(in_channels=2, stage_channels=(8, 12), blocks_per_stage=1,
                highres_channels=8, highres_stride=2, out_channels=6)
    base.update(kw)
    return BackboneConfig(**base)


def make_backbone(cfg, seed=0):
    store = ParamStore(np.float64)
    rng = np.random.default_rng(seed)
    return Backbone(store, "backbone", cfg, rng), store


def random_input(rng, n=60, channels=2, extent=16):
    coords = random_coords(rng, n, 0, extent)
    feats = rng.normal(size=(n, channels))
    return SparseTensor(coords, feats, 1, (0.05, 0.05, 0.05))


class TestBackboneForward:
    def test_empty_input_gives_empty_output(self):
        cfg = small_cfg()
        bb, _ = make_backbone(cfg)
        out = bb.forward_tensor(SparseTensor.empty(2))
        assert out.n_voxels == 0
        assert out.n_channels == cfg.out_channels

    def test_output_channels_and_stride(self):
        cfg = small_cfg()
        bb, _ = make_backbone(cfg)
        x = random_input(np.random.default_rng(1))
        out = bb.forward_tensor(x)
        assert out.n_channels == cfg.out_channels
        assert out.stride == cfg.highres_stride

    def test_output_coords_are_quantized_input_coords(self):
        cfg = small_cfg()
        bb, _ = make_backbone(cfg)
        x = random_input(np.random.default_rng(2))
        out = bb.forward_tensor(x)
        want = {tuple(c) for c in strided_downsample_coords(x.coords, cfg.highres_stride).tolist()}
        got = {tuple(c) for c in out.coords.tolist()}
        assert got == want

    def test_determinism(self):
        cfg = small_cfg()
        bb, _ = make_backbone(cfg)
        x = random_input(np.random.default_rng(3))
        a = bb.forward_tensor(x)
        b = bb.forward_tensor(x)
        assert np.array_equal(a.feats, b.feats)

    def test_translation_equivariance(self):
        cfg = small_cfg()
        bb, _ = make_backbone(cfg, seed=5)
        rng = np.random.default_rng(4)
        x = random_input(rng)
        shift = np.array([2 * cfg.highres_stride, 0, 0], dtype=np.int32)
        # shift is a multiple of the deepest stride (4) for this 2-stage net
        a = bb.forward_tensor(x)
        b = bb.forward_tensor(SparseTensor(x.coords + shift, x.feats, 1, x.voxel_size))
        order_a = np.lexsort(a.coords.T)
        order_b = np.lexsort(b.coords.T)
        assert np.array_equal(a.coords[order_a] + shift, b.coords[order_b])
        assert np.abs(a.feats[order_a] - b.feats[order_b]).max() <= 1e-10

    def test_rejects_wrong_stride_and_channels(self):
        cfg = small_cfg()
        bb, _ = make_backbone(cfg)
        with pytest.raises(Exception, match="stride"):
            bb.forward_tensor(SparseTensor([[0, 0, 0]], np.ones((1, 2)), stride=2))
        with pytest.raises(Exception, match="channels"):
            bb.forward_tensor(SparseTensor([[0, 0, 0]], np.ones((1, 5))))


class TestBilateralFuse:
    def _tensors(self, rng):
        hi_coords = random_coords(rng, 30, 0, 8) * 2
        lo_coords = strided_downsample_coords(hi_coords, 4)
        high = SparseTensor(hi_coords, rng.normal(size=(len(hi_coords), 3)), 2)
        low = SparseTensor(lo_coords, rng.normal(size=(len(lo_coords), 4)), 4)
        return high, low

    def _weights(self, rng, zero=False):
        f = (lambda *s: np.zeros(s)) if zero else (lambda *s: rng.normal(size=s))
        return FusionWeights(down=ConvWeights(f(27, 3, 4)), up=ConvWeights(f(1, 4, 3)))

    def test_zero_weights_identity(self):
        rng = np.random.default_rng(0)
        high, low = self._tensors(rng)
        h2, l2 = bilateral_fuse(high, low, self._weights(rng, zero=True))
        np.testing.assert_array_equal(h2.feats, high.feats)
        np.testing.assert_array_equal(l2.feats, low.feats)

    def test_empty_high_leaves_low_unchanged(self):
        rng = np.random.default_rng(1)
        _, low = self._tensors(rng)
        high = SparseTensor.empty(3, stride=2)
        h2, l2 = bilateral_fuse(high, low, self._weights(rng))
        np.testing.assert_array_equal(l2.feats, low.feats)
        assert h2.n_voxels == 0

    def test_matches_hand_composed_primitives(self):
        rng = np.random.default_rng(2)
        high, low = self._tensors(rng)
        w = self._weights(rng)
        h2, l2 = bilateral_fuse(high, low, w)

        kmap = build_kernel_map(high.coords, low.coords, 3, dilation=high.stride)
        low_ref = low.feats + conv_gather_scatter(high.feats, w.down.kernel, kmap)
        up = upsample_interpolate(low, high.coords, high.stride)
        high_ref = high.feats + up.feats @ w.up.kernel[0]
        np.testing.assert_allclose(l2.feats, low_ref, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(h2.feats, high_ref, rtol=1e-12, atol=1e-12)

    def test_stride_incompatibility_rejected(self):
        rng = np.random.default_rng(3)
        high = SparseTensor([[0, 0, 0]], np.ones((1, 3)), stride=3)
        low = SparseTensor([[0, 0, 0]], np.ones((1, 4)), stride=4)
        with pytest.raises(ValueError):
            bilateral_fuse(high, low, self._weights(rng))
