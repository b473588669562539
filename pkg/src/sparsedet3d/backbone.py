"""Dual-resolution sparse voxel backbone.

A downsampling residual trunk (stride doubles per stage) runs next to an
auxiliary branch held at a fixed high resolution; the two exchange features
through additive bilateral fusion after each fusion stage. The network's
output is the high-resolution branch, so voxel geometry is never dilated:
every output coordinate is a stride-quantized input coordinate.

Within-stage convolutions are submanifold (outputs on the input sites);
only the per-stage downsample convolutions change the coordinate set. That
choice is configuration, not dogma: the sparse-core layer accepts arbitrary
output sites.
"""
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .nn import Norm, SparseConv
from .proposal import identity_kmap
from .sparse import (
    KernelMapCache,
    SparseTensor,
    strided_downsample_coords,
)

__all__ = ["BackboneConfig", "VoxelVar", "Backbone", "bilateral_fuse", "FusionWeights"]


@dataclass
class VoxelVar:
    """A sparse tensor whose feature matrix lives in the autodiff graph."""

    coords: np.ndarray
    feats: Var
    stride: int
    voxel_size: np.ndarray

    @classmethod
    def from_tensor(cls, t: SparseTensor, requires_grad=False):
        return cls(t.coords, Var(t.feats, requires_grad=requires_grad), t.stride, t.voxel_size)

    def to_tensor(self) -> SparseTensor:
        return SparseTensor(self.coords, self.feats.data, self.stride, self.voxel_size)

    def centers(self) -> np.ndarray:
        return (self.coords.astype(np.float64) + 0.5 * self.stride) * self.voxel_size


@dataclass
class BackboneConfig:
    in_channels: int = 3
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    highres_channels: int = 64
    highres_stride: int = 2
    fusion_points: Optional[tuple] = None  # default: every stage after the tap
    out_channels: int = 64
    norm: str = "batch"

    def __post_init__(self):
        if self.out_channels < 1:
            raise ValueError("out_channels must be >= 1")
        hs = self.highres_stride
        if hs < 2 or hs & (hs - 1):
            raise ValueError("highres_stride must be a power of two >= 2")
        self.tap_stage = int(math.log2(hs)) - 1
        if self.tap_stage >= len(self.stage_channels):
            raise ValueError("highres_stride deeper than the stage pyramid")
        if self.fusion_points is None:
            self.fusion_points = tuple(range(self.tap_stage + 1, len(self.stage_channels)))
        for i in self.fusion_points:
            if not self.tap_stage < i < len(self.stage_channels):
                raise ValueError(f"fusion point {i} out of range")


class ResidualBlock:
    """Pre-activation residual unit: x + conv(relu(norm(conv(relu(norm(x))))))."""

    def __init__(self, store, name, c, rng, norm="batch"):
        self.norm1 = Norm(store, f"{name}.norm1", c, norm)
        self.conv1 = SparseConv(store, f"{name}.conv1", c, c, 3, rng)
        self.norm2 = Norm(store, f"{name}.norm2", c, norm)
        self.conv2 = SparseConv(store, f"{name}.conv2", c, c, 3, rng)

    def __call__(self, feats: Var, kmap, training: bool) -> Var:
        h = self.conv1(ad.relu(self.norm1(feats, training)), kmap)
        h = self.conv2(ad.relu(self.norm2(h, training)), kmap)
        return feats + h


class _Fusion:
    def __init__(self, store, name, highres_channels, low_channels, rng, norm):
        self.down = SparseConv(store, f"{name}.down", highres_channels, low_channels, 3, rng, bias=False)
        self.up = SparseConv(store, f"{name}.up", low_channels, highres_channels, 1, rng, bias=False)
        self.block = ResidualBlock(store, f"{name}.block", highres_channels, rng, norm)


def _fuse(high: VoxelVar, low: VoxelVar, down: SparseConv, up: SparseConv, kmaps) -> tuple:
    """Additive bilateral exchange. Returns (high', low') feature Vars."""
    if low.stride % high.stride:
        raise ValueError(f"low stride {low.stride} not a multiple of high stride {high.stride}")
    down_kmap = kmaps.get(high.coords, low.coords, down.kernel_size, high.stride)
    low_feats = low.feats + ad.sparse_conv(high.feats, down.kernel, None, down_kmap)

    parents = (high.coords.astype(np.int64) // low.stride) * low.stride
    from ._kernels import coord_lookup

    idx = coord_lookup(low.coords, parents)
    hit = (idx >= 0).astype(low.feats.data.dtype)[:, None]
    gathered = ad.take_rows(low.feats, np.maximum(idx, 0)) * hit
    up_feats = ad.sparse_conv(gathered, up.kernel, None, identity_kmap(len(high.coords)))
    high_feats = high.feats + up_feats
    return high_feats, low_feats


@dataclass
class FusionWeights:
    """Array-level weights for one bilateral fusion (spec surface)."""

    down: "object"  # ConvWeights, kernel size 3
    up: "object"    # ConvWeights, kernel size 1


def bilateral_fuse(high: SparseTensor, low: SparseTensor, params: FusionWeights):
    """Pure-array bilateral fusion of two sparse tensors.

    high-to-low: a strided convolution of the high branch added at low's
    coordinates. low-to-high: nearest-parent upsampling of the low branch
    followed by a channel-compression 1^3 convolution, added at high's
    coordinates. Zero weights leave both tensors unchanged.
    """
    hv = VoxelVar.from_tensor(high)
    lv = VoxelVar.from_tensor(low)

    class _Shim:
        def __init__(self, w, k):
            self.kernel = Var(w.kernel)
            self.bias = None
            self.kernel_size = k

    hf, lf = _fuse(hv, lv, _Shim(params.down, round(len(params.down.kernel) ** (1 / 3))),
                   _Shim(params.up, 1), KernelMapCache(8))
    return (SparseTensor(high.coords, hf.data, high.stride, high.voxel_size),
            SparseTensor(low.coords, lf.data, low.stride, low.voxel_size))


class Backbone:
    def __init__(self, store, name, cfg: BackboneConfig, rng):
        self.cfg = cfg
        ch = cfg.stage_channels
        self.stem_conv = SparseConv(store, f"{name}.stem.conv", cfg.in_channels, ch[0], 3, rng)
        self.stem_norm = Norm(store, f"{name}.stem.norm", ch[0], cfg.norm)
        self.down_convs, self.down_norms, self.blocks = [], [], []
        for i, c in enumerate(ch):
            prev = ch[0] if i == 0 else ch[i - 1]
            self.down_convs.append(SparseConv(store, f"{name}.stage{i}.down", prev, c, 3, rng))
            self.down_norms.append(Norm(store, f"{name}.stage{i}.down_norm", c, cfg.norm))
            self.blocks.append([
                ResidualBlock(store, f"{name}.stage{i}.block{b}", c, rng, cfg.norm)
                for b in range(cfg.blocks_per_stage)
            ])
        hr = cfg.highres_channels
        tap_c = ch[cfg.tap_stage]
        self.aux_conv = SparseConv(store, f"{name}.aux.conv", tap_c, hr, 1, rng)
        self.aux_norm = Norm(store, f"{name}.aux.norm", hr, cfg.norm)
        self.fusions = {
            i: _Fusion(store, f"{name}.fuse{i}", hr, ch[i], rng, cfg.norm)
            for i in cfg.fusion_points
        }
        self.head_conv = SparseConv(store, f"{name}.head.conv", hr, cfg.out_channels, 1, rng)
        self.head_norm = Norm(store, f"{name}.head.norm", cfg.out_channels, cfg.norm)

    def __call__(self, x: VoxelVar, training: bool, kmaps: KernelMapCache) -> VoxelVar:
        cfg = self.cfg
        if x.feats.data.shape[0] == 0:
            return VoxelVar(x.coords[:0], Var(np.zeros((0, cfg.out_channels), x.feats.data.dtype)),
                            cfg.highres_stride, x.voxel_size)
        if x.stride != 1:
            raise ValueError("backbone expects a stride-1 input tensor")
        if x.feats.data.shape[1] != cfg.in_channels:
            raise ValueError(
                f"backbone expects {cfg.in_channels} input channels, got {x.feats.data.shape[1]}")

        coords, stride = x.coords, 1
        kmap = kmaps.get(coords, coords, 3, stride)
        feats = ad.relu(self.stem_norm(self.stem_conv(x.feats, kmap), training))

        high: Optional[VoxelVar] = None
        for i in range(len(cfg.stage_channels)):
            new_stride = stride * 2
            new_coords = strided_downsample_coords(coords, new_stride)
            down_kmap = kmaps.get(coords, new_coords, 3, stride)
            feats = ad.relu(self.down_norms[i](self.down_convs[i](feats, down_kmap), training))
            coords, stride = new_coords, new_stride
            sub_kmap = kmaps.get(coords, coords, 3, stride)
            for block in self.blocks[i]:
                feats = block(feats, sub_kmap, training)
            low = VoxelVar(coords, feats, stride, x.voxel_size)

            if i == cfg.tap_stage:
                hf = ad.relu(self.aux_norm(
                    self.aux_conv(feats, identity_kmap(len(coords))), training))
                high = VoxelVar(coords, hf, stride, x.voxel_size)
            elif i in self.fusions and high is not None:
                fusion = self.fusions[i]
                hf, lf = _fuse(high, low, fusion.down, fusion.up, kmaps)
                feats = lf
                high_kmap = kmaps.get(high.coords, high.coords, 3, high.stride)
                hf = fusion.block(hf, high_kmap, training)
                high = VoxelVar(high.coords, hf, high.stride, x.voxel_size)

        out = ad.relu(self.head_norm(
            self.head_conv(high.feats, identity_kmap(len(high.coords))), training))
        return VoxelVar(high.coords, out, high.stride, x.voxel_size)

    def forward_tensor(self, t: SparseTensor, training=False,
                       kmaps: Optional[KernelMapCache] = None) -> SparseTensor:
        cache = kmaps if kmaps is not None else KernelMapCache(64)
        return self(VoxelVar.from_tensor(t), training, cache).to_tensor()
