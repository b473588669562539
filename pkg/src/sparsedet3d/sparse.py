"""Coordinate-hashed sparse voxel tensors and generalized sparse 3D convolution.

The data model: a sparse tensor is a set of unique integer voxel coordinates
with a dense feature matrix attached row for row. A convolution between two
coordinate sets is planned once into a kernel map (input row, output row,
kernel offset) and then executed as one dense matrix multiply per kernel
offset; within a single offset bucket both the input and the output indices
are unique, so gather/scatter reduces to fancy indexing.

Conventions fixed here and relied on everywhere else:
  * kernel offsets are enumerated lexicographically with z varying fastest;
  * a triple (i, o, d) means in_coords[i] == out_coords[o] + dilation*offset(d);
  * coordinates of a stride-s tensor are multiples of s, and the metric
    center of voxel c is (c + s/2) * voxel_size.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._kernels import compiled as _compiled
from ._kernels import coord_lookup, kernel_offsets, kmap_build, pack_coords

__all__ = [
    "SparseTensor",
    "KernelMap",
    "ConvWeights",
    "build_kernel_map",
    "sparse_conv_forward",
    "sparse_conv_backward",
    "strided_downsample_coords",
    "upsample_interpolate",
    "unique_coords",
    "voxel_centers",
]


def as_coords(coords) -> np.ndarray:
    """Validate and return an (N, 3) int32 coordinate array."""
    c = np.asarray(coords)
    if c.ndim != 2 or c.shape[1] != 3:
        raise ValueError(f"expected (N, 3) coordinates, got shape {c.shape}")
    if c.dtype != np.int32:
        c64 = c.astype(np.int64)
        if c.size and (np.any(c64 != c) or c64.max(initial=0) > np.iinfo(np.int32).max
                       or c64.min(initial=0) < np.iinfo(np.int32).min):
            raise ValueError("coordinates must be exact 32-bit integers")
        c = c64.astype(np.int32)
    return np.ascontiguousarray(c)


def unique_coords(coords) -> bool:
    c = np.asarray(coords, dtype=np.int64)
    if len(c) == 0:
        return True
    return len(np.unique(pack_coords(c))) == len(c)


def voxel_centers(coords, stride, voxel_size) -> np.ndarray:
    """Metric centers of the stride-sized cells at the given coordinates."""
    vs = np.asarray(voxel_size, dtype=np.float64)
    return (np.asarray(coords, dtype=np.float64) + 0.5 * stride) * vs


@dataclass
class SparseTensor:
    """Unique voxel coordinates plus an aligned feature matrix.

    Attributes:
        coords: (N, 3) int32, unique, each a multiple of `stride`.
        feats: (N, C) float matrix, row i belongs to coords[i].
        stride: grid stride (cell edge in units of the base grid).
        voxel_size: metric edge lengths (sx, sy, sz) of one base grid cell.
    """

    coords: np.ndarray
    feats: np.ndarray
    stride: int = 1
    voxel_size: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.coords = as_coords(self.coords)
        self.feats = np.ascontiguousarray(np.atleast_2d(self.feats))
        self.voxel_size = np.asarray(self.voxel_size, dtype=np.float64).reshape(3)
        if self.stride < 1:
            raise ValueError("stride must be a positive integer")
        if len(self.coords) != len(self.feats):
            raise ValueError(
                f"coords rows ({len(self.coords)}) != feats rows ({len(self.feats)})"
            )
        if self.feats.ndim != 2 or (len(self.feats) > 0 and self.feats.shape[1] < 1):
            raise ValueError("feats must be (N, C) with C >= 1")
        if not unique_coords(self.coords):
            raise ValueError("duplicate voxel coordinates")
        if self.stride > 1 and len(self.coords) and np.any(self.coords % self.stride):
            raise ValueError("coordinates must be multiples of stride")

    @property
    def n_voxels(self) -> int:
        return len(self.coords)

    @property
    def n_channels(self) -> int:
        return self.feats.shape[1] if self.feats.ndim == 2 else 0

    def centers(self) -> np.ndarray:
        return voxel_centers(self.coords, self.stride, self.voxel_size)

    @classmethod
    def empty(cls, n_channels, stride=1, voxel_size=(1.0, 1.0, 1.0), dtype=np.float64):
        return cls(
            np.empty((0, 3), np.int32),
            np.empty((0, n_channels), dtype),
            stride,
            np.asarray(voxel_size, dtype=np.float64),
        )


@dataclass
class KernelMap:
    """Gather-scatter plan for one sparse convolution.

    Triples are stored offset-major (ascending offset index, ascending output
    row within each offset), which makes every bucket a contiguous slab with
    unique in/out rows.
    """

    in_idx: np.ndarray
    out_idx: np.ndarray
    off_idx: np.ndarray
    kernel_size: int
    n_in: int
    n_out: int
    dilation: int = 1

    def __post_init__(self):
        self.in_idx = np.ascontiguousarray(self.in_idx, dtype=np.int32)
        self.out_idx = np.ascontiguousarray(self.out_idx, dtype=np.int32)
        self.off_idx = np.ascontiguousarray(self.off_idx, dtype=np.int32)
        k3 = self.kernel_size ** 3
        # bucket d occupies _ptr[d]:_ptr[d+1] in the triple arrays
        self._ptr = np.searchsorted(self.off_idx, np.arange(k3 + 1)).astype(np.int64)

    @property
    def n_offsets(self) -> int:
        return self.kernel_size ** 3

    @property
    def n_triples(self) -> int:
        return len(self.in_idx)

    def buckets(self):
        """Yield (offset_index, slice) for each non-empty offset bucket."""
        for d in range(self.n_offsets):
            lo, hi = self._ptr[d], self._ptr[d + 1]
            if hi > lo:
                yield d, slice(lo, hi)

    def covered_out_mask(self) -> np.ndarray:
        """Boolean mask of output rows reached by at least one triple."""
        mask = np.zeros(self.n_out, dtype=bool)
        mask[self.out_idx] = True
        return mask

    def triples(self):
        return list(zip(self.in_idx.tolist(), self.out_idx.tolist(), self.off_idx.tolist()))


@dataclass
class ConvWeights:
    """Learnable parameters of one sparse convolution: (k^3, C_in, C_out)
    kernel plus optional bias of length C_out."""

    kernel: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        self.kernel = np.ascontiguousarray(self.kernel)
        if self.kernel.ndim != 3:
            raise ValueError("kernel must have shape (k^3, C_in, C_out)")
        if not np.all(np.isfinite(self.kernel)):
            raise ValueError("non-finite kernel weights")
        if self.bias is not None:
            self.bias = np.ascontiguousarray(self.bias)
            if self.bias.shape != (self.kernel.shape[2],):
                raise ValueError("bias length must equal C_out")
            if not np.all(np.isfinite(self.bias)):
                raise ValueError("non-finite bias")

    @property
    def c_in(self) -> int:
        return self.kernel.shape[1]

    @property
    def c_out(self) -> int:
        return self.kernel.shape[2]


def build_kernel_map(in_coords, out_coords, kernel_size, dilation=1) -> KernelMap:
    """Plan a sparse convolution between two unique coordinate sets.

    Args:
        in_coords: (N, 3) integer coordinates holding features.
        out_coords: (M, 3) integer coordinates where outputs are wanted.
        kernel_size: odd cubic kernel edge k.
        dilation: spacing between kernel taps in grid units (the input
            tensor's stride for ordinary convolutions).

    Returns:
        KernelMap with every (i, o, d) satisfying
        in_coords[i] == out_coords[o] + dilation * offset(d).
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be odd and positive, got {kernel_size}")
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    ic = as_coords(in_coords)
    oc = as_coords(out_coords)
    if not unique_coords(ic):
        raise ValueError("duplicate input coordinates")
    if not unique_coords(oc):
        raise ValueError("duplicate output coordinates")
    ii, oi, di = kmap_build(ic, oc, int(kernel_size), int(dilation))
    return KernelMap(ii, oi, di, int(kernel_size), len(ic), len(oc), int(dilation))


def _compiled_conv_fns(dtype):
    if _compiled is None:
        return None
    if dtype == np.float64:
        return _compiled.conv_fwd_f64, _compiled.conv_bwd_f64
    if dtype == np.float32:
        return _compiled.conv_fwd_f32, _compiled.conv_bwd_f32
    return None


def conv_gather_scatter(feats, kernel, kmap: KernelMap, bias=None):
    """Array-level forward contraction: one dense matmul per offset bucket.

    Returns the (n_out, C_out) output feature matrix, bias included on every
    declared output row.
    """
    c_out = kernel.shape[2]
    dtype = np.result_type(feats, kernel)
    out = np.zeros((kmap.n_out, c_out), dtype=dtype)
    fns = _compiled_conv_fns(dtype) if feats.dtype == kernel.dtype == dtype else None
    if fns is not None and kmap.n_triples:
        fns[0](np.ascontiguousarray(feats), np.ascontiguousarray(kernel),
               kmap.in_idx, kmap.out_idx, kmap._ptr, out)
    else:
        for d, sl in kmap.buckets():
            out[kmap.out_idx[sl]] += feats[kmap.in_idx[sl]] @ kernel[d]
    if bias is not None:
        out += bias
    return out


def conv_gather_scatter_backward(feats, kernel, kmap: KernelMap, grad_out):
    """Array-level gradients of `conv_gather_scatter`.

    Returns (grad_feats, grad_kernel, grad_bias); grad_bias is the column sum
    of grad_out and should be discarded when the forward had no bias.
    """
    grad_feats = np.zeros_like(feats)
    grad_kernel = np.zeros_like(kernel)
    dtype = feats.dtype
    fns = _compiled_conv_fns(dtype) if kernel.dtype == dtype == grad_out.dtype else None
    if fns is not None and kmap.n_triples:
        fns[1](np.ascontiguousarray(feats), np.ascontiguousarray(kernel),
               kmap.in_idx, kmap.out_idx, kmap._ptr,
               np.ascontiguousarray(grad_out), grad_feats, grad_kernel)
    else:
        for d, sl in kmap.buckets():
            g = grad_out[kmap.out_idx[sl]]
            grad_feats[kmap.in_idx[sl]] += g @ kernel[d].T
            grad_kernel[d] = feats[kmap.in_idx[sl]].T @ g
    grad_bias = grad_out.sum(axis=0)
    return grad_feats, grad_kernel, grad_bias


def sparse_conv_forward(
    inp: SparseTensor,
    weights: ConvWeights,
    out_coords,
    kernel_size,
    dilation=None,
    drop_empty=False,
    out_stride=None,
    kmap: Optional[KernelMap] = None,
):
    """Generalized sparse 3D convolution.

    Args:
        inp: input sparse tensor.
        weights: kernel (k^3, C_in, C_out) and optional bias.
        out_coords: coordinates at which outputs are produced.
        kernel_size: odd kernel edge; must match weights.
        dilation: tap spacing; defaults to the input stride.
        drop_empty: when True, output rows with no occupied neighbor are
            removed from the result instead of being kept as bias-only rows.
        out_stride: stride recorded on the output tensor (defaults to the
            input stride).
        kmap: a precomputed kernel map for these exact coordinate sets.

    Returns:
        (output SparseTensor, KernelMap). When drop_empty is set, the kernel
        map still refers to the full declared out_coords row numbering.
    """
    if weights.kernel.shape[0] != kernel_size ** 3:
        raise ValueError("kernel row count must equal kernel_size**3")
    if weights.c_in != inp.n_channels:
        raise ValueError(
            f"channel mismatch: input has {inp.n_channels}, kernel expects {weights.c_in}"
        )
    if dilation is None:
        dilation = inp.stride
    oc = as_coords(out_coords)
    if kmap is None:
        kmap = build_kernel_map(inp.coords, oc, kernel_size, dilation)
    feats = inp.feats
    out = conv_gather_scatter(feats, np.asarray(weights.kernel, dtype=feats.dtype),
                              kmap,
                              None if weights.bias is None
                              else np.asarray(weights.bias, dtype=feats.dtype))
    stride = inp.stride if out_stride is None else out_stride
    if drop_empty:
        keep = kmap.covered_out_mask()
        oc = oc[keep]
        out = out[keep]
    tensor = SparseTensor(oc, out, stride, inp.voxel_size)
    return tensor, kmap


def sparse_conv_backward(inp: SparseTensor, weights: ConvWeights, kmap: KernelMap, grad_out):
    """Exact analytic gradients of the forward contraction.

    grad_out must be aligned with the kernel map's full output row numbering
    (re-embed dropped rows as zeros before calling when drop_empty was used).

    Returns (grad_input_feats, ConvWeights(grad_kernel, grad_bias)).
    """
    grad_out = np.asarray(grad_out)
    if grad_out.shape != (kmap.n_out, weights.c_out):
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match kernel map "
            f"({kmap.n_out}, {weights.c_out})"
        )
    if kmap.n_in != inp.n_voxels:
        raise ValueError("kernel map was built for a different input tensor")
    gf, gk, gb = conv_gather_scatter_backward(inp.feats, np.asarray(weights.kernel, dtype=inp.feats.dtype), kmap, grad_out)
    return gf, ConvWeights(gk, gb if weights.bias is not None else None)


class KernelMapCache:
    """Content-addressed LRU cache of kernel maps.

    Keyed by digests of both coordinate arrays plus (k, dilation); safe
    because a kernel map is a pure function of those. Used on the backbone
    path where coordinate sets repeat across training steps.
    """

    def __init__(self, max_items=512):
        from collections import OrderedDict

        self.max_items = max_items
        self._store = OrderedDict()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def _digest(arr):
        import hashlib

        return hashlib.blake2b(np.ascontiguousarray(arr).tobytes(), digest_size=16).digest()

    def get(self, in_coords, out_coords, kernel_size, dilation) -> KernelMap:
        key = (self._digest(in_coords), self._digest(out_coords), kernel_size, dilation)
        hit = self._store.get(key)
        if hit is not None:
            self.hits += 1
            self._store.move_to_end(key)
            return hit
        self.misses += 1
        kmap = build_kernel_map(in_coords, out_coords, kernel_size, dilation)
        self._store[key] = kmap
        if len(self._store) > self.max_items:
            self._store.popitem(last=False)
        return kmap


def strided_downsample_coords(coords, factor) -> np.ndarray:
    """Parent coordinates floor(c / factor) * factor, deduplicated.

    The result is sorted lexicographically by (x, y, z), which keeps
    downstream kernel maps deterministic.
    """
    if factor < 2:
        raise ValueError("downsample factor must be >= 2")
    c = as_coords(coords)
    if len(c) == 0:
        return c
    parents = (c.astype(np.int64) // factor) * factor
    keys = pack_coords(parents)
    _, first = np.unique(keys, return_index=True)
    return parents[np.sort(first)].astype(np.int32)


def upsample_interpolate(low: SparseTensor, target_coords, target_stride) -> SparseTensor:
    """Nearest-parent upsampling: each target cell copies the feature of the
    coarse cell enclosing it; targets with no occupied parent get zeros."""
    if low.stride % target_stride != 0:
        raise ValueError(
            f"low stride {low.stride} is not a multiple of target stride {target_stride}"
        )
    tc = as_coords(target_coords)
    parents = (tc.astype(np.int64) // low.stride) * low.stride
    idx = coord_lookup(low.coords, parents)
    out = np.zeros((len(tc), low.n_channels), dtype=low.feats.dtype)
    hit = idx >= 0
    out[hit] = low.feats[idx[hit]]
    return SparseTensor(tc, out, target_stride, low.voxel_size)


def upsample_parent_index(low: SparseTensor, target_coords):
    """Row index into `low` of each target's parent cell, -1 when empty."""
    tc = as_coords(target_coords)
    parents = (tc.astype(np.int64) // low.stride) * low.stride
    return coord_lookup(low.coords, parents)
