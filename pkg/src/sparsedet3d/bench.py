"""Throughput benchmarks: kernel-map construction and sparse convolution
across occupancy levels and kernel sizes, compiled extension against the
pure-numpy fallback, plus the rotated-IoU pair kernel.

Emits plot-ready tab-separated rows; every (occupancy, kernel) cell of the
configured grid produces one row per backend.
"""
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import _kernels
from ._kernels import fallback
from .oracles import dense_conv_oracle, rel_err
from .sparse import KernelMap, SparseTensor, build_kernel_map, sparse_conv_forward
from .sparse import ConvWeights

OCCUPANCIES = (0.05, 0.3, 1.0)
KERNELS = (1, 3, 5)
GRID = 16
CHANNELS = 32


def _grid_coords(rng, grid, occupancy):
    cells = np.stack(np.meshgrid(*([np.arange(grid)] * 3), indexing="ij"), -1).reshape(-1, 3)
    if occupancy >= 1.0:
        return cells.astype(np.int32)
    n = max(1, int(round(occupancy * len(cells))))
    pick = rng.choice(len(cells), size=n, replace=False)
    return cells[np.sort(pick)].astype(np.int32)


def _time(fn, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _backends():
    out = [("fallback", fallback)]
    if _kernels.compiled is not None:
        out.insert(0, ("compiled", _kernels.compiled))
    return out


def run_bench(seed=0, grid=GRID, occupancies=OCCUPANCIES, kernels=KERNELS,
              channels=CHANNELS, out=None):
    """Run the benchmark table; returns the rows and writes TSV to `out`."""
    rng = np.random.default_rng(seed)
    rows = []
    header = ("benchmark", "backend", "grid", "occupancy", "kernel",
              "n_voxels", "n_triples", "ms", "items_per_s")
    rows.append(header)

    with threadpool_limits(limits=1, user_api="blas"):
        for occ in occupancies:
            coords = _grid_coords(rng, grid, occ)
            feats = rng.normal(size=(len(coords), channels))
            for k in kernels:
                for name, backend in _backends():
                    t = _time(lambda: backend.kmap_build(coords, coords, k, 1))
                    ii, oi, di = backend.kmap_build(coords, coords, k, 1)
                    rows.append(("kmap_build", name, grid, occ, k, len(coords),
                                 len(ii), round(t * 1e3, 3),
                                 round(len(coords) / t)))
                kmap = build_kernel_map(coords, coords, k)
                kernel = rng.normal(size=(k ** 3, channels, channels))
                w = ConvWeights(kernel)
                x = SparseTensor(coords, feats)
                for name, backend in _backends():
                    import sparsedet3d.sparse as sp

                    saved = sp._compiled
                    sp._compiled = backend if name == "compiled" else None
                    try:
                        t = _time(lambda: sparse_conv_forward(x, w, coords, k, kmap=kmap))
                    finally:
                        sp._compiled = saved
                    rows.append(("conv_forward", name, grid, occ, k, len(coords),
                                 kmap.n_triples, round(t * 1e3, 3),
                                 round(kmap.n_triples / t)))

        # correctness spot-check rides along: full grid vs the dense oracle
        coords = _grid_coords(rng, grid, 1.0)
        feats = rng.normal(size=(len(coords), 8))
        kernel = rng.normal(size=(27, 8, 8))
        y, _ = sparse_conv_forward(SparseTensor(coords, feats), ConvWeights(kernel), coords, 3)
        ref = dense_conv_oracle(coords, feats, kernel, coords, 3)
        rows.append(("dense_check", _kernels.BACKEND, grid, 1.0, 3, len(coords),
                     0, 0.0, float(rel_err(y.feats, ref) <= 1e-6)))

        # rotated-IoU pair throughput
        n_boxes = 200
        boxes = np.column_stack([
            rng.uniform(-2, 2, (n_boxes, 3)),
            rng.uniform(0.3, 2.0, (n_boxes, 3)),
            rng.uniform(-np.pi, np.pi, (n_boxes, 1)),
        ])
        for name, backend in _backends():
            t = _time(lambda: backend.iou3d_pairs(boxes, boxes), repeats=3)
            rows.append(("iou3d_pairs", name, 0, 0.0, 0, n_boxes,
                         n_boxes * n_boxes, round(t * 1e3, 3),
                         round(n_boxes * n_boxes / t)))

    text = "\n".join("\t".join(str(v) for v in row) for row in rows) + "\n"
    if out is not None:
        from pathlib import Path

        Path(out).write_text(text)
    return rows, text
