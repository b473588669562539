"""Kernel backend selection.

The compiled Cython extension is preferred when importable; the pure-numpy
fallback is used otherwise. `SPARSEDET3D_PURE=1` forces the fallback, which
is what the benchmark uses to compare the two sides.
"""
import os

from . import fallback

compiled = None
if os.environ.get("SPARSEDET3D_PURE", "") != "1":
    try:
        from . import _ckern as compiled  # type: ignore[no-redef]
    except ImportError:
        compiled = None

active = compiled if compiled is not None else fallback

BACKEND = "compiled" if compiled is not None else "fallback"

pack_coords = fallback.pack_coords
kernel_offsets = fallback.kernel_offsets
COORD_BOUND = fallback.COORD_BOUND

kmap_build = active.kmap_build
coord_lookup = active.coord_lookup
iou3d_single = active.iou3d_single
iou3d_pairs = active.iou3d_pairs
rect_intersection_area = active.rect_intersection_area
