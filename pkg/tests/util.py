"""Shared helpers for the test suite."""
import numpy as np

from sparsedet3d.geometry import Box3D


def random_coords(rng, n, lo=0, hi=8):
    """n unique random int32 coordinates in [lo, hi)^3."""
    seen = set()
    out = []
    while len(out) < n:
        c = tuple(int(v) for v in rng.integers(lo, hi, size=3))
        if c not in seen:
            seen.add(c)
            out.append(c)
    return np.array(out, dtype=np.int32)


def random_box(rng, center_scale=2.0, dim_lo=0.3, dim_hi=2.0):
    c = rng.uniform(-center_scale, center_scale, size=3)
    d = rng.uniform(dim_lo, dim_hi, size=3)
    theta = rng.uniform(-np.pi, np.pi)
    return Box3D(c[0], c[1], c[2], d[0], d[1], d[2], theta)


def occupancy_coords(rng, grid, occupancy):
    """Coordinates of a grid^3 lattice kept with the given occupancy."""
    all_cells = np.stack(np.meshgrid(*([np.arange(grid)] * 3), indexing="ij"), -1).reshape(-1, 3)
    if occupancy >= 1.0:
        return all_cells.astype(np.int32)
    n = max(1, int(round(occupancy * len(all_cells))))
    pick = rng.choice(len(all_cells), size=n, replace=False)
    return all_cells[np.sort(pick)].astype(np.int32)
