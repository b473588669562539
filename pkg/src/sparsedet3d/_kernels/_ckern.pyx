# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: coordinate hashing, kernel-map construction, and
rotated-rectangle clipping. Mirrors `fallback.py` function for function;
arithmetic is kept in the same order so results agree with the pure path.

Coordinate index: 64-bit keys packing three 21-bit biased components,
mixed by the splitmix64 finalizer into an open-addressing table with
linear probing (power-of-two capacity, load factor <= 0.5).
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport cos, fabs, sin
from libc.stdint cimport int32_t, int64_t, uint64_t
from scipy.linalg.cython_blas cimport dgemm, sgemm

cnp.import_array()

COORD_BOUND = 1 << 20
AREA_EPS = 1e-12

cdef double _AREA_EPS = 1e-12
cdef int64_t _BOUND = 1 << 20
cdef int64_t _EMPTY = -1


cdef inline uint64_t _mix(uint64_t x) noexcept nogil:
    x += <uint64_t>0x9E3779B97F4A7C15
    x = (x ^ (x >> 30)) * <uint64_t>0xBF58476D1CE4E5B9
    x = (x ^ (x >> 27)) * <uint64_t>0x94D049BB133111EB
    return x ^ (x >> 31)


cdef inline int64_t _pack(int64_t x, int64_t y, int64_t z) noexcept nogil:
    return ((x + _BOUND) << 42) | ((y + _BOUND) << 21) | (z + _BOUND)


cdef inline bint _in_range(int64_t x, int64_t y, int64_t z) noexcept nogil:
    return (x >= -_BOUND and x < _BOUND and y >= -_BOUND and y < _BOUND
            and z >= -_BOUND and z < _BOUND)


cdef int64_t _table_size(Py_ssize_t n) noexcept:
    cdef int64_t m = 16
    while m < 2 * n + 1:
        m <<= 1
    return m


cdef void _table_insert(int64_t[::1] keys, int32_t[::1] vals, int64_t key,
                        int32_t val) noexcept nogil:
    cdef uint64_t mask = <uint64_t>(keys.shape[0] - 1)
    cdef uint64_t slot = _mix(<uint64_t>key) & mask
    while keys[slot] != _EMPTY:
        if keys[slot] == key:
            return  # caller guarantees uniqueness; keep first
        slot = (slot + 1) & mask
    keys[slot] = key
    vals[slot] = val


cdef int32_t _table_find(int64_t[::1] keys, int32_t[::1] vals,
                         int64_t key) noexcept nogil:
    cdef uint64_t mask = <uint64_t>(keys.shape[0] - 1)
    cdef uint64_t slot = _mix(<uint64_t>key) & mask
    while keys[slot] != _EMPTY:
        if keys[slot] == key:
            return vals[slot]
        slot = (slot + 1) & mask
    return -1


def coord_lookup(table_coords, query_coords):
    """Row index of each query coordinate in table_coords, -1 if absent."""
    cdef cnp.ndarray[int32_t, ndim=2] tc = np.ascontiguousarray(table_coords, dtype=np.int32)
    cdef cnp.ndarray[int32_t, ndim=2] qc = np.ascontiguousarray(query_coords, dtype=np.int32)
    cdef Py_ssize_t n = tc.shape[0], m = qc.shape[0]
    cdef cnp.ndarray[int32_t, ndim=1] out = np.full(m, -1, dtype=np.int32)
    if n == 0 or m == 0:
        return out
    cdef int64_t cap = _table_size(n)
    cdef cnp.ndarray[int64_t, ndim=1] keys = np.full(cap, _EMPTY, dtype=np.int64)
    cdef cnp.ndarray[int32_t, ndim=1] vals = np.zeros(cap, dtype=np.int32)
    cdef int64_t[::1] kv = keys
    cdef int32_t[::1] vv = vals
    cdef Py_ssize_t i
    cdef int64_t x, y, z
    for i in range(n):
        x, y, z = tc[i, 0], tc[i, 1], tc[i, 2]
        if not _in_range(x, y, z):
            raise ValueError("coordinate outside packable range [-2**20, 2**20)")
        _table_insert(kv, vv, _pack(x, y, z), <int32_t>i)
    for i in range(m):
        x, y, z = qc[i, 0], qc[i, 1], qc[i, 2]
        if _in_range(x, y, z):
            out[i] = _table_find(kv, vv, _pack(x, y, z))
    return out


def kmap_build(in_coords, out_coords, int kernel_size, int dilation):
    """(in_idx, out_idx, off_idx) triples, offset-major then output-ascending.

    Same contract and ordering as the fallback: triple (i, o, d) iff
    in_coords[i] == out_coords[o] + dilation * offset(d), offsets enumerated
    lexicographically with z fastest.
    """
    cdef cnp.ndarray[int32_t, ndim=2] ic = np.ascontiguousarray(in_coords, dtype=np.int32)
    cdef cnp.ndarray[int32_t, ndim=2] oc = np.ascontiguousarray(out_coords, dtype=np.int32)
    cdef Py_ssize_t n = ic.shape[0], m = oc.shape[0]
    empty = (np.empty(0, np.int32), np.empty(0, np.int32), np.empty(0, np.int32))
    if n == 0 or m == 0:
        return empty

    cdef int64_t cap = _table_size(n)
    cdef cnp.ndarray[int64_t, ndim=1] keys = np.full(cap, _EMPTY, dtype=np.int64)
    cdef cnp.ndarray[int32_t, ndim=1] vals = np.zeros(cap, dtype=np.int32)
    cdef int64_t[::1] kv = keys
    cdef int32_t[::1] vv = vals
    cdef Py_ssize_t i
    cdef int64_t x, y, z
    for i in range(n):
        x, y, z = ic[i, 0], ic[i, 1], ic[i, 2]
        if not _in_range(x, y, z):
            raise ValueError("coordinate outside packable range [-2**20, 2**20)")
        _table_insert(kv, vv, _pack(x, y, z), <int32_t>i)

    cdef int r = kernel_size // 2
    cdef Py_ssize_t capacity = max(1024, 4 * m)
    cdef cnp.ndarray[int32_t, ndim=1] t_in = np.empty(capacity, dtype=np.int32)
    cdef cnp.ndarray[int32_t, ndim=1] t_out = np.empty(capacity, dtype=np.int32)
    cdef cnp.ndarray[int32_t, ndim=1] t_off = np.empty(capacity, dtype=np.int32)
    cdef Py_ssize_t count = 0
    cdef int ox, oy, oz, d
    cdef Py_ssize_t o
    cdef int32_t hit
    cdef int64_t cx, cy, cz

    d = 0
    for ox in range(-r, r + 1):
        for oy in range(-r, r + 1):
            for oz in range(-r, r + 1):
                for o in range(m):
                    cx = oc[o, 0] + <int64_t>dilation * ox
                    cy = oc[o, 1] + <int64_t>dilation * oy
                    cz = oc[o, 2] + <int64_t>dilation * oz
                    if not _in_range(cx, cy, cz):
                        continue
                    hit = _table_find(kv, vv, _pack(cx, cy, cz))
                    if hit >= 0:
                        if count == capacity:
                            capacity *= 2
                            t_in = np.resize(t_in, capacity)
                            t_out = np.resize(t_out, capacity)
                            t_off = np.resize(t_off, capacity)
                        t_in[count] = hit
                        t_out[count] = <int32_t>o
                        t_off[count] = d
                        count += 1
                d += 1
    return (t_in[:count].copy(), t_out[:count].copy(), t_off[:count].copy())


# ---------------------------------------------------------------------------
# Sparse convolution gather-scatter: one BLAS GEMM per offset bucket, with
# the gather/scatter row copies done in C. Row-major matrices are handed to
# Fortran GEMM via the transpose identity: C_rm = A_rm . B_rm is computed as
# the column-major product B . A into C's buffer.
# ---------------------------------------------------------------------------


def conv_fwd_f64(double[:, ::1] feats, double[:, :, ::1] kernel,
                 int32_t[::1] in_idx, int32_t[::1] out_idx,
                 int64_t[::1] bucket_ptr, double[:, ::1] out):
    """out[out_idx] += feats[in_idx] @ kernel[d] per offset bucket."""
    cdef int c_in = <int>feats.shape[1]
    cdef int c_out = <int>out.shape[1]
    cdef Py_ssize_t k3 = kernel.shape[0]
    cdef Py_ssize_t max_nb = 0, d, lo, hi
    for d in range(k3):
        if bucket_ptr[d + 1] - bucket_ptr[d] > max_nb:
            max_nb = bucket_ptr[d + 1] - bucket_ptr[d]
    if max_nb == 0:
        return
    xbuf_arr = np.empty((max_nb, c_in), dtype=np.float64)
    ybuf_arr = np.empty((max_nb, c_out), dtype=np.float64)
    cdef double[:, ::1] xbuf = xbuf_arr
    cdef double[:, ::1] ybuf = ybuf_arr
    cdef int nb, i, j
    cdef double one = 1.0, zero = 0.0
    cdef Py_ssize_t t
    with nogil:
        for d in range(k3):
            lo = bucket_ptr[d]
            hi = bucket_ptr[d + 1]
            nb = <int>(hi - lo)
            if nb == 0:
                continue
            for t in range(nb):
                i = in_idx[lo + t]
                for j in range(c_in):
                    xbuf[t, j] = feats[i, j]
            # ybuf(nb,c_out) = xbuf(nb,c_in) @ kernel[d](c_in,c_out)
            dgemm("N", "N", &c_out, &nb, &c_in, &one,
                  &kernel[d, 0, 0], &c_out, &xbuf[0, 0], &c_in,
                  &zero, &ybuf[0, 0], &c_out)
            for t in range(nb):
                i = out_idx[lo + t]
                for j in range(c_out):
                    out[i, j] += ybuf[t, j]


def conv_bwd_f64(double[:, ::1] feats, double[:, :, ::1] kernel,
                 int32_t[::1] in_idx, int32_t[::1] out_idx,
                 int64_t[::1] bucket_ptr, double[:, ::1] grad_out,
                 double[:, ::1] grad_feats, double[:, :, ::1] grad_kernel):
    """grad_feats[i] += grad_out[o] @ kernel[d]^T and
    grad_kernel[d] = feats[in]^T @ grad_out[out], per bucket."""
    cdef int c_in = <int>feats.shape[1]
    cdef int c_out = <int>grad_out.shape[1]
    cdef Py_ssize_t k3 = kernel.shape[0]
    cdef Py_ssize_t max_nb = 0, d, lo, hi
    for d in range(k3):
        if bucket_ptr[d + 1] - bucket_ptr[d] > max_nb:
            max_nb = bucket_ptr[d + 1] - bucket_ptr[d]
    if max_nb == 0:
        return
    xbuf_arr = np.empty((max_nb, c_in), dtype=np.float64)
    gbuf_arr = np.empty((max_nb, c_out), dtype=np.float64)
    tbuf_arr = np.empty((max_nb, c_in), dtype=np.float64)
    cdef double[:, ::1] xbuf = xbuf_arr
    cdef double[:, ::1] gbuf = gbuf_arr
    cdef double[:, ::1] tbuf = tbuf_arr
    cdef int nb, i, j
    cdef double one = 1.0, zero = 0.0
    cdef Py_ssize_t t
    with nogil:
        for d in range(k3):
            lo = bucket_ptr[d]
            hi = bucket_ptr[d + 1]
            nb = <int>(hi - lo)
            if nb == 0:
                continue
            for t in range(nb):
                i = in_idx[lo + t]
                for j in range(c_in):
                    xbuf[t, j] = feats[i, j]
                i = out_idx[lo + t]
                for j in range(c_out):
                    gbuf[t, j] = grad_out[i, j]
            # tbuf(nb,c_in) = gbuf(nb,c_out) @ kernel[d]^T(c_out,c_in)
            dgemm("T", "N", &c_in, &nb, &c_out, &one,
                  &kernel[d, 0, 0], &c_out, &gbuf[0, 0], &c_out,
                  &zero, &tbuf[0, 0], &c_in)
            for t in range(nb):
                i = in_idx[lo + t]
                for j in range(c_in):
                    grad_feats[i, j] += tbuf[t, j]
            # grad_kernel[d](c_in,c_out) = xbuf^T(c_in,nb) @ gbuf(nb,c_out)
            dgemm("N", "T", &c_out, &c_in, &nb, &one,
                  &gbuf[0, 0], &c_out, &xbuf[0, 0], &c_in,
                  &zero, &grad_kernel[d, 0, 0], &c_out)


def conv_fwd_f32(float[:, ::1] feats, float[:, :, ::1] kernel,
                 int32_t[::1] in_idx, int32_t[::1] out_idx,
                 int64_t[::1] bucket_ptr, float[:, ::1] out):
    cdef int c_in = <int>feats.shape[1]
    cdef int c_out = <int>out.shape[1]
    cdef Py_ssize_t k3 = kernel.shape[0]
    cdef Py_ssize_t max_nb = 0, d, lo, hi
    for d in range(k3):
        if bucket_ptr[d + 1] - bucket_ptr[d] > max_nb:
            max_nb = bucket_ptr[d + 1] - bucket_ptr[d]
    if max_nb == 0:
        return
    xbuf_arr = np.empty((max_nb, c_in), dtype=np.float32)
    ybuf_arr = np.empty((max_nb, c_out), dtype=np.float32)
    cdef float[:, ::1] xbuf = xbuf_arr
    cdef float[:, ::1] ybuf = ybuf_arr
    cdef int nb, i, j
    cdef float one = 1.0, zero = 0.0
    cdef Py_ssize_t t
    with nogil:
        for d in range(k3):
            lo = bucket_ptr[d]
            hi = bucket_ptr[d + 1]
            nb = <int>(hi - lo)
            if nb == 0:
                continue
            for t in range(nb):
                i = in_idx[lo + t]
                for j in range(c_in):
                    xbuf[t, j] = feats[i, j]
            sgemm("N", "N", &c_out, &nb, &c_in, &one,
                  &kernel[d, 0, 0], &c_out, &xbuf[0, 0], &c_in,
                  &zero, &ybuf[0, 0], &c_out)
            for t in range(nb):
                i = out_idx[lo + t]
                for j in range(c_out):
                    out[i, j] += ybuf[t, j]


def conv_bwd_f32(float[:, ::1] feats, float[:, :, ::1] kernel,
                 int32_t[::1] in_idx, int32_t[::1] out_idx,
                 int64_t[::1] bucket_ptr, float[:, ::1] grad_out,
                 float[:, ::1] grad_feats, float[:, :, ::1] grad_kernel):
    cdef int c_in = <int>feats.shape[1]
    cdef int c_out = <int>grad_out.shape[1]
    cdef Py_ssize_t k3 = kernel.shape[0]
    cdef Py_ssize_t max_nb = 0, d, lo, hi
    for d in range(k3):
        if bucket_ptr[d + 1] - bucket_ptr[d] > max_nb:
            max_nb = bucket_ptr[d + 1] - bucket_ptr[d]
    if max_nb == 0:
        return
    xbuf_arr = np.empty((max_nb, c_in), dtype=np.float32)
    gbuf_arr = np.empty((max_nb, c_out), dtype=np.float32)
    tbuf_arr = np.empty((max_nb, c_in), dtype=np.float32)
    cdef float[:, ::1] xbuf = xbuf_arr
    cdef float[:, ::1] gbuf = gbuf_arr
    cdef float[:, ::1] tbuf = tbuf_arr
    cdef int nb, i, j
    cdef float one = 1.0, zero = 0.0
    cdef Py_ssize_t t
    with nogil:
        for d in range(k3):
            lo = bucket_ptr[d]
            hi = bucket_ptr[d + 1]
            nb = <int>(hi - lo)
            if nb == 0:
                continue
            for t in range(nb):
                i = in_idx[lo + t]
                for j in range(c_in):
                    xbuf[t, j] = feats[i, j]
                i = out_idx[lo + t]
                for j in range(c_out):
                    gbuf[t, j] = grad_out[i, j]
            sgemm("T", "N", &c_in, &nb, &c_out, &one,
                  &kernel[d, 0, 0], &c_out, &gbuf[0, 0], &c_out,
                  &zero, &tbuf[0, 0], &c_in)
            for t in range(nb):
                i = in_idx[lo + t]
                for j in range(c_in):
                    grad_feats[i, j] += tbuf[t, j]
            sgemm("N", "T", &c_out, &c_in, &nb, &one,
                  &gbuf[0, 0], &c_out, &xbuf[0, 0], &c_in,
                  &zero, &grad_kernel[d, 0, 0], &c_out)


# ---------------------------------------------------------------------------
# Rotated rectangle clipping / 3D IoU, same arithmetic as the fallback.
# ---------------------------------------------------------------------------


cdef void _rect_corners(double cx, double cy, double w, double l, double t,
                        double* xs, double* ys) noexcept nogil:
    cdef double c = cos(t), s = sin(t)
    cdef double hw = 0.5 * w, hl = 0.5 * l
    xs[0] = cx + c * (-hw) - s * (-hl); ys[0] = cy + s * (-hw) + c * (-hl)
    xs[1] = cx + c * hw - s * (-hl);    ys[1] = cy + s * hw + c * (-hl)
    xs[2] = cx + c * hw - s * hl;       ys[2] = cy + s * hw + c * hl
    xs[3] = cx + c * (-hw) - s * hl;    ys[3] = cy + s * (-hw) + c * hl


cdef double _rect_inter_area(double cx1, double cy1, double w1, double l1, double t1,
                             double cx2, double cy2, double w2, double l2, double t2) noexcept nogil:
    cdef double px_buf[16]
    cdef double py_buf[16]
    cdef double qx_buf[16]
    cdef double qy_buf[16]
    cdef double cxs[4]
    cdef double cys[4]
    cdef double ax, ay, bx, by, ex, ey, sp, sq, tpar, px, py, qx, qy, area
    cdef int npoly = 4, nout, j, i, inext

    _rect_corners(cx1, cy1, w1, l1, t1, px_buf, py_buf)
    _rect_corners(cx2, cy2, w2, l2, t2, cxs, cys)

    for j in range(4):
        ax = cxs[j]; ay = cys[j]
        bx = cxs[(j + 1) % 4]; by = cys[(j + 1) % 4]
        ex = bx - ax; ey = by - ay
        nout = 0
        for i in range(npoly):
            inext = (i + 1) % npoly
            px = px_buf[i]; py = py_buf[i]
            qx = px_buf[inext]; qy = py_buf[inext]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            if sp >= 0.0:
                qx_buf[nout] = px; qy_buf[nout] = py; nout += 1
            if (sp > 0.0 and sq < 0.0) or (sp < 0.0 and sq > 0.0):
                tpar = sp / (sp - sq)
                qx_buf[nout] = px + tpar * (qx - px)
                qy_buf[nout] = py + tpar * (qy - py)
                nout += 1
        npoly = nout
        if npoly == 0:
            return 0.0
        for i in range(npoly):
            px_buf[i] = qx_buf[i]; py_buf[i] = qy_buf[i]

    area = 0.0
    for i in range(npoly):
        inext = (i + 1) % npoly
        area += px_buf[i] * py_buf[inext] - px_buf[inext] * py_buf[i]
    area = 0.5 * fabs(area)
    return area if area > _AREA_EPS else 0.0


def rect_intersection_area(double cx1, double cy1, double w1, double l1, double t1,
                           double cx2, double cy2, double w2, double l2, double t2):
    return _rect_inter_area(cx1, cy1, w1, l1, t1, cx2, cy2, w2, l2, t2)


cdef double _iou3d(double ax, double ay, double az, double aw, double al, double ah, double at,
                   double bx, double by, double bz, double bw, double bl, double bh, double bt) noexcept nogil:
    cdef double zlo = az - 0.5 * ah
    cdef double zlo2 = bz - 0.5 * bh
    if zlo2 > zlo:
        zlo = zlo2
    cdef double zhi = az + 0.5 * ah
    cdef double zhi2 = bz + 0.5 * bh
    if zhi2 < zhi:
        zhi = zhi2
    cdef double dz = zhi - zlo
    if dz <= 0.0:
        return 0.0
    cdef double area = _rect_inter_area(ax, ay, aw, al, at, bx, by, bw, bl, bt)
    cdef double inter = area * dz
    if inter <= 0.0:
        return 0.0
    cdef double union_ = aw * al * ah + bw * bl * bh - inter
    return inter / union_


def iou3d_single(a, b):
    """IoU of two 7-parameter boxes (cx, cy, cz, w, l, h, theta)."""
    return _iou3d(a[0], a[1], a[2], a[3], a[4], a[5], a[6],
                  b[0], b[1], b[2], b[3], b[4], b[5], b[6])


def iou3d_pairs(boxes_a, boxes_b):
    """Pairwise IoU matrix between (N, 7) and (M, 7) box arrays."""
    cdef cnp.ndarray[double, ndim=2] a = np.ascontiguousarray(boxes_a, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] b = np.ascontiguousarray(boxes_b, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0]
    cdef cnp.ndarray[double, ndim=2] out = np.zeros((n, m), dtype=np.float64)
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            for j in range(m):
                out[i, j] = _iou3d(a[i, 0], a[i, 1], a[i, 2], a[i, 3], a[i, 4], a[i, 5], a[i, 6],
                                   b[j, 0], b[j, 1], b[j, 2], b[j, 3], b[j, 4], b[j, 5], b[j, 6])
    return out
