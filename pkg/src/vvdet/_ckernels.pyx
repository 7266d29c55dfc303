# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Semantics mirror ``vvdet._pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor
from libc.stdint cimport int64_t, uint64_t

cnp.import_array()

DEF AXIS_BITS = 21
DEF AXIS_BIAS = 1048576  # 2**20
DEF AXIS_MASK = 2097151  # 2**21 - 1
DEF EMPTY = -1


cdef inline int64_t _pack(int64_t i, int64_t j, int64_t k) noexcept nogil:
    return (((i + AXIS_BIAS) & AXIS_MASK) << 42) | (((j + AXIS_BIAS) & AXIS_MASK) << 21) | ((k + AXIS_BIAS) & AXIS_MASK)


cdef inline uint64_t _mix(uint64_t x) noexcept nogil:
    # splitmix64 finalizer
    x ^= x >> 30
    x *= <uint64_t>0xbf58476d1ce4e5b9
    x ^= x >> 27
    x *= <uint64_t>0x94d049bb133111eb
    x ^= x >> 31
    return x


cdef class _CoordHash:
    """Open-addressing table from packed coordinate to row index."""

    cdef int64_t[::1] keys
    cdef int64_t[::1] vals
    cdef uint64_t mask

    def __cinit__(self, const int64_t[:, :] coords):
        cdef Py_ssize_t n = coords.shape[0]
        cdef Py_ssize_t cap = 16
        while cap < 2 * n + 1:
            cap <<= 1
        self.keys = np.full(cap, EMPTY, dtype=np.int64)
        self.vals = np.full(cap, EMPTY, dtype=np.int64)
        self.mask = cap - 1
        cdef Py_ssize_t r
        cdef int64_t key
        cdef uint64_t slot
        for r in range(n):
            key = _pack(coords[r, 0], coords[r, 1], coords[r, 2])
            slot = _mix(<uint64_t>key) & self.mask
            while self.keys[slot] != EMPTY and self.keys[slot] != key:
                slot = (slot + 1) & self.mask
            if self.keys[slot] == EMPTY:
                self.keys[slot] = key
                self.vals[slot] = r

    cdef inline int64_t lookup(self, int64_t key) noexcept nogil:
        cdef uint64_t slot = _mix(<uint64_t>key) & self.mask
        while True:
            if self.keys[slot] == key:
                return self.vals[slot]
            if self.keys[slot] == EMPTY:
                return -1
            slot = (slot + 1) & self.mask


def neighbor_table(const int64_t[:, :] in_coords, const int64_t[:, :] query, const int64_t[:, :] offsets):
    cdef _CoordHash table = _CoordHash(in_coords)
    cdef Py_ssize_t m = query.shape[0]
    cdef Py_ssize_t kk = offsets.shape[0]
    out = np.empty((m, kk), dtype=np.int64)
    cdef int64_t[:, ::1] o = out
    cdef Py_ssize_t r, k
    with nogil:
        for r in range(m):
            for k in range(kk):
                o[r, k] = table.lookup(_pack(query[r, 0] + offsets[k, 0],
                                             query[r, 1] + offsets[k, 1],
                                             query[r, 2] + offsets[k, 2]))
    return out


def segment_max(const double[:, :] x, const int64_t[:] seg, Py_ssize_t num_segments):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t c = x.shape[1]
    out = np.zeros((num_segments, c), dtype=np.float64)
    arg = np.full((num_segments, c), -1, dtype=np.int64)
    cdef double[:, ::1] o = out
    cdef int64_t[:, ::1] a = arg
    cdef Py_ssize_t i, j
    cdef int64_t g
    with nogil:
        for i in range(n):
            g = seg[i]
            for j in range(c):
                # strict '>' keeps the lowest index on ties
                if a[g, j] < 0 or x[i, j] > o[g, j]:
                    o[g, j] = x[i, j]
                    a[g, j] = i
    return out, arg


def scatter_add_rows(const double[:, :] src, const int64_t[:] idx, Py_ssize_t n_out):
    cdef Py_ssize_t n = src.shape[0]
    cdef Py_ssize_t c = src.shape[1]
    out = np.zeros((n_out, c), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef int64_t t
    with nogil:
        for i in range(n):
            t = idx[i]
            for j in range(c):
                o[t, j] += src[i, j]
    return out


cdef inline int64_t _find(int64_t[::1] parent, int64_t x) noexcept nogil:
    cdef int64_t root = x
    cdef int64_t nxt
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


def radius_components(const double[:, :] pts, double radius):
    cdef Py_ssize_t n = pts.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    cells_np = np.floor(np.asarray(pts) / radius).astype(np.int64)
    cdef int64_t[:, ::1] cells = np.ascontiguousarray(cells_np)
    order_np = np.lexsort((cells_np[:, 2], cells_np[:, 1], cells_np[:, 0])).astype(np.int64)
    cdef int64_t[::1] order = order_np
    # cell table: packed key -> first slot in ``order``; cells are contiguous after sorting
    uniq, first, counts = np.unique(
        (((cells_np[order_np, 0] + AXIS_BIAS) & AXIS_MASK) << 42)
        | (((cells_np[order_np, 1] + AXIS_BIAS) & AXIS_MASK) << 21)
        | ((cells_np[order_np, 2] + AXIS_BIAS) & AXIS_MASK),
        return_index=True, return_counts=True)
    cell_coords = cells_np[order_np[first]]
    cdef _CoordHash table = _CoordHash(np.ascontiguousarray(cell_coords))
    cdef int64_t[::1] cstart = first.astype(np.int64)
    cdef int64_t[::1] ccount = counts.astype(np.int64)
    cdef int64_t[::1] parent = np.arange(n, dtype=np.int64)
    cdef double r2 = radius * radius
    cdef Py_ssize_t i, s, t
    cdef int64_t cell, p, q, ra, rb
    cdef int di, dj, dk
    cdef double dx, dy, dz
    with nogil:
        for i in range(n):
            for di in range(-1, 2):
                for dj in range(-1, 2):
                    for dk in range(-1, 2):
                        cell = table.lookup(_pack(cells[i, 0] + di, cells[i, 1] + dj, cells[i, 2] + dk))
                        if cell < 0:
                            continue
                        for s in range(cstart[cell], cstart[cell] + ccount[cell]):
                            q = order[s]
                            if q <= i:
                                continue
                            dx = pts[i, 0] - pts[q, 0]
                            dy = pts[i, 1] - pts[q, 1]
                            dz = pts[i, 2] - pts[q, 2]
                            if dx * dx + dy * dy + dz * dz <= r2:
                                ra = _find(parent, i)
                                rb = _find(parent, q)
                                if ra != rb:
                                    if ra < rb:
                                        parent[rb] = ra
                                    else:
                                        parent[ra] = rb
    cdef int64_t[::1] lab = labels
    cdef int64_t nxt_label = 0
    cdef int64_t root
    for i in range(n):
        root = _find(parent, i)
        if lab[root] < 0:
            lab[root] = nxt_label
            nxt_label += 1
        lab[i] = lab[root]
    return labels
