"""Pure numpy implementations of the hot loops in ``_ckernels.pyx``.

Both backends must return bitwise-identical results; ``tests/test_kernels.py``
runs each case against both.
"""
import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

AXIS_BITS = 21
AXIS_BIAS = 1 << 20
AXIS_MASK = (1 << AXIS_BITS) - 1


def pack(coords):
    c = np.asarray(coords, dtype=np.int64)
    return (
        ((c[:, 0] + AXIS_BIAS) & AXIS_MASK) << 42
        | ((c[:, 1] + AXIS_BIAS) & AXIS_MASK) << 21
        | ((c[:, 2] + AXIS_BIAS) & AXIS_MASK)
    )


def neighbor_table(in_coords, query, offsets):
    m, kk = len(query), len(offsets)
    out = np.full((m, kk), -1, dtype=np.int64)
    if len(in_coords) == 0 or m == 0:
        return out
    keys = pack(in_coords)
    # first occurrence wins, same as the hash insert
    uniq, first = np.unique(keys, return_index=True)
    for k in range(kk):
        q = pack(query + offsets[k])
        pos = np.searchsorted(uniq, q)
        pos_c = np.minimum(pos, len(uniq) - 1)
        hit = uniq[pos_c] == q
        out[hit, k] = first[pos_c[hit]]
    return out


def segment_max(x, seg, num_segments):
    n, c = x.shape
    out = np.zeros((num_segments, c))
    arg = np.full((num_segments, c), -1, dtype=np.int64)
    if n == 0:
        return out, arg
    order = np.argsort(seg, kind="stable")
    s_sorted = seg[order]
    starts = np.flatnonzero(np.r_[True, s_sorted[1:] != s_sorted[:-1]])
    groups = s_sorted[starts]
    xs = x[order]
    gmax = np.maximum.reduceat(xs, starts, axis=0)
    out[groups] = gmax
    # lowest original index among the rows attaining the max
    counts = np.diff(np.r_[starts, n])
    is_max = xs == np.repeat(gmax, counts, axis=0)
    big = np.iinfo(np.int64).max
    cand = np.where(is_max, order[:, None], big)
    arg[groups] = np.minimum.reduceat(cand, starts, axis=0)
    return out, arg


def scatter_add_rows(src, idx, n_out):
    out = np.zeros((n_out, src.shape[1]))
    np.add.at(out, idx, src)
    return out


def radius_components(pts, radius):
    n = len(pts)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    graph = coo_matrix(
        (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])) if len(pairs) else ([], ([], [])),
        shape=(n, n),
    )
    _, comp = connected_components(graph, directed=False)
    # relabel by first appearance so both backends agree
    _, first = np.unique(comp, return_index=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    return rank[comp].astype(np.int64)
