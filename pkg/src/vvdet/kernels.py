"""Backend selection for the hot kernels.

The compiled extension is used when importable; set ``VVDET_PURE_PYTHON=1``
to force the numpy fallback. ``BACKEND`` names the active implementation.
"""
import os

import numpy as np

from vvdet import _pykernels

_BACKENDS = {"python": _pykernels}

try:
    from vvdet import _ckernels
except ImportError:  # extension not built
    _ckernels = None
else:
    _BACKENDS["cython"] = _ckernels

if os.environ.get("VVDET_PURE_PYTHON") or _ckernels is None:
    BACKEND = "python"
else:
    BACKEND = "cython"


def available_backends():
    return sorted(_BACKENDS)


def get_backend(name=None):
    return _BACKENDS[name or BACKEND]


def _i64_2d(a):
    return np.ascontiguousarray(np.asarray(a, dtype=np.int64).reshape(-1, 3))


def neighbor_table(in_coords, query, offsets, backend=None):
    """Row index of ``query[r] + offsets[k]`` in ``in_coords``, or -1. Shape [M, K]."""
    return get_backend(backend).neighbor_table(_i64_2d(in_coords), _i64_2d(query), _i64_2d(offsets))


def segment_max(x, seg, num_segments, backend=None):
    """Per-segment column max and the lowest row index attaining it (-1 for empty segments)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    seg = np.ascontiguousarray(seg, dtype=np.int64)
    return get_backend(backend).segment_max(x, seg, int(num_segments))


def scatter_add_rows(src, idx, n_out, backend=None):
    src = np.ascontiguousarray(src, dtype=np.float64)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    return get_backend(backend).scatter_add_rows(src, idx, int(n_out))


def radius_components(pts, radius, backend=None):
    """Connected components of the graph joining points within ``radius`` (inclusive)."""
    pts = np.ascontiguousarray(np.asarray(pts, dtype=np.float64).reshape(-1, 3))
    return get_backend(backend).radius_components(pts, float(radius))
