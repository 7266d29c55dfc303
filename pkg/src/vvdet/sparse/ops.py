"""Hash-based sparse tensor operators on integer voxel coordinates.

Coordinates are packed into one int64 per voxel, 21 bits per axis with a bias
of 2**20 (valid range [-2**20, 2**20 - 1]). The packing is monotone in the
lexicographic (i, j, k) order, so sorting packed keys sorts coordinates.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from vvdet import kernels
from vvdet._pykernels import pack as pack_coords
from vvdet.autodiff import ops
from vvdet.autodiff.value import Value
from vvdet.geom import VoxelGridSpec

KERNEL_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
CENTER_OFFSET = 13


@dataclass
class SparseFeatureMap:
    coords: np.ndarray
    feats: Value
    stride: int = 1
    spec: VoxelGridSpec = field(default_factory=VoxelGridSpec)
    virtual: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        if len(self.coords) != self.feats.shape[0]:
            raise ValueError(f"{len(self.coords)} coords but {self.feats.shape[0]} feature rows")

    def __len__(self):
        return len(self.coords)

    @property
    def channels(self):
        return self.feats.shape[1]

    def replace(self, feats=None, coords=None, stride=None, virtual=None):
        return SparseFeatureMap(
            self.coords if coords is None else coords,
            self.feats if feats is None else feats,
            self.stride if stride is None else stride,
            self.spec,
            self.virtual if virtual is None else virtual,
        )


@dataclass
class KernelMap:
    """Gather plan: for each kernel offset, matching (input row, output row) arrays."""

    offsets: np.ndarray
    pairs: list
    n_in: int
    n_out: int

    def pair_count(self):
        return sum(len(i) for i, _ in self.pairs)


def unique_coords(coords):
    """Lexicographically sorted distinct coords and the inverse index."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if len(coords) == 0:
        return coords.copy(), np.zeros(0, dtype=np.int64)
    keys = pack_coords(coords)
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    return coords[first], inverse.reshape(-1).astype(np.int64)


def lookup_rows(table_coords, query_coords):
    """Row of each query coord in ``table_coords`` (-1 when absent)."""
    zero = np.zeros((1, 3), dtype=np.int64)
    return kernels.neighbor_table(table_coords, query_coords, zero)[:, 0]


def dynamic_pool(coords, feats: Value, reduce="mean"):
    """Merge rows sharing a coordinate. Returns (unique coords, pooled feats, inverse)."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if len(coords) != feats.shape[0]:
        raise ValueError(f"dynamic_pool: {len(coords)} coords for {feats.shape[0]} rows")
    ucoords, inverse = unique_coords(coords)
    if reduce == "mean":
        pooled = ops.segment_mean(feats, inverse, len(ucoords))
    elif reduce == "max":
        pooled = ops.segment_max(feats, inverse, len(ucoords))
    else:
        raise ValueError(f"unknown reduce {reduce!r}")
    return ucoords, pooled, inverse


def broadcast(pooled: Value, inverse):
    """Row i of the result is ``pooled[inverse[i]]``."""
    return ops.gather(pooled, inverse)


def build_kernel_map(in_coords, out_coords, scale=1, offsets=KERNEL_OFFSETS):
    """Pairs (i, o) with ``in_coords[i] == out_coords[o] * scale + offset``."""
    table = kernels.neighbor_table(in_coords, np.asarray(out_coords, dtype=np.int64) * scale, offsets)
    pairs = []
    for k in range(len(offsets)):
        out_rows = np.flatnonzero(table[:, k] >= 0)
        pairs.append((table[out_rows, k], out_rows))
    return KernelMap(offsets, pairs, len(in_coords), len(out_coords))


def submanifold_kernel_map(coords):
    return build_kernel_map(coords, coords, 1)


def downsample_coords(coords):
    """Coords at double stride (``floor(c / 2)``, deduplicated) and each input's parent row."""
    return unique_coords(np.floor_divide(coords, 2))


def submanifold_conv(inp: SparseFeatureMap, weights: Value, bias: Value | None = None, kmap=None):
    """3x3x3 convolution evaluated only at the input's own sites."""
    kmap = kmap or submanifold_kernel_map(inp.coords)
    out = ops.sparse_conv(inp.feats, weights, bias, kmap, len(inp.coords))
    return inp.replace(feats=out)


def strided_conv_down(inp: SparseFeatureMap, weights: Value, bias: Value | None = None, plan=None):
    """Stride-2 3x3x3 convolution (padding 1) evaluated at ``unique(floor(coords / 2))``."""
    if plan is None:
        out_coords, _ = downsample_coords(inp.coords)
        kmap = build_kernel_map(inp.coords, out_coords, 2)
    else:
        out_coords, kmap = plan
    out = ops.sparse_conv(inp.feats, weights, bias, kmap, len(out_coords))
    return SparseFeatureMap(out_coords, out, inp.stride * 2, inp.spec)
