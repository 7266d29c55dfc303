"""Sparse convolution layers and the encoder-decoder SparseUNet."""
import numpy as np

from vvdet.autodiff import ops
from vvdet.autodiff.nn import BatchNorm1d, Linear, Module, Parameter
from vvdet.sparse.ops import (
    KERNEL_OFFSETS,
    SparseFeatureMap,
    build_kernel_map,
    downsample_coords,
    submanifold_kernel_map,
)


class SparseConv(Module):
    """Weights ``[27, C_in, C_out]`` plus bias for a 3x3x3 kernel."""

    def __init__(self, in_ch, out_ch, rng, fan_in_sites=9):
        # surfaces occupy roughly a plane of the 27 sites; scale init for that fan-in
        bound = np.sqrt(6.0 / (fan_in_sites * in_ch))
        self.weight = Parameter(rng.uniform(-bound, bound, size=(len(KERNEL_OFFSETS), in_ch, out_ch)))
        self.bias = Parameter(np.zeros(out_ch))

    def __call__(self, feats, kmap, n_out):
        return ops.sparse_conv(feats, self.weight, self.bias, kmap, n_out)


class UNetPlan:
    """Coordinate sets and kernel maps for every stage, derived from the input coords only."""

    def __init__(self, coords, n_stages):
        self.coords = [np.asarray(coords, dtype=np.int64)]
        self.parents = []
        self.down_maps = []
        for _ in range(n_stages - 1):
            fine = self.coords[-1]
            coarse, parent = downsample_coords(fine)
            self.down_maps.append(build_kernel_map(fine, coarse, 2))
            self.parents.append(parent)
            self.coords.append(coarse)
        self.subm_maps = [submanifold_kernel_map(c) for c in self.coords]


class SparseUNet(Module):
    """Each stage has two sparse conv layers; stage i > 0 starts with a stride-2 conv.

    The decoder routes coarse features back to the finer stage's recorded
    coordinates (each fine voxel reads its parent ``floor(c / 2)``),
    concatenates the skip features, projects with a linear layer and applies
    one submanifold conv. No coordinates are created, so the output sits on
    exactly the input sites. With ``norm="batch"`` every conv and projection
    is followed by batch norm over the active sites.
    """

    def __init__(self, in_ch, channels, rng, norm="none"):
        if norm not in ("none", "batch"):
            raise ValueError(f"unsupported normalization {norm!r}")
        channels = [int(c) for c in channels]
        self.channels = channels
        self.enc = []
        prev = in_ch
        for c in channels:
            self.enc.append([SparseConv(prev, c, rng), SparseConv(c, c, rng)])
            prev = c
        self.up_proj = [Linear(channels[i + 1] + channels[i], channels[i], rng) for i in range(len(channels) - 1)]
        self.dec = [SparseConv(channels[i], channels[i], rng) for i in range(len(channels) - 1)]
        bn = norm == "batch"
        self.enc_norms = [[BatchNorm1d(c), BatchNorm1d(c)] if bn else [None, None] for c in channels]
        self.up_norms = [BatchNorm1d(channels[i]) if bn else None for i in range(len(channels) - 1)]
        self.dec_norms = [BatchNorm1d(channels[i]) if bn else None for i in range(len(channels) - 1)]

    @property
    def out_channels(self):
        return self.channels[0]

    def __call__(self, inp: SparseFeatureMap, plan=None):
        """Return (output map on the input coords, {stride: decoder map})."""
        n_stages = len(self.channels)
        plan = plan or UNetPlan(inp.coords, n_stages)
        skips = []
        x = inp.feats
        for i, (first, second) in enumerate(self.enc):
            n = len(plan.coords[i])
            n1, n2 = self.enc_norms[i]
            kmap = plan.subm_maps[0] if i == 0 else plan.down_maps[i - 1]
            x = _act(first(x, kmap, n), n1)
            x = _act(second(x, plan.subm_maps[i], n), n2)
            skips.append(x)
        strides = [inp.stride * 2 ** i for i in range(n_stages)]
        decoded = {strides[-1]: SparseFeatureMap(plan.coords[-1], x, strides[-1], inp.spec)}
        for i in range(n_stages - 2, -1, -1):
            up = ops.gather(x, plan.parents[i])
            x = _act(self.up_proj[i](ops.concat([up, skips[i]], axis=1)), self.up_norms[i])
            x = _act(self.dec[i](x, plan.subm_maps[i], len(plan.coords[i])), self.dec_norms[i])
            decoded[strides[i]] = SparseFeatureMap(plan.coords[i], x, strides[i], inp.spec)
        return inp.replace(feats=x), decoded


def _act(x, bn):
    return ops.relu(x if bn is None else bn(x))
