"""Virtual voxel mixer: multi-scale sparse aggregation followed by a light SparseUNet."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vvdet.autodiff import ops
from vvdet.autodiff.nn import Linear, Module
from vvdet.geom import convert_stride
from vvdet.sparse.ops import SparseFeatureMap, dynamic_pool
from vvdet.sparse.unet import SparseUNet

MIXER_INPUTS = ("virtual-only", "virtual+real", "virtual+multiscale-real")


@dataclass
class MultiScaleBundle:
    """Sparse maps at several strides with one linear projection each."""

    maps: list
    projections: list

    def __post_init__(self):
        if len(self.maps) != len(self.projections):
            raise ValueError("one projection per map is required")


def aggregate_multiscale(bundle: MultiScaleBundle):
    """Project, move every map onto the stride-1 grid and average coinciding voxels.

    Returns a stride-1 map; its ``virtual`` flag marks rows fed by a virtual
    stride-1 voxel.
    """
    coords, feats, virtual = [], [], []
    width = None
    for m, proj in zip(bundle.maps, bundle.projections):
        f = proj(m.feats)
        if width is None:
            width = f.shape[1]
        elif f.shape[1] != width:
            raise ValueError(f"projected channel mismatch: {f.shape[1]} vs {width}")
        coords.append(convert_stride(m.coords, m.stride))
        feats.append(f)
        v = m.virtual if m.virtual is not None and m.stride == 1 else np.zeros(len(m), dtype=bool)
        virtual.append(v)
    all_coords = np.concatenate(coords, axis=0)
    ucoords, pooled, inverse = dynamic_pool(all_coords, ops.concat(feats, axis=0), "mean")
    flag = np.zeros(len(ucoords), dtype=bool)
    flag[inverse[np.concatenate(virtual)]] = True
    spec = bundle.maps[0].spec.with_stride(1)
    return SparseFeatureMap(ucoords, pooled, 1, spec, flag)


class VirtualVoxelMixer(Module):
    """``inputs`` selects what enters the mixer (see ``MIXER_INPUTS``)."""

    def __init__(self, vve_dim, backbone_dims, rng, width=64, unet_channels=(64, 64, 64),
                 inputs="virtual+multiscale-real", scales=(2, 4), norm="none"):
        if inputs not in MIXER_INPUTS:
            raise ValueError(f"mixer inputs must be one of {MIXER_INPUTS}, got {inputs!r}")
        self.inputs = inputs
        self.scales = tuple(scales) if inputs == "virtual+multiscale-real" else ()
        self.proj = [Linear(vve_dim, width, rng)]
        for s in self.scales:
            self.proj.append(Linear(backbone_dims[s], width, rng))
        self.unet = SparseUNet(width, unet_channels, rng, norm)
        self.out_dim = self.unet.out_channels

    def bundle(self, vve_map: SparseFeatureMap, backbone_maps=None):
        if self.inputs == "virtual-only":
            rows = np.flatnonzero(vve_map.virtual)
            first = SparseFeatureMap(vve_map.coords[rows], ops.gather(vve_map.feats, rows), 1,
                                     vve_map.spec, np.ones(len(rows), dtype=bool))
        else:
            first = vve_map
        maps = [first] + [backbone_maps[s] for s in self.scales]
        return MultiScaleBundle(maps, self.proj)

    def __call__(self, vve_map: SparseFeatureMap, backbone_maps=None):
        agg = aggregate_multiscale(self.bundle(vve_map, backbone_maps))
        return mix(agg, self.unet)


def mix(agg: SparseFeatureMap, unet: SparseUNet):
    """SparseUNet on the aggregated map; coordinates and the virtual flag are unchanged."""
    if len(agg) == 0:
        return agg.replace(feats=ops.matmul(agg.feats, np.zeros((agg.channels, unet.out_channels))))
    out, _ = unet(agg)
    return out.replace(virtual=agg.virtual)
