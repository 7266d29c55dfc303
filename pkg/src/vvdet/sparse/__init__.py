"""Sparse voxel tensors, pooling and convolution."""
from vvdet.sparse.ops import (
    CENTER_OFFSET,
    KERNEL_OFFSETS,
    KernelMap,
    SparseFeatureMap,
    broadcast,
    build_kernel_map,
    downsample_coords,
    dynamic_pool,
    lookup_rows,
    pack_coords,
    strided_conv_down,
    submanifold_conv,
    submanifold_kernel_map,
    unique_coords,
)
from vvdet.sparse.unet import SparseConv, SparseUNet, UNetPlan


def sparse_unet(inp, unet, plan=None):
    """Run ``unet`` on ``inp``; returns (output map, {stride: decoder map})."""
    return unet(inp, plan)


__all__ = [
    "CENTER_OFFSET", "KERNEL_OFFSETS", "KernelMap", "SparseConv", "SparseFeatureMap", "SparseUNet",
    "UNetPlan", "broadcast", "build_kernel_map", "downsample_coords", "dynamic_pool", "lookup_rows",
    "pack_coords", "sparse_unet", "strided_conv_down", "submanifold_conv", "submanifold_kernel_map",
    "unique_coords",
]
