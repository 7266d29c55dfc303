"""Fully sparse 3D detection with virtual voxels."""
__version__ = "0.1.0"
