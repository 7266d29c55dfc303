"""Label assignment for virtual voxels: voxel-in-box with configurable voxel positions."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from vvdet.geom import Box3D, points_in_box
from vvdet.virtual_voxel import VirtualVoxelSet, weighted_centroids

STRATEGIES = ("weighted-centroid", "plain-centroid", "geometric-center", "enlarge-gt", "nearest-topk")


@dataclass(frozen=True)
class AssignConfig:
    strategy: str = "weighted-centroid"
    alpha: float = 0.5
    margin: float = 0.0
    k: int = 1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown assignment strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")


@dataclass
class AssignmentResult:
    labels: np.ndarray
    box_index: np.ndarray
    targets: np.ndarray
    positions: np.ndarray

    @property
    def positive(self):
        return self.labels >= 0

    @property
    def num_positive(self):
        return int(self.positive.sum())


def weighted_centroid(positions, fg, alpha):
    """Single-voxel form of the foreground-weighted centroid."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(positions) == 0:
        raise ValueError("weighted_centroid needs at least one member")
    fg = np.asarray(fg, dtype=bool)
    return weighted_centroids(np.zeros(len(positions), dtype=np.int64), positions, fg, 1, alpha)[0]


def encode_regression_target(box: Box3D, voxel_center):
    """``(dx, dy, dz, log l, log w, log h, sin yaw, cos yaw)`` relative to the voxel's geometric centre."""
    if min(box.dims) <= 0:
        raise ValueError("box dims must be positive")
    d = np.asarray(box.center) - np.asarray(voxel_center, dtype=np.float64)
    return np.array([*d, *np.log(box.dims), math.sin(box.yaw), math.cos(box.yaw)])


def voxel_positions(vset: VirtualVoxelSet, cfg: AssignConfig, member_fg=None):
    """Position used for the inside test under ``cfg``."""
    if cfg.strategy in ("geometric-center", "enlarge-gt"):
        return vset.geometric_centers()
    alpha = 1.0 if cfg.strategy == "plain-centroid" else cfg.alpha
    fg = vset.member_fg if member_fg is None else np.asarray(member_fg, dtype=bool)
    return weighted_centroids(vset.member_voxel, vset.member_pos, fg, len(vset), alpha)


def _assign_positions(positions, candidates, boxes, centers, margin=0.0):
    n = len(positions)
    labels = np.full(n, -1, dtype=np.int64)
    box_index = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 8))
    if not boxes or not len(candidates):
        return labels, box_index, targets
    pos = positions[candidates]
    inside = np.zeros((len(candidates), len(boxes)), dtype=bool)
    for b, box in enumerate(boxes):
        test = box.enlarged(margin) if margin > 0 else box
        inside[:, b] = points_in_box(pos, test)
    hits = inside.sum(axis=1)
    if (hits > 1).any():
        warnings.warn(f"{int((hits > 1).sum())} voxel(s) fall inside overlapping boxes; "
                      "assigning each to the nearest box centre", stacklevel=3)
    box_centers = np.array([b.center for b in boxes])
    for r in np.flatnonzero(hits):
        cand = np.flatnonzero(inside[r])
        if len(cand) > 1:
            dist = np.linalg.norm(box_centers[cand] - pos[r], axis=1)
            b = int(cand[np.argmin(dist)])
        else:
            b = int(cand[0])
        v = candidates[r]
        labels[v] = boxes[b].class_id
        box_index[v] = b
        targets[v] = encode_regression_target(boxes[b], centers[v])
    return labels, box_index, targets


def assign(vset: VirtualVoxelSet, boxes, cfg: AssignConfig = AssignConfig(), member_fg=None):
    """Voxel-in-box assignment; only virtual voxels can become positive."""
    positions = voxel_positions(vset, cfg, member_fg)
    candidates = np.flatnonzero(vset.is_virtual)
    margin = cfg.margin if cfg.strategy == "enlarge-gt" else 0.0
    labels, box_index, targets = _assign_positions(
        positions, candidates, list(boxes), vset.geometric_centers(), margin)
    result = AssignmentResult(labels, box_index, targets, positions)
    if cfg.strategy == "nearest-topk":
        result = _keep_topk(result, list(boxes), cfg.k)
    return result


def _keep_topk(result: AssignmentResult, boxes, k):
    labels = result.labels.copy()
    box_index = result.box_index.copy()
    targets = result.targets.copy()
    for b, box in enumerate(boxes):
        rows = np.flatnonzero(box_index == b)
        if len(rows) <= k:
            continue
        dist = np.linalg.norm(result.positions[rows] - np.asarray(box.center), axis=1)
        order = np.lexsort((rows, dist))
        drop = rows[order[k:]]
        labels[drop] = -1
        box_index[drop] = -1
        targets[drop] = 0.0
    return AssignmentResult(labels, box_index, targets, result.positions)


def assign_nearest_topk(vset: VirtualVoxelSet, boxes, k, alpha=0.5, member_fg=None):
    """Per box, only the ``k`` inside virtual voxels nearest its centre stay positive."""
    k = int(k) if np.isfinite(k) else len(vset) + 1
    return assign(vset, boxes, AssignConfig("nearest-topk", alpha=alpha, k=max(k, 1)), member_fg)
