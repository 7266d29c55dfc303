"""Cluster-based tail for comparison: CCL over voted centres plus per-cluster SIR.

Background points are dropped after segmentation, so a cluster only sees
the foreground points that voted into it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vvdet import kernels
from vvdet.autodiff import ops
from vvdet.autodiff.nn import MlpSpec, Module
from vvdet.autodiff.value import Value
from vvdet.data import CROWD_DIST, crowded_flags
from vvdet.geom import VoxelGridSpec, points_in_box, voxel_coords
from vvdet.head import TaskGroupSpec, VoxelHead, nms_bev, predictions_from_outputs
from vvdet.segvote import VoteOutput
from vvdet.sir import GroupedPoints, SIREncoder
from vvdet.sparse.ops import unique_coords


@dataclass
class ClusterSet:
    """``cluster_ids[i]`` is the cluster of voted centre ``i``; ``members`` index the voting points."""

    cluster_ids: np.ndarray
    num_clusters: int
    members: list

    def centers(self, positions):
        out = np.zeros((self.num_clusters, 3))
        np.add.at(out, self.cluster_ids, positions)
        return out / np.maximum(np.bincount(self.cluster_ids, minlength=self.num_clusters), 1)[:, None]


def ccl_cluster(centers, radius, point_index=None, backend=None):
    """Connected components of centres within Euclidean distance ``radius``.

    Cluster ids are numbered by first appearance. ``point_index`` maps each
    centre to the point that cast it (defaults to the centre index).
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    ids = kernels.radius_components(centers, radius, backend=backend).astype(np.int64)
    n = int(ids.max()) + 1 if len(ids) else 0
    src = np.arange(len(centers)) if point_index is None else np.asarray(point_index, dtype=np.int64)
    order = np.argsort(ids, kind="stable")
    splits = np.cumsum(np.bincount(ids, minlength=n))[:-1] if n else []
    members = [src[m] for m in np.split(order, splits)] if n else []
    return ClusterSet(ids, n, members)


class FSD1Tail(Module):
    """Per-cluster SIR over voting points followed by the shared head layout."""

    def __init__(self, in_dim, spec: MlpSpec, tasks: TaskGroupSpec, rng, iterations=2):
        # point feature + voting offset; extra = vote position relative to cluster centre
        self.sir = SIREncoder(in_dim + 3, spec, rng, iterations=iterations, extra_dim=3)
        self.head = VoxelHead(self.sir.out_dim, tasks, rng)

    def __call__(self, point_feats: Value, votes: VoteOutput, clusters: ClusterSet):
        src = votes.source_index
        vpos = votes.voted_centers
        centers = clusters.centers(vpos)
        feats = ops.concat([ops.gather(point_feats, src),
                            ops.scale(ops.gather(votes.offsets, src), votes.scale)], axis=1)
        groups = GroupedPoints(feats, clusters.cluster_ids, votes.coords[src], clusters.num_clusters)
        rel = Value(vpos - centers[clusters.cluster_ids])
        cluster_feats, _ = self.sir(groups, rel)
        return self.head(cluster_feats), centers


def assign_clusters(centers, boxes):
    """A cluster is positive for the first box containing its centre."""
    labels = np.full(len(centers), -1, dtype=np.int64)
    box_index = np.full(len(centers), -1, dtype=np.int64)
    for b, box in enumerate(boxes):
        inside = points_in_box(centers, box) & (labels < 0)
        labels[inside] = box.class_id
        box_index[inside] = b
    return labels, box_index


def fsd1_tail(point_feats, votes: VoteOutput, radius, tail: FSD1Tail, score_thresh=0.1, nms_iou=0.25):
    """Detections from clusters of the voted centres; no votes means no detections."""
    if len(votes) == 0:
        return []
    clusters = ccl_cluster(votes.voted_centers, radius, votes.source_index)
    outputs, centers = tail(point_feats, votes, clusters)
    dets = predictions_from_outputs(outputs, centers, tail.head.tasks, score_thresh)
    return nms_bev(dets, nms_iou)


@dataclass
class ClassGroupStats:
    objects: int = 0
    clusters: int = 0
    virtual_voxels: int = 0
    real_voxels: int = 0
    crowded: int = 0
    cluster_merged: int = 0
    voxel_merged: int = 0


def _fully_merged(own_groups, group_owner_sets, obj):
    """True when every group holding this object's votes also holds another object's votes."""
    if not own_groups:
        return False
    return all(len(group_owner_sets[g] - {obj}) > 0 for g in own_groups)


def scene_group_statistics(points_xyz, boxes, votes: VoteOutput, spec: VoxelGridSpec, radius, stats=None):
    """Accumulate per-class group counts for one scene into ``stats`` (dict class -> ClassGroupStats).

    Only voting points that lie inside a box count for that box, so points
    missed by segmentation are ignored.
    """
    stats = {} if stats is None else stats
    src = votes.source_index
    vpos = votes.voted_centers
    owner = np.full(len(src), -1, dtype=np.int64)
    for b, box in enumerate(boxes):
        inside = points_in_box(points_xyz[src], box) & (owner < 0)
        owner[inside] = b
    crowded = crowded_flags(boxes, CROWD_DIST)
    cl = ccl_cluster(vpos, radius).cluster_ids if len(src) else np.zeros(0, dtype=np.int64)
    vv = unique_coords(voxel_coords(vpos, spec))[1] if len(src) else np.zeros(0, dtype=np.int64)
    real = unique_coords(voxel_coords(points_xyz[src], spec))[1] if len(src) else np.zeros(0, dtype=np.int64)
    cl_owners, vv_owners = {}, {}
    for i, o in enumerate(owner):
        cl_owners.setdefault(cl[i], set()).add(int(o))
        vv_owners.setdefault(vv[i], set()).add(int(o))
    for b, box in enumerate(boxes):
        s = stats.setdefault(box.class_id, ClassGroupStats())
        rows = np.flatnonzero(owner == b)
        s.objects += 1
        own_cl = set(cl[rows].tolist())
        own_vv = set(vv[rows].tolist())
        s.clusters += len(own_cl)
        s.virtual_voxels += len(own_vv)
        s.real_voxels += len(set(real[rows].tolist()))
        if crowded[b]:
            s.crowded += 1
            s.cluster_merged += _fully_merged(own_cl, cl_owners, b)
            s.voxel_merged += _fully_merged(own_vv, vv_owners, b)
    return stats


def group_statistics(scenes, spec: VoxelGridSpec, radius, class_names=None):
    """``scenes`` yields ``(points_xyz, boxes, votes)``; returns {class: ClassGroupStats}."""
    stats = {}
    for xyz, boxes, votes in scenes:
        scene_group_statistics(np.asarray(xyz), boxes, votes, spec, radius, stats)
    return stats


REPORT_HEADER = ("class,objects,clusters_per_object,virtual_voxels_per_object,real_voxels_per_object,"
                 "crowded_objects,cluster_full_merge_rate,virtual_voxel_full_merge_rate")


def format_statistics(stats, class_names=None):
    lines = [REPORT_HEADER]
    for c in sorted(stats):
        s = stats[c]
        name = class_names[c] if class_names and c < len(class_names) else str(c)
        n = max(s.objects, 1)
        k = max(s.crowded, 1)
        lines.append(f"{name},{s.objects},{s.clusters / n:.2f},{s.virtual_voxels / n:.2f},"
                     f"{s.real_voxels / n:.2f},{s.crowded},{s.cluster_merged / k:.3f},{s.voxel_merged / k:.3f}")
    return "\n".join(lines)


def perfect_votes(points_xyz, boxes, num_classes):
    """Votes from every point inside a box, landing exactly on that box centre."""
    xyz = np.asarray(points_xyz, dtype=np.float64)
    fg = np.zeros(len(xyz), dtype=bool)
    off = np.zeros((len(xyz), 3))
    for box in boxes:
        inside = points_in_box(xyz, box) & ~fg
        fg |= inside
        off[inside] = np.asarray(box.center) - xyz[inside]
    logits = Value(np.zeros((len(xyz), num_classes)))
    return VoteOutput(logits, Value(off), xyz, fg)
