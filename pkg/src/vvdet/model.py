"""End-to-end detector: backbone, segmentation/voting and either tail.

The ``v2`` tail predicts from virtual voxels (virtual voxelization, voxel
encoder, mixer, assignment, head). The ``v1`` tail clusters voted centres
with CCL and predicts one box per cluster, on the same backbone.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vvdet.assign import AssignConfig, assign, encode_regression_target
from vvdet.autodiff import ops
from vvdet.autodiff.nn import MLP, BatchNorm1d, Linear, MlpSpec, Module
from vvdet.autodiff.value import Value
from vvdet.fsd1 import FSD1Tail, assign_clusters, ccl_cluster
from vvdet.geom import PointCloud, VoxelGridSpec, voxel_coords
from vvdet.head import TaskGroupSpec, VoxelHead, head_loss, nms_bev, object_weights, predictions_from_outputs
from vvdet.mixer import VirtualVoxelMixer
from vvdet.segvote import SegVoteHead, classify_and_vote, point_targets, scale_votes, vote_loss
from vvdet.sparse.ops import SparseFeatureMap, lookup_rows, unique_coords
from vvdet.sparse.unet import SparseUNet
from vvdet.virtual_voxel import VirtualVoxelEncoder, init_member_features, virtual_voxelize

# offset from voxel centre (3), offset from voxel point mean (3), height, intensity,
# azimuth from the sensor at the origin as (cos, sin), range over the grid half-extent
POINT_FEATURES = 11


@dataclass
class ModelConfig:
    num_classes: int = 3
    tail: str = "v2"
    voxel_size: tuple = (0.4, 0.4, 0.4)
    origin: tuple = (-20.0, -20.0, -1.0)
    vfe_widths: list = field(default_factory=lambda: [32, 32])
    backbone_channels: list = field(default_factory=lambda: [16, 32, 64])
    neck_widths: list = field(default_factory=lambda: [32])
    seg_widths: list = field(default_factory=lambda: [32])
    vote_threshold: float = 0.3
    vote_scale: float = 1.0
    train_votes_from_gt: bool = True
    sir_widths: list = field(default_factory=lambda: [32, 32])
    sir_iterations: int = 2
    mixer_inputs: str = "virtual+multiscale-real"
    mixer_width: int = 32
    mixer_channels: list = field(default_factory=lambda: [32, 32, 32])
    head_widths: list = field(default_factory=lambda: [32])
    head_skip: bool = True
    task_groups: list = field(default_factory=lambda: [[0], [1, 2]])
    ccl_radius: float = 0.6
    norm: str = "none"

    def __post_init__(self):
        if self.tail not in ("v1", "v2"):
            raise ValueError(f"model tail must be 'v1' or 'v2', got {self.tail!r}")

    @classmethod
    def from_config(cls, cfg):
        m = cfg.section("model")
        h = cfg["scene.half_range"]
        return cls(num_classes=len(cfg["scene.class_names"]), tail=m["tail"],
                   voxel_size=tuple(m["voxel_size"]), origin=(-h, -h, m["z_min"]),
                   vfe_widths=m["vfe_widths"], backbone_channels=m["backbone_channels"],
                   neck_widths=m["neck_widths"], seg_widths=m["seg_widths"],
                   vote_threshold=m["vote_threshold"], vote_scale=m["vote_scale"],
                   train_votes_from_gt=m["train_votes_from_gt"], sir_widths=m["sir_widths"],
                   sir_iterations=m["sir_iterations"], mixer_inputs=m["mixer_inputs"],
                   mixer_width=m["mixer_width"], mixer_channels=m["mixer_channels"],
                   head_widths=m["head_widths"], head_skip=m["head_skip"], task_groups=m["task_groups"], ccl_radius=m["ccl_radius"],
                   norm=m["norm"])

    @property
    def grid(self):
        return VoxelGridSpec(self.voxel_size, self.origin, 1)

    @property
    def tasks(self):
        return TaskGroupSpec([list(g) for g in self.task_groups], list(self.head_widths), self.norm)

    def mlp(self, widths):
        return MlpSpec(list(widths), norm=self.norm)


@dataclass
class LossConfig:
    gamma: float = 2.0
    alpha: float = 0.25
    w_cls: float = 1.0
    w_reg: float = 1.0
    w_vote: float = 1.0
    balance: str = "none"

    def __post_init__(self):
        if self.balance not in ("none", "object"):
            raise ValueError(f"loss balance must be 'none' or 'object', got {self.balance!r}")


class Backbone(Module):
    """Point encoder pooled into stride-1 voxels, a SparseUNet, and a point-level neck.

    The point encoder is a grouped PointNet: each layer after the first sees
    its input concatenated with the voxel-wise max of that input.
    """

    def __init__(self, cfg: ModelConfig, rng):
        widths = [int(w) for w in cfg.vfe_widths]
        self.vfe = [Linear(POINT_FEATURES, widths[0], rng)]
        for a, b in zip(widths[:-1], widths[1:]):
            self.vfe.append(Linear(2 * a, b, rng))
        self.vfe_norms = [BatchNorm1d(w) if cfg.norm == "batch" else None for w in widths]
        self.extent = max(-float(cfg.origin[0]), 1.0)
        self.unet = SparseUNet(widths[-1], cfg.backbone_channels, rng, cfg.norm)
        self.neck = MLP(widths[-1] + self.unet.out_channels, cfg.mlp(cfg.neck_widths), rng)
        self.out_dim = self.neck.out_dim
        self.dims = {2 ** i: c for i, c in enumerate(self.unet.channels)}

    def __call__(self, points: PointCloud, grid: VoxelGridSpec):
        coords, inverse = unique_coords(voxel_coords(points.xyz, grid))
        n = len(coords)
        cell = np.asarray(grid.cell_size)
        rel = (points.xyz - grid.voxel_centers(coords)[inverse]) / cell
        counts = np.bincount(inverse, minlength=n)[:, None]
        mean = np.stack([np.bincount(inverse, weights=points.xyz[:, d], minlength=n) for d in range(3)], 1)
        to_mean = (points.xyz - (mean / counts)[inverse]) / cell
        rng_xy = np.hypot(points.xyz[:, 0], points.xyz[:, 1])
        safe = np.where(rng_xy > 0, rng_xy, 1.0)
        azimuth = np.where(rng_xy[:, None] > 0, points.xyz[:, :2] / safe[:, None], 0.0)
        raw = np.column_stack([rel, to_mean, points.xyz[:, 2:3], points.attrs[:, :1], azimuth,
                               rng_xy / self.extent])
        h = _act(self.vfe[0](Value(raw)), self.vfe_norms[0])
        for layer, bn in zip(self.vfe[1:], self.vfe_norms[1:]):
            pooled = ops.segment_max(h, inverse, n)
            h = _act(layer(ops.concat([h, ops.gather(pooled, inverse)], axis=1)), bn)
        voxel_feats = ops.segment_max(h, inverse, n)
        out, decoded = self.unet(SparseFeatureMap(coords, voxel_feats, 1, grid))
        point_feats = self.neck(ops.concat([ops.gather(out.feats, inverse), h], axis=1))
        return point_feats, decoded


def _act(x, bn):
    return ops.relu(x if bn is None else bn(x))


@dataclass
class TailOutput:
    outputs: list
    centers: np.ndarray
    labels: np.ndarray | None = None
    targets: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


class Detector(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.tasks = cfg.tasks
        if self.tasks.num_classes != cfg.num_classes:
            raise ValueError("task groups must cover every class")
        self.backbone = Backbone(cfg, rng)
        dim = self.backbone.out_dim
        self.segvote = SegVoteHead(dim, cfg.num_classes, cfg.mlp(cfg.seg_widths), rng)
        sir_spec = cfg.mlp(cfg.sir_widths)
        if cfg.tail == "v2":
            self.vve = VirtualVoxelEncoder(dim + 3, sir_spec, rng, cfg.sir_iterations)
            self.mixer = VirtualVoxelMixer(self.vve.out_dim, self.backbone.dims, rng, cfg.mixer_width,
                                           cfg.mixer_channels, cfg.mixer_inputs, norm=cfg.norm)
            head_in = self.mixer.out_dim + (self.vve.out_dim if cfg.head_skip else 0)
            self.head = VoxelHead(head_in, self.tasks, rng)
        else:
            self.v1 = FSD1Tail(dim, sir_spec, self.tasks, rng, cfg.sir_iterations)

    # ---- shared front end
    def front(self, points: PointCloud, boxes=None):
        point_feats, decoded = self.backbone(points, self.cfg.grid)
        extra = None
        if self.training and boxes is not None and self.cfg.train_votes_from_gt:
            extra = point_targets(points, boxes, self.cfg.num_classes)[0] >= 0
        votes = classify_and_vote(point_feats, points.xyz, self.segvote, self.cfg.vote_threshold, extra)
        votes = scale_votes(votes, self.cfg.vote_scale)
        return point_feats, decoded, votes

    # ---- tails
    def tail_v2(self, points, point_feats, decoded, votes, boxes=None, assign_cfg=AssignConfig()):
        grid = self.cfg.grid
        vset = virtual_voxelize(points, votes, grid, assign_cfg.alpha)
        if vset.num_virtual == 0:
            return TailOutput([], np.zeros((0, 3)), extra={"vset": vset})
        member = init_member_features(vset, point_feats, votes)
        vmap = self.vve(vset, member)
        mixed = self.mixer(vmap, decoded)
        rows = np.flatnonzero(mixed.virtual)
        site_coords = mixed.coords[rows]
        vrow = lookup_rows(vset.coords, site_coords)
        feats = ops.gather(mixed.feats, rows)
        if self.cfg.head_skip:
            feats = ops.concat([feats, ops.gather(vmap.feats, vrow)], axis=1)
        outputs = self.head(feats)
        result = TailOutput(outputs, grid.voxel_centers(site_coords), extra={"vset": vset})
        if boxes is not None:
            a = assign(vset, boxes, assign_cfg)
            result.labels = a.labels[vrow]
            result.targets = a.targets[vrow]
            result.extra["box_index"] = a.box_index[vrow]
            result.extra["assignment"] = a
        return result

    def tail_v1(self, points, point_feats, votes, boxes=None):
        if len(votes) == 0:
            return TailOutput([], np.zeros((0, 3)))
        clusters = ccl_cluster(votes.voted_centers, self.cfg.ccl_radius, votes.source_index)
        outputs, centers = self.v1(point_feats, votes, clusters)
        result = TailOutput(outputs, centers, extra={"clusters": clusters})
        if boxes is not None:
            labels, box_index = assign_clusters(centers, boxes)
            result.extra["box_index"] = box_index
            targets = np.zeros((len(centers), 8))
            for r in np.flatnonzero(labels >= 0):
                targets[r] = encode_regression_target(boxes[box_index[r]], centers[r])
            result.labels, result.targets = labels, targets
        return result

    def run(self, points: PointCloud, boxes=None, assign_cfg=AssignConfig()):
        point_feats, decoded, votes = self.front(points, boxes)
        if self.cfg.tail == "v2":
            tail = self.tail_v2(points, point_feats, decoded, votes, boxes, assign_cfg)
        else:
            tail = self.tail_v1(points, point_feats, votes, boxes)
        return votes, tail

    def loss(self, points: PointCloud, boxes, assign_cfg=AssignConfig(), loss_cfg=LossConfig()):
        """Dict of scalar Values: ``cls``, ``reg``, ``vote`` and weighted ``total``."""
        votes, tail = self.run(points, boxes, assign_cfg)
        v_cls, v_reg = vote_loss(votes, points, boxes, loss_cfg.gamma, loss_cfg.alpha, loss_cfg.balance)
        vote = ops.add(v_cls, v_reg)
        if tail.outputs:
            weights = None
            if loss_cfg.balance == "object":
                weights = object_weights(tail.extra["box_index"])
            cls, reg = head_loss(tail.outputs, tail.labels, tail.targets, self.tasks,
                                 loss_cfg.gamma, loss_cfg.alpha, weights)
        else:
            cls, reg = Value(0.0), Value(0.0)
        total = ops.add(ops.add(ops.scale(cls, loss_cfg.w_cls), ops.scale(reg, loss_cfg.w_reg)),
                        ops.scale(vote, loss_cfg.w_vote))
        return {"cls": cls, "reg": reg, "vote": vote, "total": total, "tail": tail}

    def predict(self, points: PointCloud, score_thresh=0.1, nms_iou=0.25, assign_cfg=AssignConfig()):
        _, tail = self.run(points, None, assign_cfg)
        if not tail.outputs:
            return []
        dets = predictions_from_outputs(tail.outputs, tail.centers, self.tasks, score_thresh)
        return nms_bev(dets, nms_iou)
