"""Point-wise foreground classification and centre voting."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from vvdet.autodiff import ops
from vvdet.autodiff.nn import MLP, Linear, MlpSpec, Module
from vvdet.autodiff.value import Value
from vvdet.geom import PointCloud, points_in_box
from vvdet.head import focal_loss, l1_loss, object_weights


@dataclass
class VoteOutput:
    """Per-point logits/offsets plus the votes cast by points predicted foreground.

    ``fg_logits`` has one sigmoid column per foreground class; background is
    the all-negative row, so there is no explicit background column.
    """

    fg_logits: Value
    offsets: Value
    coords: np.ndarray
    fg_mask: np.ndarray
    scale: float = 1.0

    @property
    def source_index(self):
        return np.flatnonzero(self.fg_mask)

    @property
    def voted_centers(self):
        src = self.source_index
        return self.coords[src] + self.scale * self.offsets.data[src]

    @property
    def scores(self):
        return 1.0 / (1.0 + np.exp(-self.fg_logits.data))

    def __len__(self):
        return len(self.source_index)


class SegVoteHead(Module):
    """Two MLP branches on backbone point features: class logits and 3D offsets."""

    def __init__(self, in_dim, num_classes, spec: MlpSpec, rng, prior=0.01):
        self.cls_trunk = MLP(in_dim, spec, rng)
        self.cls_out = Linear(self.cls_trunk.out_dim, num_classes, rng)
        self.cls_out.bias.data[:] = -np.log((1 - prior) / prior)
        self.vote_trunk = MLP(in_dim, spec, rng)
        self.vote_out = Linear(self.vote_trunk.out_dim, 3, rng)

    def __call__(self, feats):
        return self.cls_out(self.cls_trunk(feats)), self.vote_out(self.vote_trunk(feats))


def classify_and_vote(point_feats: Value, coords, head: SegVoteHead, threshold=0.3, extra_fg=None):
    """Run the heads; a point votes iff its best class probability exceeds ``threshold``.

    ``extra_fg`` (boolean per point) forces additional voters, used during
    training to guarantee votes from ground-truth foreground.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    if point_feats.shape[0] != len(coords):
        raise ValueError("point feats and coords must have the same number of rows")
    logits, offsets = head(point_feats)
    if logits.shape[1]:
        prob = 1.0 / (1.0 + np.exp(-logits.data.max(axis=1)))
    else:
        prob = np.zeros(len(coords))
    fg = prob > threshold
    if extra_fg is not None:
        fg = fg | np.asarray(extra_fg, dtype=bool)
    return VoteOutput(logits, offsets, coords, fg)


def scale_votes(out: VoteOutput, s):
    """Shrink every voting offset by ``s`` in [0, 1]; ``s = 0`` puts votes on their source points."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"vote scale must be in [0, 1], got {s}")
    return replace(out, scale=float(s))


def point_targets(points: PointCloud, boxes, num_classes):
    """Class of the containing box per point (-1 background) and its centre-offset target."""
    labels, offsets, _ = _point_owners(points, boxes)
    return labels, offsets


def _point_owners(points: PointCloud, boxes):
    n = len(points)
    labels = np.full(n, -1, dtype=np.int64)
    owner = np.full(n, -1, dtype=np.int64)
    offsets = np.zeros((n, 3))
    for b, box in enumerate(boxes):
        inside = points_in_box(points.xyz, box) & (labels < 0)
        labels[inside] = box.class_id
        owner[inside] = b
        offsets[inside] = np.asarray(box.center) - points.xyz[inside]
    return labels, offsets, owner


def vote_loss(out: VoteOutput, points: PointCloud, boxes, gamma=2.0, alpha=0.25, balance="none"):
    """(classification focal loss, L1 offset loss on true-foreground points).

    ``balance="object"`` averages the offset loss per object first, so a box
    with 6 points weighs as much as one with 300.
    """
    labels, target, owner = _point_owners(points, boxes)
    onehot = np.zeros(out.fg_logits.shape)
    fg = np.flatnonzero(labels >= 0)
    onehot[fg, labels[fg]] = 1.0
    cls = focal_loss(out.fg_logits, onehot, gamma, alpha)
    weights = object_weights(owner[fg]) if balance == "object" else None
    reg = l1_loss(out.offsets, target, rows=fg, weights=weights)
    return cls, reg
