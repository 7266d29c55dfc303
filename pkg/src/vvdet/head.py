"""Virtual voxel head: grouped MLP heads, focal/L1 losses, box decoding and BEV NMS."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from vvdet.autodiff import ops
from vvdet.autodiff.nn import MLP, Linear, MlpSpec, Module
from vvdet.autodiff.value import Value
from vvdet.geom import Box3D, bev_iou

LOG_DIM_CLAMP = 6.0


@dataclass
class TaskGroupSpec:
    groups: list = field(default_factory=lambda: [[0], [1, 2]])
    widths: list = field(default_factory=lambda: [64, 64])
    norm: str = "none"

    def __post_init__(self):
        flat = [c for g in self.groups for c in g]
        if len(flat) != len(set(flat)) or sorted(flat) != list(range(len(flat))):
            raise ValueError(f"task groups must partition 0..C-1, got {self.groups}")

    @property
    def num_classes(self):
        return sum(len(g) for g in self.groups)

    def group_of(self, class_id):
        for gi, g in enumerate(self.groups):
            if class_id in g:
                return gi, g.index(class_id)
        raise KeyError(class_id)


@dataclass(frozen=True)
class DetectionBox:
    box: Box3D
    score: float
    class_id: int


class VoxelHead(Module):
    """One MLP trunk per task group with a classification and an 8-dim regression branch."""

    def __init__(self, in_dim, tasks: TaskGroupSpec, rng, prior=0.01):
        self.tasks = tasks
        self.trunks = []
        self.cls = []
        self.reg = []
        bias0 = -math.log((1 - prior) / prior)
        for g in tasks.groups:
            trunk = MLP(in_dim, MlpSpec(list(tasks.widths), norm=tasks.norm), rng)
            cls = Linear(trunk.out_dim, len(g), rng)
            cls.bias.data[:] = bias0
            reg = Linear(trunk.out_dim, 8, rng)
            reg.weight.data *= 0.1
            self.trunks.append(trunk)
            self.cls.append(cls)
            self.reg.append(reg)

    def __call__(self, feats: Value):
        """List of ``(class logits [V, |g|], regression [V, 8])``, one per task group."""
        out = []
        for trunk, cls, reg in zip(self.trunks, self.cls, self.reg):
            h = trunk(feats)
            out.append((cls(h), reg(h)))
        return out


def head_forward(feats: Value, head: VoxelHead):
    return head(feats)


def focal_loss(logits: Value, targets, gamma=2.0, alpha=0.25):
    """Sigmoid focal loss summed over classes and averaged over rows.

    ``targets`` is a {0, 1} array shaped like ``logits``; background rows are
    all zeros. ``alpha=None`` disables the class-balance weight.
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ValueError(f"focal_loss: targets {t.shape} vs logits {logits.shape}")
    n = logits.shape[0]
    if n == 0:
        return Value(0.0)
    p = ops.sigmoid(logits)
    ce = ops.add(ops.softplus(logits), ops.mul(logits, Value(-t)))  # -log p_t
    one_minus_pt = ops.add(ops.mul(p, Value(1.0 - 2.0 * t)), Value(t))
    loss = ops.mul(ops.power(one_minus_pt, gamma), ce) if gamma else ce
    if alpha is not None:
        loss = ops.mul(loss, Value(alpha * t + (1.0 - alpha) * (1.0 - t)))
    return ops.scale(ops.sum(loss), 1.0 / n)


def l1_loss(pred: Value, target, rows=None, weights=None):
    """Sum of absolute errors over columns, averaged over the selected rows.

    ``weights`` (one per selected row) turns the average into a weighted one.
    """
    if rows is not None:
        rows = np.asarray(rows, dtype=np.int64)
        if len(rows) == 0:
            return Value(0.0)
        pred = ops.gather(pred, rows)
        target = np.asarray(target)[rows]
    if pred.shape[0] == 0:
        return Value(0.0)
    diff = ops.abs(ops.add(pred, Value(-np.asarray(target, dtype=np.float64))))
    if weights is None:
        return ops.scale(ops.sum(diff), 1.0 / pred.shape[0])
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    return ops.scale(ops.sum(ops.mul(diff, Value(w))), 1.0 / w.sum())


def object_weights(owner):
    """1 / (rows sharing the same owner), so every owner carries the same total weight."""
    owner = np.asarray(owner, dtype=np.int64)
    _, inverse, counts = np.unique(owner, return_inverse=True, return_counts=True)
    return 1.0 / counts[inverse]


def head_loss(outputs, labels, targets, tasks: TaskGroupSpec, gamma=2.0, alpha=0.25, weights=None):
    """Focal classification and L1 regression losses over the given rows.

    ``labels`` holds a class id per row (-1 for background) and ``targets``
    the 8-dim regression target for positive rows. Regression averages over
    positive rows, weighted by ``weights`` (per row) when given.
    """
    labels = np.asarray(labels, dtype=np.int64)
    w_all = np.ones(len(labels)) if weights is None else np.asarray(weights, dtype=np.float64)
    cls_total = Value(0.0)
    reg_terms = []
    n_pos = float(w_all[labels >= 0].sum())
    for gi, (logits, reg) in enumerate(outputs):
        group = tasks.groups[gi]
        onehot = np.zeros(logits.shape)
        rows = []
        for col, c in enumerate(group):
            hit = np.flatnonzero(labels == c)
            onehot[hit, col] = 1.0
            rows.append(hit)
        cls_total = ops.add(cls_total, focal_loss(logits, onehot, gamma, alpha))
        rows = np.sort(np.concatenate(rows)) if rows else np.zeros(0, dtype=np.int64)
        if len(rows):
            diff = ops.abs(ops.add(ops.gather(reg, rows), Value(-np.asarray(targets)[rows])))
            if weights is not None:
                diff = ops.mul(diff, Value(w_all[rows, None]))
            reg_terms.append(ops.sum(diff))
    reg_total = Value(0.0)
    for term in reg_terms:
        reg_total = ops.add(reg_total, term)
    if n_pos:
        reg_total = ops.scale(reg_total, 1.0 / n_pos)
    return cls_total, reg_total


def decode_box(reg_row, center, class_id=0):
    d = np.asarray(reg_row, dtype=np.float64)
    dims = np.exp(np.clip(d[3:6], -LOG_DIM_CLAMP, LOG_DIM_CLAMP))
    yaw = math.atan2(d[6], d[7])
    return Box3D(np.asarray(center) + d[:3], dims, yaw, class_id)


def decode_boxes(regression, centers, scores, threshold, class_ids=None):
    """Boxes for every row with ``score >= threshold``."""
    regression = np.asarray(regression).reshape(-1, 8)
    centers = np.asarray(centers).reshape(-1, 3)
    scores = np.asarray(scores).reshape(-1)
    class_ids = np.zeros(len(scores), dtype=np.int64) if class_ids is None else np.asarray(class_ids)
    out = []
    for i in np.flatnonzero(scores >= threshold):
        out.append(DetectionBox(decode_box(regression[i], centers[i], int(class_ids[i])),
                                float(scores[i]), int(class_ids[i])))
    return out


def predictions_from_outputs(outputs, centers, tasks: TaskGroupSpec, score_thresh=0.1):
    """Decode per-group outputs into candidate boxes (best class per group and row)."""
    dets = []
    for gi, (logits, reg) in enumerate(outputs):
        if logits.shape[0] == 0:
            continue
        probs = 1.0 / (1.0 + np.exp(-logits.data))
        best = probs.argmax(axis=1)
        score = probs[np.arange(len(best)), best]
        cls = np.asarray(tasks.groups[gi])[best]
        dets.extend(decode_boxes(reg.data, centers, score, score_thresh, cls))
    return dets


def nms_bev(boxes, iou_thresh=0.25):
    """Greedy per-class suppression in descending score order (ties keep input order)."""
    keep = []
    by_class = {}
    for i, b in enumerate(boxes):
        by_class.setdefault(b.class_id, []).append(i)
    for cls in sorted(by_class):
        idx = sorted(by_class[cls], key=lambda i: (-boxes[i].score, i))
        kept = []
        for i in idx:
            if all(bev_iou(boxes[i].box, boxes[j].box) <= iou_thresh for j in kept):
                kept.append(i)
        keep.extend(kept)
    keep.sort(key=lambda i: (-boxes[i].score, i))
    return [boxes[i] for i in keep]
