"""BEV average precision with a crowded/normal breakdown."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vvdet.data import CROWD_DIST, crowded_flags
from vvdet.geom import bev_iou_matrix

RECALL_POINTS = np.linspace(1.0 / 40, 1.0, 40)


@dataclass
class EvalResult:
    ap: dict
    recall: dict
    num_gt: dict
    ap_crowded: dict = field(default_factory=dict)
    ap_normal: dict = field(default_factory=dict)

    @property
    def mAP(self):
        # classes without ground truth carry no AP
        vals = [self.ap[c] for c in self.ap if self.num_gt.get(c, 0) > 0]
        return float(np.mean(vals)) if vals else 0.0

    def format(self, class_names=None):
        lines = ["class,num_gt,AP,recall,AP_crowded,AP_normal"]
        for c in sorted(self.ap):
            name = class_names[c] if class_names and c < len(class_names) else str(c)
            lines.append(f"{name},{self.num_gt[c]},{self.ap[c]:.4f},{self.recall[c]:.4f},"
                         f"{self.ap_crowded.get(c, 0.0):.4f},{self.ap_normal.get(c, 0.0):.4f}")
        lines.append(f"mAP,{sum(self.num_gt.values())},{self.mAP:.4f},,,")
        return "\n".join(lines)


def interpolated_ap(tp, num_gt, recall_points=RECALL_POINTS):
    """40-point interpolated AP of a score-sorted TP/FP sequence."""
    if num_gt == 0 or len(tp) == 0:
        return 0.0, 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    # precision envelope: best precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for r in recall_points:
        hit = np.flatnonzero(recall >= r - 1e-12)
        ap += env[hit[0]] if len(hit) else 0.0
    return ap / len(recall_points), float(recall[-1])


def match_class(preds, gts, iou_thresh, ignore=None):
    """Greedy score-ordered matching for one class.

    ``preds`` and ``gts`` are per-scene lists; ``ignore`` optionally flags GTs
    whose matches are dropped from the sequence instead of counted. Returns
    (tp flags in score order, number of non-ignored GTs).
    """
    order = []
    for s, scene_preds in enumerate(preds):
        for i, p in enumerate(scene_preds):
            order.append((-p.score, s, i))
    order.sort()
    ious = [bev_iou_matrix([p.box for p in sp], g) if len(sp) and len(g) else None
            for sp, g in zip(preds, gts)]
    matched = [np.zeros(len(g), dtype=bool) for g in gts]
    ignore = ignore or [np.zeros(len(g), dtype=bool) for g in gts]
    tp = []
    for _, s, i in order:
        best_j = -1
        if ious[s] is not None:
            row = np.where(matched[s], -1.0, ious[s][i])
            j = int(np.argmax(row))
            if row[j] >= iou_thresh and row[j] > 0:
                best_j = j
        if best_j >= 0:
            matched[s][best_j] = True
            if ignore[s][best_j]:
                continue
            tp.append(1.0)
        else:
            tp.append(0.0)
    num_gt = int(sum((~ig).sum() for ig in ignore))
    return np.asarray(tp), num_gt


def evaluate_ap(predictions, ground_truth, iou_thresholds, class_ids=None, crowd_dist=CROWD_DIST):
    """``predictions``: per scene a list of DetectionBox; ``ground_truth``: per scene a list of Box3D.

    ``iou_thresholds`` is a per-class sequence or dict, or one float for all.
    """
    if len(predictions) != len(ground_truth):
        raise ValueError("predictions and ground truth must cover the same scenes")
    if class_ids is None:
        class_ids = sorted({b.class_id for g in ground_truth for b in g}
                           | {d.class_id for p in predictions for d in p})
    crowded = [crowded_flags(g, crowd_dist) for g in ground_truth]
    res = EvalResult({}, {}, {})
    for c in class_ids:
        if isinstance(iou_thresholds, (int, float)):
            thr = float(iou_thresholds)
        else:
            thr = float(iou_thresholds[c])
        preds = [[d for d in p if d.class_id == c] for p in predictions]
        sel = [np.array([b.class_id == c for b in g], dtype=bool) for g in ground_truth]
        gts = [[b for b, k in zip(g, m) if k] for g, m in zip(ground_truth, sel)]
        crowd = [cf[m] for cf, m in zip(crowded, sel)]
        tp, n = match_class(preds, gts, thr)
        res.ap[c], res.recall[c] = interpolated_ap(tp, n)
        res.num_gt[c] = n
        tp, n = match_class(preds, gts, thr, ignore=[~f for f in crowd])
        res.ap_crowded[c] = interpolated_ap(tp, n)[0]
        tp, n = match_class(preds, gts, thr, ignore=crowd)
        res.ap_normal[c] = interpolated_ap(tp, n)[0]
    return res
