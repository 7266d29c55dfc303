"""Slow, obviously-correct reference implementations used only by the tests."""
import itertools
import math

import numpy as np

from vvdet.geom import bev_iou, point_in_box


class UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def union_find_components(pts, radius):
    """All-pairs union-find; labels numbered by first appearance."""
    pts = np.asarray(pts, dtype=np.float64)
    uf = UnionFind(len(pts))
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            if math.dist(pts[i], pts[j]) <= radius:
                uf.union(i, j)
    return first_appearance([uf.find(i) for i in range(len(pts))])


def first_appearance(labels):
    mapping = {}
    return np.array([mapping.setdefault(v, len(mapping)) for v in labels], dtype=np.int64)


def group_by_pool(coords, feats, reduce="mean"):
    groups = {}
    for i, c in enumerate(map(tuple, np.asarray(coords).tolist())):
        groups.setdefault(c, []).append(i)
    keys = sorted(groups)
    fn = np.mean if reduce == "mean" else np.max
    pooled = np.array([fn(feats[groups[k]], axis=0) for k in keys]).reshape(len(keys), -1)
    return np.array(keys, dtype=np.int64).reshape(-1, 3), pooled


def dense_grid(coords, feats, shape, lo):
    grid = np.zeros(tuple(shape) + (feats.shape[1],))
    for c, f in zip(coords, feats):
        grid[tuple(np.asarray(c) - lo)] = f
    return grid


def dense_conv3d(grid, weight, bias, stride=1):
    """Dense 3x3x3 cross-correlation, zero padding 1; ``weight`` is [27, Cin, Cout] in
    (dx, dy, dz) lexicographic order over {-1, 0, 1}^3."""
    w = weight.reshape(3, 3, 3, weight.shape[1], weight.shape[2])
    pad = np.pad(grid, ((1, 1), (1, 1), (1, 1), (0, 0)))
    nx, ny, nz = grid.shape[:3]
    ox, oy, oz = [(n + stride - 1) // stride for n in (nx, ny, nz)]
    out = np.zeros((ox, oy, oz, weight.shape[2])) + bias
    for a, b, c in itertools.product(range(3), repeat=3):
        patch = pad[a:a + stride * ox:stride, b:b + stride * oy:stride, c:c + stride * oz:stride]
        out += patch @ w[a, b, c]
    return out


def nms_reference(dets, iou_thresh):
    """O(n^2) suppression matrix version, per class."""
    keep = []
    for cls in sorted({d.class_id for d in dets}):
        idx = [i for i, d in enumerate(dets) if d.class_id == cls]
        idx.sort(key=lambda i: (-dets[i].score, i))
        iou = np.array([[bev_iou(dets[i].box, dets[j].box) for j in idx] for i in idx]).reshape(len(idx), len(idx))
        suppressed = np.zeros(len(idx), dtype=bool)
        for a in range(len(idx)):
            if suppressed[a]:
                continue
            keep.append(idx[a])
            for b in range(a + 1, len(idx)):
                if iou[a, b] > iou_thresh:
                    suppressed[b] = True
    keep.sort(key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in keep]


def assign_reference(vset, boxes, alpha, use_geometric=False, member_fg=None):
    """Per virtual voxel: position by explicit loops, then the first/closest containing box."""
    fg = vset.member_fg if member_fg is None else member_fg
    labels = np.full(len(vset), -1, dtype=np.int64)
    for v in range(len(vset)):
        if not vset.is_virtual[v]:
            continue
        if use_geometric:
            pos = vset.geometric_centers()[v]
        else:
            num = np.zeros(3)
            den = 0.0
            members = [m for m in range(vset.num_members) if vset.member_voxel[m] == v]
            for m in members:
                w = 1.0 if fg[m] else alpha
                num += w * vset.member_pos[m]
                den += w
            pos = num / den if den > 0 else np.mean(vset.member_pos[members], axis=0)
        hits = [b for b in range(len(boxes)) if point_in_box(pos, boxes[b])]
        if hits:
            best = min(hits, key=lambda b: np.linalg.norm(np.asarray(boxes[b].center) - pos))
            labels[v] = boxes[best].class_id
    return labels


def greedy_match_reference(preds, gts, thr):
    """Per class TP list built from an explicit IoU search, for comparison with the evaluator."""
    order = sorted(((-p.score, s, i) for s, ps in enumerate(preds) for i, p in enumerate(ps)))
    used = [set() for _ in gts]
    tp = []
    for _, s, i in order:
        best, best_j = -1.0, None
        for j, g in enumerate(gts[s]):
            if j in used[s]:
                continue
            iou = bev_iou(preds[s][i].box, g)
            if iou > best:
                best, best_j = iou, j
        if best_j is not None and best >= thr and best > 0:
            used[s].add(best_j)
            tp.append(1.0)
        else:
            tp.append(0.0)
    return tp


def ap40_reference(tp, num_gt):
    if num_gt == 0 or not tp:
        return 0.0
    tps = fps = 0
    prec, rec = [], []
    for t in tp:
        tps += t
        fps += 1 - t
        prec.append(tps / (tps + fps))
        rec.append(tps / num_gt)
    total = 0.0
    for k in range(1, 41):
        r = k / 40
        cands = [p for p, q in zip(prec, rec) if q >= r - 1e-12]
        total += max(cands) if cands else 0.0
    return total / 40
