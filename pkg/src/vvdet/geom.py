"""Point-cloud and box geometry: voxelization, stride conversion, point-in-box, BEV IoU."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

AREA_EPS = 1e-9


class InvalidInputError(ValueError):
    """Rejected geometric input (non-finite coordinates, bad dimensions)."""


def wrap_angle(theta):
    """Map an angle into (-pi, pi]."""
    t = math.remainder(float(theta), 2.0 * math.pi)
    return math.pi if t == -math.pi else t


@dataclass
class PointCloud:
    xyz: np.ndarray
    attrs: np.ndarray = None
    gt_label: np.ndarray | None = None

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = len(self.xyz)
        if self.attrs is None:
            self.attrs = np.zeros((n, 1))
        self.attrs = np.asarray(self.attrs, dtype=np.float64).reshape(n, -1)
        if self.gt_label is not None:
            self.gt_label = np.asarray(self.gt_label, dtype=np.int64).reshape(-1)
            if len(self.gt_label) != n:
                raise InvalidInputError(f"gt_label length {len(self.gt_label)} != {n} points")
        if not np.all(np.isfinite(self.xyz)):
            raise InvalidInputError("point coordinates must be finite")

    def __len__(self):
        return len(self.xyz)


@dataclass(frozen=True)
class Box3D:
    """Gravity-centred oriented box; ``dims`` is (length, width, height)."""

    center: tuple
    dims: tuple
    yaw: float = 0.0
    class_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "dims", tuple(float(v) for v in self.dims))
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))
        object.__setattr__(self, "class_id", int(self.class_id))
        if len(self.center) != 3 or len(self.dims) != 3:
            raise InvalidInputError("center and dims must have 3 components")
        if not all(d > 0 and math.isfinite(d) for d in self.dims):
            raise InvalidInputError(f"box dims must be strictly positive, got {self.dims}")
        if not all(math.isfinite(c) for c in self.center):
            raise InvalidInputError("box center must be finite")

    def as_array(self):
        return np.array([*self.center, *self.dims, self.yaw])

    def enlarged(self, margin):
        """Same box with every side pushed out by ``margin`` metres."""
        l, w, h = self.dims
        return Box3D(self.center, (l + 2 * margin, w + 2 * margin, h + 2 * margin), self.yaw, self.class_id)


@dataclass(frozen=True)
class VoxelGridSpec:
    voxel_size: tuple = (0.4, 0.4, 0.4)
    origin: tuple = (0.0, 0.0, 0.0)
    stride: int = 1

    def __post_init__(self):
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        if len(self.voxel_size) != 3 or any(v <= 0 for v in self.voxel_size):
            raise InvalidInputError(f"voxel_size must be 3 positive values, got {self.voxel_size}")
        if int(self.stride) != self.stride or self.stride < 1:
            raise InvalidInputError(f"stride must be an integer >= 1, got {self.stride}")

    @property
    def cell_size(self):
        return np.asarray(self.voxel_size) * self.stride

    def with_stride(self, stride):
        return VoxelGridSpec(self.voxel_size, self.origin, stride)

    def voxel_centers(self, coords):
        """Geometric centres (m) of integer voxel coords at this spec's stride."""
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
        return (coords + 0.5) * self.cell_size + np.asarray(self.origin)


def voxel_coords(xyz, spec: VoxelGridSpec):
    """Integer cell index of every point, ``floor((p - origin) / cell)``."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(xyz)):
        raise InvalidInputError("point coordinates must be finite")
    return np.floor((xyz - np.asarray(spec.origin)) / spec.cell_size).astype(np.int64)


def voxelize(points, spec: VoxelGridSpec):
    """Map each occupied ``VoxelCoord`` tuple to the indices of the points inside it."""
    xyz = points.xyz if isinstance(points, PointCloud) else points
    coords = voxel_coords(xyz, spec)
    buckets = {}
    if len(coords) == 0:
        return buckets
    uniq, inverse = np.unique(coords, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    splits = np.cumsum(np.bincount(inverse, minlength=len(uniq)))[:-1]
    for c, members in zip(uniq, np.split(order, splits)):
        buckets[tuple(int(v) for v in c)] = members.tolist()
    return buckets


def convert_stride(coord, s):
    """Place a stride-``s`` voxel coord on the stride-1 grid: ``I*s + floor(s/2)``."""
    if s < 1:
        raise InvalidInputError("stride must be >= 1")
    c = np.asarray(coord, dtype=np.int64)
    return c * s + s // 2


def _to_box_frame(points, box: Box3D):
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3) - np.asarray(box.center)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x = c * p[:, 0] + s * p[:, 1]
    y = -s * p[:, 0] + c * p[:, 1]
    return x, y, p[:, 2]


def points_in_box(points, box: Box3D):
    """Vectorised inclusive containment test, boolean array of length N."""
    x, y, z = _to_box_frame(points, box)
    l, w, h = box.dims
    return (np.abs(x) <= l / 2) & (np.abs(y) <= w / 2) & (np.abs(z) <= h / 2)


def point_in_box(p, box: Box3D) -> bool:
    return bool(points_in_box(p, box)[0])


def bev_corners(box: Box3D):
    """Counter-clockwise BEV corners, shape [4, 2]."""
    l, w, _ = box.dims
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(box.center[:2])


def polygon_area(poly):
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject, clipper):
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clipper``."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, out = out, []

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, sp = cur, sc
    return np.array(out).reshape(-1, 2)


def bev_iou(a: Box3D, b: Box3D) -> float:
    area_a = a.dims[0] * a.dims[1]
    area_b = b.dims[0] * b.dims[1]
    if area_a < AREA_EPS or area_b < AREA_EPS:
        return 0.0
    # circumcircle rejection
    ra = 0.5 * math.hypot(a.dims[0], a.dims[1])
    rb = 0.5 * math.hypot(b.dims[0], b.dims[1])
    if math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) > ra + rb:
        return 0.0
    inter = polygon_area(clip_polygon(bev_corners(a), bev_corners(b)))
    if inter < AREA_EPS:
        return 0.0
    return float(min(1.0, max(0.0, inter / (area_a + area_b - inter))))


def bev_iou_matrix(boxes_a, boxes_b):
    m = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            m[i, j] = bev_iou(a, b)
    return m
