"""Synthetic LiDAR-like scenes and the on-disk dataset format.

Object points are sampled only on box faces that face the sensor, so box
interiors (and centres) are empty. Ground points sit just below z = 0.

Dataset layout::

    <root>/<split>/<id>.bin   uint32 count, then count * (x, y, z, intensity) float32, little-endian
    <root>/<split>/<id>.txt   one box per line: ``cx cy cz l w h yaw class``
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from vvdet.geom import Box3D, PointCloud, bev_iou, points_in_box

CROWD_DIST = 2.0


@dataclass
class SceneSpec:
    half_range: float = 20.0
    class_names: list = field(default_factory=lambda: ["car", "pedestrian", "cone"])
    class_dims: list = field(default_factory=lambda: [[4.5, 2.0, 1.6], [0.8, 0.8, 1.7], [0.3, 0.3, 0.6]])
    class_probs: list = field(default_factory=lambda: [0.4, 0.3, 0.3])
    dim_jitter: float = 0.05
    min_objects: int = 4
    max_objects: int = 10
    crowding: float = 0.2
    ground_points: int = 1500
    density: float = 20.0
    density_falloff: float = 1.0
    min_object_points: int = 5
    max_object_points: int = 400
    max_points: int = 5000
    sensor_height: float = 1.8
    min_sensor_dist: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if len(self.class_dims) != len(self.class_names) or len(self.class_probs) != len(self.class_names):
            raise ValueError("class_names, class_dims and class_probs must align")
        if any(d <= 0 for dims in self.class_dims for d in dims):
            raise ValueError("class template dims must be positive")
        if min(self.density, self.ground_points, self.crowding) < 0 or self.crowding > 1:
            raise ValueError("densities must be non-negative and crowding in [0, 1]")

    @property
    def num_classes(self):
        return len(self.class_names)

    def square_classes(self):
        return [c for c, d in enumerate(self.class_dims) if d[0] == d[1]]

    def crowdable_classes(self):
        """Classes whose footprint allows a same-class neighbour within the crowding distance."""
        return [c for c, d in enumerate(self.class_dims) if min(d[0], d[1]) * (1 + self.dim_jitter) + 0.2 < CROWD_DIST]


def half_turn_yaw(yaw):
    """Equivalent heading in [-pi/2, pi/2); a box is unchanged by a half turn."""
    return (yaw + math.pi / 2) % math.pi - math.pi / 2


def canonical_box(box: Box3D, square=False):
    """Same box with a canonical heading.

    Headings are reduced to [-pi/2, pi/2). For square-footprint classes a
    quarter turn with swapped length/width is also the same box, so the
    heading is reduced to [-pi/4, pi/4).
    """
    if not square:
        return Box3D(box.center, box.dims, half_turn_yaw(box.yaw), box.class_id)
    k = round(box.yaw / (math.pi / 2))
    l, w, h = box.dims
    dims = (w, l, h) if k % 2 else (l, w, h)
    yaw = box.yaw - k * math.pi / 2
    if yaw >= math.pi / 4:
        yaw -= math.pi / 2
        dims = (dims[1], dims[0], h)
    return Box3D(box.center, dims, yaw, box.class_id)


def _face_samples(box: Box3D, sensor, rng, density, falloff, n_min, n_max):
    l, w, h = box.dims
    c = np.asarray(box.center)
    cy, sy = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    # (axis, sign, face area) in the box frame; bottom face never visible
    faces = [(0, 1, w * h), (0, -1, w * h), (1, 1, l * h), (1, -1, l * h), (2, 1, l * w)]
    half = np.array([l, w, h]) / 2
    local_sensor = rot.T @ (sensor - c)
    visible = [(a, s, area) for a, s, area in faces if s * (local_sensor[a] - s * half[a]) > 0]
    dist = max(float(np.linalg.norm((sensor - c)[:2])), 1.0)
    area = sum(f[2] for f in visible)
    n = int(round(density * area * (10.0 / max(dist, 10.0)) ** falloff))
    n = int(np.clip(n, n_min, n_max))
    weights = np.array([f[2] for f in visible]) / area
    which = rng.choice(len(visible), size=n, p=weights)
    u = rng.uniform(-1.0, 1.0, size=(n, 3)) * half * 0.99
    for i, (a, s, _) in enumerate(visible):
        sel = which == i
        u[sel, a] = s * half[a] * 0.99
    return u @ rot.T + c


def _place(spec, rng, cls, existing, anchor=None):
    """Try to place one object of ``cls``; ``anchor`` places it within crowding distance of that box."""
    dims0 = np.asarray(spec.class_dims[cls])
    for _ in range(200):
        dims = dims0 * (1.0 + spec.dim_jitter * rng.uniform(-1, 1, size=3))
        yaw = rng.uniform(-math.pi / 2, math.pi / 2)
        if anchor is None:
            lim = spec.half_range - max(dims[:2])
            xy = rng.uniform(-lim, lim, size=2)
        else:
            r = rng.uniform(0.6 * (max(dims[:2]) + max(anchor.dims[:2])) / 2 + 0.2, CROWD_DIST - 0.1)
            ang = rng.uniform(-math.pi, math.pi)
            xy = np.asarray(anchor.center[:2]) + r * np.array([math.cos(ang), math.sin(ang)])
            if np.any(np.abs(xy) > spec.half_range - max(dims[:2])):
                continue
        if np.hypot(*xy) < spec.min_sensor_dist:
            continue
        box = canonical_box(Box3D((xy[0], xy[1], dims[2] / 2), dims, yaw, cls), cls in spec.square_classes())
        ok = True
        for other in existing:
            d = math.hypot(other.center[0] - xy[0], other.center[1] - xy[1])
            if other.class_id == cls and d < CROWD_DIST and other is not anchor:
                ok = False
                break
            if bev_iou(box.enlarged(0.1), other.enlarged(0.1)) > 0:
                ok = False
                break
        if ok:
            return box
    return None


def generate_boxes(spec: SceneSpec, rng):
    """Boxes for one scene; about ``crowding`` of the objects come in same-class pairs < 2 m apart."""
    target = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    probs = np.asarray(spec.class_probs, dtype=np.float64)
    probs = probs / probs.sum()
    crowdable = spec.crowdable_classes()
    n_crowded = int(rng.binomial(target, spec.crowding)) if crowdable else 0
    if n_crowded % 2:
        # round to an even count without shifting the mean
        n_crowded += 1 if n_crowded < target and rng.uniform() < 0.5 else -1
    units = [True] * (n_crowded // 2) + [False] * (target - n_crowded)
    boxes = []
    for u in rng.permutation(len(units)):
        pair = units[u]
        for _ in range(4):
            if pair:
                sub = probs[crowdable] / probs[crowdable].sum()
                cls = int(np.asarray(crowdable)[rng.choice(len(crowdable), p=sub)])
            else:
                cls = int(rng.choice(len(probs), p=probs))
            first = _place(spec, rng, cls, boxes)
            if first is None:
                continue
            if not pair:
                boxes.append(first)
                break
            second = _place(spec, rng, cls, boxes + [first], anchor=first)
            if second is not None:
                boxes.extend([first, second])
                break
    return boxes


def generate_scene(spec: SceneSpec, seed=None):
    """Deterministic (points, boxes) for ``seed`` (defaults to ``spec.seed``)."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    boxes = generate_boxes(spec, rng)
    sensor = np.array([0.0, 0.0, spec.sensor_height])
    parts, labels, inten = [], [], []
    for box in boxes:
        pts = _face_samples(box, sensor, rng, spec.density, spec.density_falloff,
                            spec.min_object_points, spec.max_object_points)
        parts.append(pts)
        labels.append(np.full(len(pts), box.class_id))
        inten.append(rng.uniform(0.2, 1.0, size=len(pts)))
    g = spec.ground_points
    ground = np.column_stack([
        rng.uniform(-spec.half_range, spec.half_range, size=(g, 2)),
        -np.abs(rng.normal(0.05, 0.02, size=g)) - 0.01,
    ])
    parts.append(ground)
    labels.append(np.full(g, -1))
    inten.append(rng.uniform(0.0, 0.4, size=g))
    xyz = np.concatenate(parts, axis=0)
    lab = np.concatenate(labels).astype(np.int64)
    att = np.concatenate(inten)
    if len(xyz) > spec.max_points:
        keep = np.sort(rng.choice(len(xyz), size=spec.max_points, replace=False))
        xyz, lab, att = xyz[keep], lab[keep], att[keep]
    # round-trip through float32 so the in-memory scene equals the on-disk one
    xyz = xyz.astype(np.float32).astype(np.float64)
    att = att.astype(np.float32).astype(np.float64)
    return PointCloud(xyz, att[:, None], lab), boxes


def crowded_flags(boxes, dist=CROWD_DIST):
    """True for boxes whose nearest same-class neighbour (BEV centre distance) is closer than ``dist``."""
    flags = np.zeros(len(boxes), dtype=bool)
    for i, a in enumerate(boxes):
        for j, b in enumerate(boxes):
            if i != j and a.class_id == b.class_id:
                if math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) < dist:
                    flags[i] = True
                    break
    return flags


def label_points(xyz, boxes):
    lab = np.full(len(xyz), -1, dtype=np.int64)
    for box in boxes:
        inside = points_in_box(xyz, box) & (lab < 0)
        lab[inside] = box.class_id
    return lab


def write_points(path, xyz, intensity):
    arr = np.column_stack([xyz, np.asarray(intensity).reshape(-1)]).astype("<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(arr)))
        f.write(arr.tobytes())


def read_points(path):
    with open(path, "rb") as f:
        raw = f.read()
    (n,) = struct.unpack_from("<I", raw, 0)
    arr = np.frombuffer(raw, dtype="<f4", count=4 * n, offset=4).reshape(n, 4).astype(np.float64)
    return arr[:, :3], arr[:, 3]


def write_labels(path, boxes):
    with open(path, "w") as f:
        for b in boxes:
            vals = [*b.center, *b.dims, b.yaw]
            f.write(" ".join(repr(float(v)) for v in vals) + f" {b.class_id}\n")


def read_labels(path):
    boxes = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            v = [float(x) for x in parts[:7]]
            boxes.append(Box3D(v[0:3], v[3:6], v[6], int(parts[7])))
    return boxes


def save_scene(directory, scene_id, points: PointCloud, boxes):
    os.makedirs(directory, exist_ok=True)
    write_points(os.path.join(directory, f"{scene_id}.bin"), points.xyz, points.attrs[:, 0])
    write_labels(os.path.join(directory, f"{scene_id}.txt"), boxes)


def load_scene(directory, scene_id):
    xyz, intensity = read_points(os.path.join(directory, f"{scene_id}.bin"))
    label_path = os.path.join(directory, f"{scene_id}.txt")
    boxes = read_labels(label_path) if os.path.exists(label_path) else []
    return PointCloud(xyz, intensity[:, None], label_points(xyz, boxes)), boxes


def list_scenes(directory):
    return sorted(f[:-4] for f in os.listdir(directory) if f.endswith(".bin"))


SPLIT_SEED_OFFSET = {"train": 0, "val": 1_000_000, "test": 2_000_000}


def generate_dataset(root, spec: SceneSpec, num_train, num_val):
    """Write train/val splits; scene ``i`` of a split uses seed ``spec.seed + offset + i``."""
    for split, count in (("train", num_train), ("val", num_val)):
        directory = os.path.join(root, split)
        for i in range(count):
            points, boxes = generate_scene(spec, spec.seed + SPLIT_SEED_OFFSET[split] + i)
            save_scene(directory, f"{i:06d}", points, boxes)
    with open(os.path.join(root, "classes.txt"), "w") as f:
        f.write("\n".join(spec.class_names) + "\n")


class SceneDataset:
    """Lazy loader over one split directory."""

    def __init__(self, directory, limit=0):
        self.directory = directory
        if not os.path.isdir(directory):
            raise FileNotFoundError(f"dataset split not found: {directory}")
        self.ids = list_scenes(directory)
        if limit:
            self.ids = self.ids[:limit]

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i):
        return load_scene(self.directory, self.ids[i])
