import math

import numpy as np
import pytest

from helpers import assert_grads, jitter_biases
from vvdet.autodiff import AdamW, MlpSpec, Parameter, Value, ops
from vvdet.geom import Box3D, PointCloud, VoxelGridSpec, voxel_coords
from vvdet.segvote import SegVoteHead, VoteOutput, classify_and_vote, point_targets, scale_votes, vote_loss
from vvdet.virtual_voxel import virtual_voxelize


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def votes_from(coords, offsets, logits=None, fg=None):
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    logits = np.zeros((n, 1)) if logits is None else np.asarray(logits, dtype=np.float64)
    fg = np.ones(n, dtype=bool) if fg is None else np.asarray(fg)
    return VoteOutput(Value(logits), Value(np.asarray(offsets, dtype=np.float64)), coords, fg)


def test_zero_offsets_vote_onto_sources(rng):
    coords = rng.normal(size=(6, 3))
    out = votes_from(coords, np.zeros((6, 3)), fg=[1, 0, 1, 1, 0, 0])
    np.testing.assert_array_equal(out.voted_centers, coords[[0, 2, 3]])
    assert out.source_index.tolist() == [0, 2, 3]


def test_impossible_threshold_gives_no_votes(rng):
    head = SegVoteHead(4, 3, MlpSpec([8]), rng)
    out = classify_and_vote(Value(rng.normal(size=(20, 4))), rng.normal(size=(20, 3)), head, threshold=1.0)
    assert len(out) == 0
    assert out.voted_centers.shape == (0, 3)


def test_extra_foreground_forces_votes(rng):
    head = SegVoteHead(4, 1, MlpSpec([8]), rng)
    extra = np.zeros(5, dtype=bool)
    extra[3] = True
    out = classify_and_vote(Value(rng.normal(size=(5, 4))), np.zeros((5, 3)), head, threshold=1.0, extra_fg=extra)
    assert out.source_index.tolist() == [3]


def test_scale_votes():
    out = votes_from([[0.0, 0, 0]], [[2.0, 0, 0]])
    assert scale_votes(out, 0.5).voted_centers.tolist() == [[1.0, 0, 0]]
    assert scale_votes(out, 0.0).voted_centers.tolist() == [[0.0, 0, 0]]
    assert scale_votes(out, 1.0).voted_centers.tolist() == out.voted_centers.tolist()
    for bad in (-0.1, 1.5):
        with pytest.raises(ValueError):
            scale_votes(out, bad)


def test_zero_scale_adds_no_new_sites(rng):
    coords = rng.uniform(-3, 3, size=(80, 3))
    fg = rng.random(80) < 0.4
    out = scale_votes(votes_from(coords, rng.normal(size=(80, 3)), fg=fg), 0.0)
    spec = VoxelGridSpec((0.4, 0.4, 0.4))
    vset = virtual_voxelize(PointCloud(coords), out, spec)
    virtual = {tuple(c) for c in vset.coords[vset.is_virtual]}
    assert virtual == {tuple(c) for c in voxel_coords(coords[fg], spec)}


def test_vote_loss_hand_computed():
    box = Box3D((0, 0, 0), (2, 2, 2), 0.0, 0)
    coords = [[0.5, 0, 0], [0, -0.5, 0.5], [5, 0, 0]]
    offsets = [[0, 0, 0], [0, 0.5, 0], [1, 1, 1]]
    out = votes_from(coords, offsets, logits=[[0.0], [1.0], [-1.0]])
    cls, reg = vote_loss(out, PointCloud(np.array(coords)), [box])
    p1, p2 = sigmoid(1.0), sigmoid(-1.0)
    ref_cls = (0.25 * 0.25 * math.log(2) + 0.25 * (1 - p1) ** 2 * -math.log(p1)
               + 0.75 * p2 ** 2 * -math.log(1 - p2)) / 3
    assert cls.item() == pytest.approx(ref_cls, abs=1e-12)
    assert reg.item() == pytest.approx((0.5 + 0.5) / 2, abs=1e-12)


def test_vote_loss_object_balance():
    small = Box3D((0, 0, 0), (1, 1, 1), 0.0, 0)
    large = Box3D((10, 0, 0), (4, 4, 4), 0.0, 0)
    coords = [[0.1, 0, 0], [9, 0, 0], [10, 1, 0], [11, 0, 1]]
    # per-point L1 errors: 1 for the small box, 0, 0 and 3 for the large one
    offsets = [[-0.1 + 1, 0, 0], [1, 0, 0], [0, -1, 0], [-1, 0, -1 + 3]]
    out = votes_from(coords, offsets)
    pc = PointCloud(np.array(coords, dtype=float))
    assert vote_loss(out, pc, [small, large])[1].item() == pytest.approx((1 + 0 + 0 + 3) / 4, abs=1e-12)
    balanced = vote_loss(out, pc, [small, large], balance="object")[1].item()
    assert balanced == pytest.approx((1 + (0 + 0 + 3) / 3) / 2, abs=1e-12)


def test_vote_loss_perfect_offsets_and_no_foreground(rng):
    box = Box3D((1, 2, 0.5), (2, 1, 1), 0.3, 0)
    coords = rng.uniform(-0.4, 0.4, size=(10, 3)) + [1, 2, 0.5]
    _, target = point_targets(PointCloud(coords), [box], 1)
    _, reg = vote_loss(votes_from(coords, target), PointCloud(coords), [box])
    assert reg.item() == 0.0
    far = coords + 20
    cls, reg = vote_loss(votes_from(far, rng.normal(size=(10, 3)), logits=np.full((10, 1), -2.0)),
                         PointCloud(far), [box])
    assert reg.item() == 0.0
    p = sigmoid(-2.0)
    assert cls.item() == pytest.approx(0.75 * p ** 2 * -math.log(1 - p), abs=1e-12)


def test_vote_loss_translation_equivariant(rng):
    box = Box3D((1, 2, 0.5), (2, 1, 1), 0.3, 0)
    coords = rng.uniform(-1.5, 1.5, size=(30, 3)) + [1, 2, 0.5]
    offsets = rng.normal(size=(30, 3))
    logits = rng.normal(size=(30, 1))
    shift = np.array([7.0, -3.0, 1.0])
    a = vote_loss(votes_from(coords, offsets, logits), PointCloud(coords), [box])
    moved = Box3D(tuple(np.add(box.center, shift)), box.dims, box.yaw, 0)
    b = vote_loss(votes_from(coords + shift, offsets, logits), PointCloud(coords + shift), [moved])
    assert a[0].item() == pytest.approx(b[0].item(), abs=1e-12)
    assert a[1].item() == pytest.approx(b[1].item(), abs=1e-9)


def surface_points(rng, box, n):
    l, w, h = box.dims
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * [l, w, h]
    face = rng.integers(0, 3, size=n)
    u[np.arange(n), face] = np.sign(rng.uniform(-1, 1, size=n)) * np.array([l, w, h])[face] / 2
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    return u @ rot.T + box.center


def test_supervised_toy_votes_converge():
    rng = np.random.default_rng(7)
    box = Box3D((1.0, 2.0, 0.5), (2.0, 1.0, 1.0), 0.4, 0)
    coords = surface_points(rng, box, 50)
    cloud = PointCloud(coords)
    head = SegVoteHead(3, 1, MlpSpec([32, 32]), rng)
    opt = AdamW(head.parameters(), lr=0.01, weight_decay=0.0)
    feats = Value(coords - coords.mean(axis=0))
    for _ in range(200):
        opt.zero_grad()
        out = classify_and_vote(feats, coords, head)
        cls, reg = vote_loss(out, cloud, [box])
        ops.add(cls, reg).backward()
        opt.step()
    out = classify_and_vote(feats, coords, head, threshold=0.0)
    err = np.linalg.norm(out.voted_centers - np.asarray(box.center), axis=1).mean()
    assert err < 0.25 * np.linalg.norm(box.dims)


def test_head_and_loss_gradients():
    box = Box3D((0, 0, 0), (2, 2, 2), 0.0, 1)
    for trial in range(5):
        rng = np.random.default_rng(trial)
        coords = rng.uniform(-2, 2, size=(10, 3))
        head = SegVoteHead(4, 2, MlpSpec([5]), rng)
        jitter_biases(head, rng)
        x = Parameter(rng.normal(size=(10, 4)))

        def loss():
            out = classify_and_vote(x, coords, head)
            cls, reg = vote_loss(out, PointCloud(coords), [box])
            return ops.add(cls, reg)

        assert_grads(loss, [("x", x)] + head.named_parameters())
