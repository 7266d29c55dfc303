import math

import numpy as np
import pytest

from helpers import assert_grads, jitter_biases
from oracles import nms_reference
from vvdet.autodiff import AdamW, Parameter, Value, ops
from vvdet.geom import Box3D, bev_iou
from vvdet.head import (
    DetectionBox,
    TaskGroupSpec,
    VoxelHead,
    decode_boxes,
    focal_loss,
    head_forward,
    head_loss,
    l1_loss,
    nms_bev,
    object_weights,
    predictions_from_outputs,
)


def test_focal_single_sample_value():
    loss = focal_loss(Value(np.array([[0.0]])), np.array([[1.0]]))
    assert loss.item() == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-12)
    assert loss.item() == pytest.approx(0.0433, abs=5e-5)


def test_focal_reduces_to_cross_entropy(rng):
    x = rng.normal(size=(6, 3))
    t = (rng.random((6, 3)) < 0.4).astype(float)
    p = 1 / (1 + np.exp(-x))
    bce = -(t * np.log(p) + (1 - t) * np.log(1 - p)).sum() / 6
    assert focal_loss(Value(x), t, gamma=0.0, alpha=None).item() == pytest.approx(bce, rel=1e-12)
    pos = np.ones_like(x)
    assert focal_loss(Value(x), pos, gamma=0.0, alpha=1.0).item() == pytest.approx(-np.log(p).sum() / 6, rel=1e-12)


def test_focal_confident_correct_is_near_zero():
    assert focal_loss(Value(np.full((4, 2), 30.0)), np.ones((4, 2))).item() < 1e-12
    with pytest.raises(ValueError):
        focal_loss(Value(np.zeros((2, 2))), np.zeros((2, 3)))


def test_losses_finite_for_extreme_inputs():
    x = Value(np.array([[800.0, -800.0], [-1e3, 1e3]]))
    assert np.isfinite(focal_loss(x, np.array([[0.0, 1.0], [1.0, 0.0]])).item())
    assert l1_loss(Value(np.zeros((0, 8))), np.zeros((0, 8))).item() == 0.0


def test_task_groups():
    with pytest.raises(ValueError):
        TaskGroupSpec([[0], [0, 1]])
    with pytest.raises(ValueError):
        TaskGroupSpec([[0], [2]])
    spec = TaskGroupSpec([[0], [1, 2]])
    assert spec.group_of(2) == (1, 1) and spec.num_classes == 3


def test_zero_weights_give_uniform_logits_and_zero_regression(rng):
    head = VoxelHead(5, TaskGroupSpec([[0, 1, 2]], [4]), rng)
    for p in head.parameters():
        p.data[...] = 0.0
    (logits, reg), = head_forward(Value(rng.normal(size=(7, 5))), head)
    assert logits.shape == (7, 3) and np.all(logits.data == logits.data[0, 0])
    assert np.all(reg.data == 0.0)


def test_decode_boxes():
    reg = np.array([[0.1, 0, 0, 0, 0, 0, 0, -1], [0, 0, 0, 0, 0, 0, -1e-18, -1]])
    dets = decode_boxes(reg, np.zeros((2, 3)), [0.9, 0.5], 0.3)
    assert len(dets) == 2
    assert dets[0].box.yaw == pytest.approx(math.pi) and dets[1].box.yaw == pytest.approx(math.pi)
    assert dets[0].box.center == (0.1, 0.0, 0.0) and dets[0].box.dims == (1.0, 1.0, 1.0)
    assert decode_boxes(reg, np.zeros((2, 3)), [0.1, 0.2], 0.3) == []


def test_predictions_pick_group_class(rng):
    tasks = TaskGroupSpec([[0], [1, 2]], [4])
    outputs = [(Value(np.array([[-5.0]])), Value(np.zeros((1, 8)))),
               (Value(np.array([[-1.0, 3.0]])), Value(np.zeros((1, 8))))]
    dets = predictions_from_outputs(outputs, np.zeros((1, 3)), tasks, 0.1)
    assert [d.class_id for d in dets] == [2]


def det(rng, cls=None):
    box = Box3D(rng.uniform(-3, 3, 3), rng.uniform(0.5, 2.5, 3), rng.uniform(-math.pi, math.pi))
    return DetectionBox(box, float(rng.random()), int(rng.integers(0, 2)) if cls is None else cls)


def test_nms_trivial_cases(rng):
    d = det(rng, 0)
    assert nms_bev([d]) == [d]
    hi = DetectionBox(d.box, 0.9, 0)
    lo = DetectionBox(d.box, 0.4, 0)
    assert nms_bev([lo, hi]) == [hi]
    other = DetectionBox(d.box, 0.4, 1)
    assert nms_bev([other, hi]) == [hi, other]


@pytest.mark.parametrize("seed", range(5))
def test_nms_matches_reference(seed):
    rng = np.random.default_rng(seed)
    dets = [det(rng) for _ in range(50)]
    out = nms_bev(dets, 0.25)
    assert out == nms_reference(dets, 0.25)
    scores = [d.score for d in out]
    assert scores == sorted(scores, reverse=True)
    for i, a in enumerate(out):
        for b in out[i + 1:]:
            if a.class_id == b.class_id:
                assert bev_iou(a.box, b.box) <= 0.25


def test_head_and_loss_gradients():
    tasks = TaskGroupSpec([[0], [1, 2]], [5])
    for trial in range(5):
        rng = np.random.default_rng(trial)
        head = VoxelHead(4, tasks, rng)
        jitter_biases(head, rng)
        x = Parameter(rng.normal(size=(8, 4)))
        labels = rng.integers(-1, 3, size=8)
        targets = rng.normal(size=(8, 8))

        def loss():
            cls, reg = head_loss(head(x), labels, targets, tasks)
            return ops.add(cls, reg)

        assert_grads(loss, [("x", x)] + head.named_parameters())


def test_object_weights():
    w = object_weights([3, 3, -1, 5, 3])
    np.testing.assert_allclose(w, [1 / 3, 1 / 3, 1.0, 1.0, 1 / 3])


def test_weighted_l1_and_head_loss(rng):
    pred = Value(np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 2.0]]))
    target = np.zeros((3, 2))
    assert l1_loss(pred, target).item() == pytest.approx(1.0)
    assert l1_loss(pred, target, weights=[1.0, 1.0, 2.0]).item() == pytest.approx((1 + 0 + 4) / 4)
    tasks = TaskGroupSpec([[0, 1]], [4])
    head = VoxelHead(3, tasks, rng)
    x = Value(rng.normal(size=(5, 3)))
    labels = np.array([0, 0, 0, 1, -1])
    targets = rng.normal(size=(5, 8))
    outputs = head(x)
    per_row = np.abs(outputs[0][1].data - targets).sum(axis=1)
    _, plain = head_loss(outputs, labels, targets, tasks)
    _, balanced = head_loss(outputs, labels, targets, tasks, weights=object_weights([0, 0, 0, 1, -1]))
    assert plain.item() == pytest.approx(per_row[:4].mean(), abs=1e-12)
    assert balanced.item() == pytest.approx((per_row[:3].mean() + per_row[3]) / 2, abs=1e-12)


def test_weighted_head_loss_gradients():
    tasks = TaskGroupSpec([[0], [1, 2]], [5])
    for trial in range(5):
        rng = np.random.default_rng(20 + trial)
        head = VoxelHead(4, tasks, rng)
        jitter_biases(head, rng)
        x = Parameter(rng.normal(size=(8, 4)))
        labels = rng.integers(-1, 3, size=8)
        weights = object_weights(rng.integers(0, 3, size=8))
        targets = rng.normal(size=(8, 8))

        def loss():
            cls, reg = head_loss(head(x), labels, targets, tasks, weights=weights)
            return ops.add(cls, reg)

        assert_grads(loss, [("x", x)] + head.named_parameters())


def test_head_loss_only_regresses_positives(rng):
    tasks = TaskGroupSpec([[0], [1]], [4])
    head = VoxelHead(3, tasks, rng)
    out = head(Value(rng.normal(size=(5, 3))))
    labels = np.array([-1, 0, -1, 1, -1])
    targets = np.zeros((5, 8))
    _, reg = head_loss(out, labels, targets, tasks)
    ref = (np.abs(out[0][1].data[1]).sum() + np.abs(out[1][1].data[3]).sum()) / 2
    assert reg.item() == pytest.approx(ref, rel=1e-12)
    _, none = head_loss(out, np.full(5, -1), targets, tasks)
    assert none.item() == 0.0


def test_loss_decreases_when_overfitting(rng):
    tasks = TaskGroupSpec([[0], [1, 2]], [32])
    head = VoxelHead(6, tasks, rng)
    x = Value(rng.normal(size=(40, 6)))
    labels = rng.integers(-1, 3, size=40)
    targets = rng.normal(size=(40, 8))
    opt = AdamW(head.parameters(), lr=0.003)
    history = []
    for _ in range(50):
        opt.zero_grad()
        cls, reg = head_loss(head(x), labels, targets, tasks)
        total = ops.add(cls, reg)
        total.backward()
        opt.step()
        history.append(total.item())
    smooth = np.convolve(history, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smooth) < 0)
