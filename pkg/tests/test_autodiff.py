import numpy as np
import pytest

from vvdet.autodiff import (
    MLP,
    AdamW,
    BatchNorm1d,
    Linear,
    MlpSpec,
    Module,
    Parameter,
    ShapeError,
    Value,
    forward,
    grad_check,
    load_checkpoint,
    one_cycle_lr,
    ops,
    save_checkpoint,
    sgd_adam_step,
)
from vvdet.autodiff.checkpoint import CheckpointError

TOL = 1e-5


def leaf(rng, *shape, low=-1.0, high=1.0):
    return Parameter(rng.uniform(low, high, size=shape))


def check(loss_fn, params):
    report = grad_check(loss_fn, params)
    assert report.passed(TOL), str(report)


UNARY = {
    "relu": ops.relu,
    "exp": ops.exp,
    "sigmoid": ops.sigmoid,
    "softplus": ops.softplus,
    "abs": ops.abs,
    "power3": lambda a: ops.power(ops.abs(a), 3),
    "scale": lambda a: ops.scale(a, -2.5),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    for _ in range(5):
        a = leaf(rng, 4, 3)
        a.data[np.abs(a.data) < 1e-3] += 0.01  # keep away from kinks
        w = rng.normal(size=(4, 3))
        check(lambda: ops.sum(ops.mul(UNARY[name](a), Value(w))), [("a", a)])


def test_log_gradient(rng):
    for _ in range(5):
        a = leaf(rng, 5, low=0.5, high=2.0)
        check(lambda: ops.sum(ops.log(a)), [("a", a)])


def test_binary_and_structural_gradients(rng):
    for _ in range(5):
        a, b = leaf(rng, 4, 3), leaf(rng, 3, 2)
        c = leaf(rng, 3)
        idx = rng.integers(0, 4, size=7)
        seg = rng.integers(0, 3, size=4)
        check(lambda: ops.sum(ops.mul(ops.add(a, c), a)), [("a", a), ("c", c)])
        check(lambda: ops.sum(ops.matmul(a, b)), [("a", a), ("b", b)])
        check(lambda: ops.mean(ops.reshape(ops.concat([a, a], axis=1), (4, 6))), [("a", a)])
        check(lambda: ops.sum(ops.power(ops.abs(ops.gather(a, idx)), 2)), [("a", a)])
        check(lambda: ops.sum(ops.power(ops.abs(ops.scatter_add(a, seg, 3)), 2)), [("a", a)])
        check(lambda: ops.sum(ops.power(ops.abs(ops.segment_mean(a, seg, 4)), 2)), [("a", a)])
        w = Value(rng.normal(size=(4, 3)))
        check(lambda: ops.sum(ops.mul(ops.segment_max(a, seg, 4), w)), [("a", a)])


def test_segment_max_tie_gradient_goes_to_lowest_index():
    a = Parameter(np.array([[2.0], [2.0], [1.0]]))
    out = ops.segment_max(a, np.array([0, 0, 0]), 1)
    ops.sum(out).backward()
    assert a.grad.ravel().tolist() == [1.0, 0.0, 0.0]


def test_empty_segment_is_zero():
    a = Parameter(np.ones((2, 2)))
    out = ops.segment_max(a, np.array([0, 0]), 3)
    assert out.data[1:].tolist() == [[0.0, 0.0], [0.0, 0.0]]


def test_batch_norm_gradient(rng):
    for _ in range(5):
        x = leaf(rng, 6, 3)
        g, b = leaf(rng, 3), leaf(rng, 3)
        w = Value(rng.normal(size=(6, 3)))
        check(lambda: ops.sum(ops.mul(ops.batch_norm(x, g, b)[0], w)), [("x", x), ("gamma", g), ("beta", b)])


def test_mlp_gradient(rng):
    for norm in ("none", "batch"):
        for _ in range(5):
            mlp = MLP(4, MlpSpec([6, 5], norm=norm), rng)
            x = leaf(rng, 7, 4)
            w = Value(rng.normal(size=(7, 5)))
            check(lambda: ops.sum(ops.mul(mlp(x), w)), [("x", x)] + mlp.named_parameters())


def test_shape_errors():
    with pytest.raises(ShapeError):
        ops.matmul(Value(np.ones((2, 3))), Value(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ops.add(Value(np.ones((2, 3))), Value(np.ones((4, 3))))
    with pytest.raises(ShapeError):
        Linear(3, 2, np.random.default_rng(0))(Value(np.ones((1, 4))))


def test_forward_dispatch_and_aliases():
    x = Value(np.array([[1.0, -2.0]]))
    assert forward("relu", x).data.tolist() == [[1.0, 0.0]]
    assert forward("mul-by-scalar", x, 2.0).data.tolist() == [[2.0, -4.0]]
    with pytest.raises(ValueError):
        forward("nope", x)


def test_leaf_gradients_accumulate_intermediates_reset():
    a = Parameter(np.array([1.0, 2.0]))
    y = ops.sum(ops.scale(a, 3.0))
    y.backward()
    y.backward()
    assert a.grad.tolist() == [6.0, 6.0]


def test_batchnorm_running_stats():
    bn = BatchNorm1d(2)
    x = Value(np.array([[1.0, 2.0], [3.0, 6.0]]))
    bn(x)
    np.testing.assert_allclose(bn.running_mean, [0.2, 0.4])
    np.testing.assert_allclose(bn.running_var, [0.9 + 0.1 * 2.0, 0.9 + 0.1 * 8.0])
    bn.eval()
    out = bn(x)
    np.testing.assert_allclose(out.data, (x.data - bn.running_mean) / np.sqrt(bn.running_var + 1e-5))


def test_adamw_matches_functional_step(rng):
    p = [Parameter(rng.normal(size=(3, 2))), Parameter(rng.normal(size=4))]
    ref = [q.data.copy() for q in p]
    opt = AdamW(p, lr=0.01)
    state = {}
    for _ in range(5):
        grads = [rng.normal(size=q.shape) for q in p]
        for q, g in zip(p, grads):
            q.grad = g.copy()
        opt.step()
        ref = sgd_adam_step(ref, grads, state, lr=0.01)
    for q, r in zip(p, ref):
        np.testing.assert_allclose(q.data, r, atol=1e-12)


def test_adamw_first_step_value():
    p = Parameter(np.array([1.0]))
    p.grad = np.array([0.5])
    AdamW([p], lr=0.1, weight_decay=0.0).step()
    assert p.data[0] == pytest.approx(0.9, abs=1e-6)  # bias-corrected first step moves by lr


def test_one_cycle_shape():
    lrs = [one_cycle_lr(s, 100, 1.0) for s in range(101)]
    assert lrs[0] == pytest.approx(0.1)
    assert max(lrs) == pytest.approx(1.0)
    assert lrs[-1] == pytest.approx(0.001)


def test_checkpoint_round_trip(tmp_path, rng):
    mlp = MLP(3, MlpSpec([4], norm="batch"), rng)
    mlp(Value(rng.normal(size=(5, 3))))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, mlp.state_dict(), {"note": "x"})
    tensors, meta = load_checkpoint(path)
    assert meta == {"note": "x"}
    other = MLP(3, MlpSpec([4], norm="batch"), np.random.default_rng(99))
    other.load_state_dict(tensors)
    for (k, a), (k2, b) in zip(sorted(mlp.state_dict().items()), sorted(other.state_dict().items())):
        assert k == k2
        np.testing.assert_array_equal(a, b)
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    with pytest.raises(KeyError):
        other.load_state_dict({})


def test_nested_containers_are_discovered(rng):
    class Holder(Module):
        def __init__(self):
            self.grid = [[Linear(2, 2, rng), Linear(2, 2, rng)], {"bn": BatchNorm1d(2)}]

    h = Holder()
    names = [n for n, _ in h.named_parameters()]
    assert names == ["grid.0.0.weight", "grid.0.0.bias", "grid.0.1.weight", "grid.0.1.bias",
                     "grid.1.bn.gamma", "grid.1.bn.beta"]
    assert [n for n, _ in h.named_buffers()] == ["grid.1.bn.running_mean", "grid.1.bn.running_var"]
    h.eval()
    assert not h.grid[1]["bn"].training and not h.grid[0][1].training
