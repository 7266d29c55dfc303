import numpy as np
import pytest

from helpers import assert_grads, jitter_biases, probe_loss
from vvdet.autodiff import MlpSpec, Parameter, Value
from vvdet.sir import GroupedPoints, SIREncoder, group_means, sir_encode


def make_groups(rng, n=30, g=4, c=5):
    ids = np.sort(rng.integers(0, g, size=n))
    ids[:g] = np.arange(g)
    return GroupedPoints(Value(rng.normal(size=(n, c))), ids, rng.normal(size=(n, 3)), g)


def encoder(rng, c=5, iterations=2):
    return SIREncoder(c, MlpSpec([6, 4]), rng, iterations=iterations)


def test_singleton_group_is_mlp_chain(rng):
    enc = encoder(rng, iterations=1)
    x = rng.normal(size=(1, 5))
    feats, _ = sir_encode(GroupedPoints(Value(x), [0], [[1.0, 2.0, 3.0]]), enc)
    h = enc.pre[0](Value(np.c_[x, np.zeros((1, 3))]))
    ref = enc.post[0](Value(np.c_[h.data, h.data]))
    np.testing.assert_allclose(feats.data, ref.data, atol=1e-12)


def test_permutation_invariance(rng):
    groups = make_groups(rng)
    enc = encoder(rng)
    base, _ = enc(groups)
    perm = rng.permutation(len(groups.group_ids))
    shuffled = GroupedPoints(Value(groups.feats.data[perm]), groups.group_ids[perm], groups.coords[perm], 4)
    again, _ = enc(shuffled)
    np.testing.assert_allclose(again.data, base.data, rtol=0, atol=1e-12)


def test_duplicate_point_leaves_group_feature_unchanged(rng):
    coords = np.array([[0.0, 0, 0], [1.0, 1, 1], [2.0, 0, 0]])
    feats = rng.normal(size=(3, 5))
    enc = encoder(rng)
    base, _ = enc(GroupedPoints(Value(feats), [0, 0, 1], coords))
    # duplicating a point shifts the group mean, so duplicate the whole group symmetrically
    dup, _ = enc(GroupedPoints(Value(np.r_[feats[:2], feats[:2], feats[2:]]), [0, 0, 0, 0, 1],
                               np.r_[coords[:2], coords[:2], coords[2:]]))
    np.testing.assert_allclose(dup.data, base.data, atol=1e-12)


def test_group_features_depend_only_on_own_points(rng):
    groups = make_groups(rng)
    enc = encoder(rng)
    base, _ = enc(groups)
    feats = groups.feats.data.copy()
    coords = groups.coords.copy()
    other = groups.group_ids == 2
    feats[other] = 0.0
    coords[other] = 7.0
    changed, _ = enc(GroupedPoints(Value(feats), groups.group_ids, coords, 4))
    keep = [0, 1, 3]
    np.testing.assert_array_equal(changed.data[keep], base.data[keep])


def test_empty_group_gives_zero_row(rng):
    enc = encoder(rng)
    feats, _ = enc(GroupedPoints(Value(rng.normal(size=(2, 5))), [0, 2], rng.normal(size=(2, 3)), 3))
    assert np.all(feats.data[1] == 0.0)


def test_group_means():
    m = group_means(np.array([[0.0, 0, 0], [2.0, 0, 0], [5.0, 5, 5]]), np.array([0, 0, 1]), 2)
    assert m.tolist() == [[1.0, 0, 0], [5.0, 5, 5]]


def test_validation():
    with pytest.raises(ValueError):
        SIREncoder(3, MlpSpec([4]), np.random.default_rng(0), iterations=0)
    with pytest.raises(ValueError):
        GroupedPoints(Value(np.zeros((2, 3))), [0], np.zeros((2, 3)))


@pytest.mark.parametrize("norm", ["none", "batch"])
def test_sir_gradients_two_iterations(norm):
    for trial in range(5):
        rng = np.random.default_rng(trial)
        groups = make_groups(rng, n=12, g=3, c=3)
        enc = SIREncoder(3, MlpSpec([4, 3], norm=norm), rng, iterations=2, extra_dim=2)
        jitter_biases(enc, rng)
        x = Parameter(groups.feats.data)
        extra = Parameter(rng.normal(size=(12, 2)))
        g = GroupedPoints(x, groups.group_ids, groups.coords, 3)
        loss = probe_loss(lambda: enc(g, extra)[0], (3, 3), rng)
        assert_grads(loss, [("x", x), ("extra", extra)] + enc.named_parameters())
