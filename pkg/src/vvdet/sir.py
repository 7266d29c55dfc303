"""Sparse Instance Recognition: an iterated grouped PointNet.

Each iteration runs an MLP on the point features, max-pools per group,
broadcasts the group feature back to its points and concatenates it with the
pre-pooling point features before a second MLP. The group features returned
at the end are max-pooled once more and not broadcast again.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vvdet.autodiff import ops
from vvdet.autodiff.nn import MLP, MlpSpec, Module
from vvdet.autodiff.value import Value


@dataclass
class GroupedPoints:
    feats: Value
    group_ids: np.ndarray
    coords: np.ndarray
    num_groups: int | None = None

    def __post_init__(self):
        self.group_ids = np.asarray(self.group_ids, dtype=np.int64)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        if self.num_groups is None:
            self.num_groups = int(self.group_ids.max()) + 1 if len(self.group_ids) else 0
        if not (len(self.group_ids) == len(self.coords) == self.feats.shape[0]):
            raise ValueError("feats, group ids and coords must have one row per point")


def group_means(coords, group_ids, num_groups):
    counts = np.bincount(group_ids, minlength=num_groups)
    sums = np.zeros((num_groups, 3))
    np.add.at(sums, group_ids, coords)
    return sums / np.maximum(counts, 1)[:, None]


class SIREncoder(Module):
    """``iterations`` rounds of (MLP -> group max -> broadcast/concat -> MLP).

    Input rows are ``[feats, coord - group mean]`` plus any caller-supplied
    extra geometric channels.
    """

    def __init__(self, in_dim, spec: MlpSpec, rng, iterations=2, extra_dim=0):
        if iterations < 1:
            raise ValueError("iterations must be >= 1")
        self.iterations = iterations
        self.pre = []
        self.post = []
        dim = in_dim + 3 + extra_dim
        for _ in range(iterations):
            a = MLP(dim, spec, rng)
            b = MLP(2 * a.out_dim, MlpSpec([spec.widths[-1]], spec.activation, spec.norm), rng)
            self.pre.append(a)
            self.post.append(b)
            dim = b.out_dim
        self.out_dim = dim

    def __call__(self, groups: GroupedPoints, extra: Value | None = None):
        g = groups.group_ids
        n_groups = groups.num_groups
        centered = groups.coords - group_means(groups.coords, g, n_groups)[g]
        parts = [groups.feats, Value(centered)]
        if extra is not None:
            parts.append(extra)
        x = ops.concat(parts, axis=1)
        for a, b in zip(self.pre, self.post):
            h = a(x)
            pooled = ops.segment_max(h, g, n_groups)
            x = b(ops.concat([h, ops.gather(pooled, g)], axis=1))
        return ops.segment_max(x, g, n_groups), x


def sir_encode(groups: GroupedPoints, encoder: SIREncoder, extra=None):
    """Group features ``[G, C_out]`` and final point features."""
    return encoder(groups, extra)
