"""Virtual voxelization over real points plus voted centres, and the voxel encoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vvdet.autodiff import ops
from vvdet.autodiff.nn import MlpSpec, Module
from vvdet.autodiff.value import Value
from vvdet.geom import PointCloud, VoxelGridSpec, voxel_coords
from vvdet.segvote import VoteOutput
from vvdet.sir import GroupedPoints, SIREncoder
from vvdet.sparse.ops import SparseFeatureMap, unique_coords


@dataclass
class VirtualVoxelSet:
    """Stride-1 voxels over the union of real points and votes.

    Members are ordered real points first (member ``i`` is point ``i``), then
    votes in ``VoteOutput.source_index`` order. ``member_source`` is the real
    point a member copies its features from.
    """

    coords: np.ndarray
    is_virtual: np.ndarray
    member_voxel: np.ndarray
    member_is_vote: np.ndarray
    member_source: np.ndarray
    member_pos: np.ndarray
    member_fg: np.ndarray
    spec: VoxelGridSpec
    weighted_centroid: np.ndarray | None = None

    def __len__(self):
        return len(self.coords)

    @property
    def num_virtual(self):
        return int(self.is_virtual.sum())

    @property
    def num_members(self):
        return len(self.member_voxel)

    def geometric_centers(self):
        return self.spec.voxel_centers(self.coords)

    def members_of(self, v):
        return np.flatnonzero(self.member_voxel == v)

    def recompute_kind(self):
        flag = np.zeros(len(self.coords), dtype=bool)
        flag[self.member_voxel[self.member_is_vote]] = True
        return flag


def weighted_centroids(member_voxel, member_pos, member_fg, num_voxels, alpha):
    """Foreground-weighted member mean per voxel; background members weigh ``alpha``.

    A voxel whose weights sum to zero (all background with ``alpha = 0``) falls
    back to the plain member mean.
    """
    w = np.where(member_fg, 1.0, float(alpha))
    wsum = np.bincount(member_voxel, weights=w, minlength=num_voxels)
    plain_n = np.bincount(member_voxel, minlength=num_voxels).astype(np.float64)
    out = np.zeros((num_voxels, 3))
    plain = np.zeros((num_voxels, 3))
    for d in range(3):
        out[:, d] = np.bincount(member_voxel, weights=w * member_pos[:, d], minlength=num_voxels)
        plain[:, d] = np.bincount(member_voxel, weights=member_pos[:, d], minlength=num_voxels)
    plain /= np.maximum(plain_n, 1.0)[:, None]
    ok = wsum > 0
    out[ok] /= wsum[ok, None]
    out[~ok] = plain[~ok]
    return out


def virtual_voxelize(points: PointCloud, votes: VoteOutput | None, spec: VoxelGridSpec, alpha=0.5,
                     point_fg=None):
    """Voxelize the union; a voxel is virtual iff it holds at least one vote.

    ``point_fg`` flags real points as foreground for the weighted centroid
    (defaults to the vote mask, i.e. predicted foreground).
    """
    if spec.stride != 1:
        raise ValueError("virtual voxelization works on the stride-1 grid")
    n = len(points)
    if votes is not None:
        src = votes.source_index
        vpos = votes.voted_centers
    else:
        src = np.zeros(0, dtype=np.int64)
        vpos = np.zeros((0, 3))
    pos = np.concatenate([points.xyz, vpos], axis=0)
    is_vote = np.r_[np.zeros(n, dtype=bool), np.ones(len(src), dtype=bool)]
    source = np.r_[np.arange(n), src].astype(np.int64)
    if point_fg is None:
        point_fg = votes.fg_mask if votes is not None else np.zeros(n, dtype=bool)
    fg = np.r_[np.asarray(point_fg, dtype=bool), np.ones(len(src), dtype=bool)]
    coords, inverse = unique_coords(voxel_coords(pos, spec))
    is_virtual = np.zeros(len(coords), dtype=bool)
    is_virtual[inverse[is_vote]] = True
    vset = VirtualVoxelSet(coords, is_virtual, inverse, is_vote, source, pos, fg, spec)
    vset.weighted_centroid = weighted_centroids(inverse, pos, fg, len(coords), alpha)
    return vset


def voxel_counts(points_xyz, votes: VoteOutput | None, spec: VoxelGridSpec):
    """(voxels holding scan points, voxels after adding the voted centres)."""
    xyz = np.asarray(points_xyz, dtype=np.float64)
    real = unique_coords(voxel_coords(xyz, spec))[0]
    if votes is None or len(votes.source_index) == 0:
        return len(real), len(real)
    both = unique_coords(voxel_coords(np.concatenate([xyz, votes.voted_centers]), spec))[0]
    return len(real), len(both)


def init_member_features(vset: VirtualVoxelSet, point_feats: Value, votes: VoteOutput | None,
                         zero_vote_feats=False):
    """Backbone feature of each member's source point with a 3-channel offset appended.

    Votes carry their (scaled) voting offset; real points carry zeros.
    ``zero_vote_feats`` blanks the copied features of votes (encoder ablation).
    """
    n_points = point_feats.shape[0]
    src = vset.member_source
    if len(src) and (src.min() < 0 or src.max() >= n_points):
        raise IndexError("vote source index does not reference a real point")
    base = ops.gather(point_feats, src)
    if zero_vote_feats:
        base = ops.mul(base, Value((~vset.member_is_vote).astype(np.float64)[:, None]))
    if votes is None or not vset.member_is_vote.any():
        offset = Value(np.zeros((len(src), 3)))
    else:
        mask = vset.member_is_vote.astype(np.float64)[:, None] * votes.scale
        offset = ops.mul(ops.gather(votes.offsets, src), Value(mask))
    return ops.concat([base, offset], axis=1)


def vote_means(vset: VirtualVoxelSet):
    """Mean vote position per voxel; the geometric centre where a voxel holds no vote."""
    out = vset.geometric_centers()
    idx = vset.member_voxel[vset.member_is_vote]
    if len(idx):
        count = np.bincount(idx, minlength=len(vset)).astype(float)
        total = np.zeros_like(out)
        np.add.at(total, idx, vset.member_pos[vset.member_is_vote])
        has = count > 0
        out[has] = total[has] / count[has, None]
    return out


class VirtualVoxelEncoder(Module):
    """SIR applied per voxel, over virtual and real voxels alike.

    Each member also sees its own position, its voxel's weighted centroid and
    the mean of the votes in its voxel, all relative to the voxel's geometric
    centre and in cell units, so the encoded feature can localise within the
    cell. The last two are shared by all members and survive max-pooling.
    A voxel without votes uses its geometric centre as the vote mean.
    """

    def __init__(self, in_dim, spec: MlpSpec, rng, iterations=2):
        self.sir = SIREncoder(in_dim, spec, rng, iterations=iterations, extra_dim=9)
        self.out_dim = self.sir.out_dim

    def __call__(self, vset: VirtualVoxelSet, member_feats: Value):
        centers = vset.geometric_centers()
        scale = np.asarray(vset.spec.cell_size)
        rel = (vset.member_pos - centers[vset.member_voxel]) / scale
        centroid = vset.weighted_centroid
        if centroid is None:
            centroid = centers
        rel_centroid = ((centroid - centers) / scale)[vset.member_voxel]
        rel_votes = (vote_means(vset) - centers) / scale
        extra = np.concatenate([rel, rel_centroid, rel_votes[vset.member_voxel]], axis=1)
        groups = GroupedPoints(member_feats, vset.member_voxel, vset.member_pos, len(vset))
        feats, _ = self.sir(groups, Value(extra))
        return SparseFeatureMap(vset.coords, feats, 1, vset.spec, vset.is_virtual.copy())


def vve_encode(vset: VirtualVoxelSet, member_feats: Value, encoder: VirtualVoxelEncoder):
    return encoder(vset, member_feats)
