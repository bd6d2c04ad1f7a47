"""Geometric kernels for hierarchy construction.

Farthest point sampling plus query-ball and k-NN grouping.  All distance
work happens in double precision so tie-breaking is stable, and every rule
(seeding, tie order, padding) is pinned down so results are reproducible
and, for generic inputs, invariant to input point permutation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Neighborhood:
    """One center with its K grouped member indices at one scale."""
    center: int
    members: np.ndarray  # (K,) point indices; slot 0 is the center
    scale: int


@dataclass(frozen=True)
class NeighborhoodSet:
    """Grouping result for all centers at one scale."""
    centers: np.ndarray  # (S,)
    members: np.ndarray  # (S, K)
    scale: int
    radius: float | None  # None for k-NN groupings

    def __len__(self) -> int:
        return len(self.centers)

    def __iter__(self):
        for c, m in zip(self.centers, self.members):
            yield Neighborhood(int(c), m, self.scale)


@dataclass(frozen=True)
class GroupingSpec:
    """Per-scale (radius, K) in normalized units; radii strictly increasing."""
    radii: tuple[float, ...]
    ks: tuple[int, ...]

    def __post_init__(self):
        if len(self.radii) != len(self.ks) or not self.radii:
            raise ValueError("grouping spec needs matching, nonempty radii and K lists")
        if any(r <= 0 for r in self.radii) or any(k < 1 for k in self.ks):
            raise ValueError("radii must be positive and K values >= 1")
        if any(b <= a for a, b in zip(self.radii, self.radii[1:])):
            raise ValueError(f"radii must be strictly increasing, got {self.radii}")

    @property
    def num_scales(self) -> int:
        return len(self.radii)

    def middle_scale(self) -> "GroupingSpec":
        mid = len(self.radii) // 2
        return GroupingSpec((self.radii[mid],), (self.ks[mid],))


def _pairwise_sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # (len(a), len(b)) squared distances, double precision
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def farthest_point_sample(positions: np.ndarray, s: int) -> np.ndarray:
    """Greedy farthest point sampling; returns S indices in selection order.

    The first pick is the point farthest from the centroid (ties broken by
    lexicographically smallest coordinate triple, then lowest index); each
    later pick maximizes the minimum distance to the chosen set (ties to the
    lowest index).
    """
    pos = np.asarray(positions, dtype=np.float64)
    n = len(pos)
    if not 1 <= s <= n:
        raise ValueError(f"sample count {s} outside [1, {n}]")

    centroid = pos.mean(axis=0)
    d2 = ((pos - centroid) ** 2).sum(axis=1)
    cand = np.flatnonzero(d2 == d2.max())
    if len(cand) > 1:
        # lexsort is stable, so equal triples keep ascending index order
        order = np.lexsort((pos[cand, 2], pos[cand, 1], pos[cand, 0]))
        first = int(cand[order[0]])
    else:
        first = int(cand[0])

    selected = np.empty(s, dtype=np.int64)
    selected[0] = first
    min_d2 = ((pos - pos[first]) ** 2).sum(axis=1)
    min_d2[first] = -1.0  # selected points can never win again
    for i in range(1, s):
        nxt = int(np.argmax(min_d2))  # argmax takes the lowest index on ties
        selected[i] = nxt
        nd2 = ((pos - pos[nxt]) ** 2).sum(axis=1)
        np.minimum(min_d2, nd2, out=min_d2)
        min_d2[nxt] = -1.0
    return selected


def ball_query(
    positions: np.ndarray,
    center_indices: np.ndarray,
    radius: float,
    k: int,
    scale: int = 0,
) -> NeighborhoodSet:
    """Group up to K points within `radius` of each center.

    Members are collected in index order with the center forced into slot 0;
    underfull neighborhoods pad by repeating the first non-center member
    (or the center itself when it is alone in the ball).
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    pos = np.asarray(positions, dtype=np.float64)
    centers = np.asarray(center_indices, dtype=np.int64)
    d2 = _pairwise_sq_dist(pos[centers], pos)
    r2 = float(radius) * float(radius)

    members = np.empty((len(centers), k), dtype=np.int64)
    for row, c in enumerate(centers):
        in_ball = np.flatnonzero(d2[row] <= r2)
        picked = [int(c)]
        for j in in_ball:
            if len(picked) == k:
                break
            if j != c:
                picked.append(int(j))
        pad = picked[1] if len(picked) > 1 else picked[0]
        picked.extend([pad] * (k - len(picked)))
        members[row] = picked
    return NeighborhoodSet(centers, members, scale, float(radius))


def knn_query(
    positions: np.ndarray,
    center_indices: np.ndarray,
    k: int,
    scale: int = 0,
) -> NeighborhoodSet:
    """K nearest neighbors per center (ties to the lowest index), center first."""
    pos = np.asarray(positions, dtype=np.float64)
    n = len(pos)
    if k > n:
        raise ValueError(f"K={k} exceeds point count {n}")
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    centers = np.asarray(center_indices, dtype=np.int64)
    d2 = _pairwise_sq_dist(pos[centers], pos)

    members = np.empty((len(centers), k), dtype=np.int64)
    for row, c in enumerate(centers):
        order = np.argsort(d2[row], kind="stable")
        picked = [int(c)]
        for j in order:
            if len(picked) == k:
                break
            if j != c:
                picked.append(int(j))
        members[row] = picked
    return NeighborhoodSet(centers, members, scale, None)
