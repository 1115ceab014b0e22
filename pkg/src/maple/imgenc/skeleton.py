"""Centerline extraction: thinning followed by ordering into voxel paths."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from ..core import ContractError
from ..kernels import thin

_OFFSETS = [
    (dz, dy, dx)
    for dz in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dx in (-1, 0, 1)
    if (dz, dy, dx) != (0, 0, 0)
]


@dataclass(frozen=True)
class Skeleton:
    """Ordered voxel paths; consecutive points of a path are 26-adjacent."""

    paths: tuple
    region: str

    def __post_init__(self):
        paths = tuple(np.asarray(p, dtype=np.int64).reshape(-1, 3) for p in self.paths)
        for p in paths:
            if len(p) > 1 and np.abs(np.diff(p, axis=0)).max() > 1:
                raise ContractError("consecutive skeleton points must be 26-adjacent")
        object.__setattr__(self, "paths", paths)

    @property
    def points(self):
        if not self.paths:
            return np.zeros((0, 3), dtype=np.int64)
        return np.concatenate(self.paths)

    def __len__(self):
        return sum(len(p) for p in self.paths)


def _bfs(start, nodes):
    """Distances and parents from ``start`` over a 26-connected voxel set."""
    dist = {start: 0}
    parent = {start: None}
    queue = deque([start])
    while queue:
        v = queue.popleft()
        for o in _OFFSETS:
            w = (v[0] + o[0], v[1] + o[1], v[2] + o[2])
            if w in nodes and w not in dist:
                dist[w] = dist[v] + 1
                parent[w] = v
                queue.append(w)
    return dist, parent


def _farthest(dist):
    best = max(dist.values())
    return min(v for v, d in dist.items() if d == best)


def order_paths(points):
    """Split a voxel set into 26-connected paths.

    Each component is covered greedily: take its longest shortest path
    (two breadth-first sweeps), remove it, and repeat on the remainder.
    The result depends only on the point set, not on its order.
    """
    remaining = set(map(tuple, np.asarray(points, dtype=np.int64).tolist()))
    paths = []
    while remaining:
        seed = min(remaining)
        component, _ = _bfs(seed, remaining)
        a = _farthest(component)
        dist, parent = _bfs(a, remaining)
        b = _farthest(dist)
        path = [b]
        while parent[path[-1]] is not None:
            path.append(parent[path[-1]])
        path.reverse()
        # orient each path from its lexicographically smaller end
        if path[-1] < path[0]:
            path.reverse()
        paths.append(np.array(path, dtype=np.int64))
        remaining.difference_update(path)
    paths.sort(key=lambda p: (-len(p), tuple(p[0])))
    return tuple(paths)


def extract_skeleton(mask, region, **thin_kw):
    """Centerline of one region of a :class:`RegionMask` (or a boolean grid)."""
    grid = mask.region(region) if hasattr(mask, "region") else np.asarray(mask, dtype=bool)
    if grid.ndim != 3:
        raise ContractError("mask must be 3D")
    if not grid.any():
        raise ContractError(f"region {region!r} is empty")
    sk = thin(grid, **thin_kw)
    return Skeleton(order_paths(np.argwhere(sk)), region)
