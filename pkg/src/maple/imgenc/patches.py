"""Patch extraction around centerline points and patch augmentation."""

from __future__ import annotations

import math

import numpy as np

from ..core import ContractError, Patch


def crop(volume, center, p_size):
    """Cube of edge ``p_size`` around ``center``, zero outside the volume.

    The centre voxel sits at index ``p_size // 2`` along every axis.
    """
    data = np.asarray(volume) if isinstance(volume, np.ndarray) else np.asarray(volume.data)
    out = np.zeros((p_size,) * 3, dtype=np.float32)
    lo = [int(c) - p_size // 2 for c in center]
    src, dst = [], []
    for ax in range(3):
        a, b = max(lo[ax], 0), min(lo[ax] + p_size, data.shape[ax])
        if a >= b:
            return out
        src.append(slice(a, b))
        dst.append(slice(a - lo[ax], b - lo[ax]))
    out[tuple(dst)] = data[tuple(src)]
    return out


def sample_patches(volume, skeleton, p_size, stride=None):
    """One patch every ``stride`` points along each path, starting at index 0."""
    if p_size < 1:
        raise ContractError("p_size must be >= 1")
    stride = max(1, p_size // 2) if stride is None else int(stride)
    if stride < 1:
        raise ContractError("stride must be >= 1")
    if len(skeleton) == 0:
        raise ContractError("empty skeleton")
    patches = []
    for path in skeleton.paths:
        for p in path[::stride]:
            patches.append(Patch(crop(volume, p, p_size), skeleton.region, tuple(p)))
    return patches


def expected_count(skeleton, stride):
    return sum(math.ceil(len(p) / stride) for p in skeleton.paths)


def grid_points(region_mask, spacing):
    """Mask voxels on a regular lattice with the given spacing.

    The lattice is anchored at the mask's bounding box, offset by half a
    spacing, so sampling does not depend on where the mask sits.
    """
    if spacing < 1:
        raise ContractError("grid spacing must be >= 1")
    idx = np.argwhere(region_mask)
    if len(idx) == 0:
        raise ContractError("empty region")
    lo = idx.min(axis=0) + spacing // 2
    on = np.all((idx - lo) % spacing == 0, axis=1)
    pts = idx[on]
    if len(pts) == 0:
        # a mask thinner than the lattice: fall back to its centroid-nearest voxel
        c = idx.mean(axis=0)
        pts = idx[[np.argmin(((idx - c) ** 2).sum(1))]]
    return pts


def sample_grid_patches(volume, mask, region, p_size, spacing=None):
    """Patches centred on lattice points inside a region (non-tubular shapes)."""
    spacing = max(1, p_size // 2) if spacing is None else int(spacing)
    grid = mask.region(region) if hasattr(mask, "region") else np.asarray(mask, dtype=bool)
    return [Patch(crop(volume, p, p_size), region, tuple(p)) for p in grid_points(grid, spacing)]


TRANSFORMS = ("flip0", "flip1", "flip2", "rot90", "rot180", "rot270")
_PAIRS = ((0, 1), (0, 2), (1, 2))


def apply_transform(data, name, axes=(0, 1)):
    if name.startswith("flip"):
        return np.flip(data, axis=int(name[-1]))
    k = {"rot90": 1, "rot180": 2, "rot270": 3}[name]
    return np.rot90(data, k=k, axes=axes)


def augment_patch(patch, rng, p=0.5):
    """With probability ``p`` flip along one axis or rotate in one axis pair."""
    if rng.random() >= p:
        return patch
    name = TRANSFORMS[int(rng.integers(len(TRANSFORMS)))]
    axes = _PAIRS[int(rng.integers(len(_PAIRS)))]
    out = np.ascontiguousarray(apply_transform(patch.data, name, axes))
    return Patch(out, patch.region, patch.center)
