"""Pure-Python boundary peeling (fallback for the compiled kernel)."""

import heapq
from functools import lru_cache

import numpy as np

from ._topology import OFFSETS, is_end, is_simple

_POW2 = (1 << np.arange(27, dtype=np.int64)).reshape(3, 3, 3)


@lru_cache(maxsize=None)
def _classify(key):
    nb = [(key >> i) & 1 for i in range(27)]
    return is_simple(nb), is_end(nb)


def peel(img, level, ridge, seeds):
    """Delete simple voxels of ``img`` in order of increasing ``level``.

    ``img`` (uint8, padded by at least one background voxel) is modified in
    place. ``level`` holds integer (quantised) distances and ``seeds`` the
    flat indices of the initial border voxels. Among equal levels, voxels
    with more object neighbours go first, so a thick run is thinned across
    before it can be eaten from its tip; remaining ties go by flat index.
    End points on the ridge are kept.
    """
    shape = img.shape
    flat = img.reshape(-1)
    lflat = level.reshape(-1)
    rflat = ridge.reshape(-1)
    sy, sz = shape[2], shape[1] * shape[2]
    nbr = [dz * sz + dy * sy + dx for dz, dy, dx in OFFSETS if (dz, dy, dx) != (0, 0, 0)]
    version = np.zeros(flat.shape[0], dtype=np.int64)

    def entry(i):
        count = sum(1 for o in nbr if flat[i + o])
        return (int(lflat[i]), -count, int(i), int(version[i]))

    heap = [entry(i) for i in seeds]
    heapq.heapify(heap)
    deleted = 0
    while heap:
        _, _, i, ver = heapq.heappop(heap)
        if ver != version[i] or not flat[i]:
            continue
        z, rem = divmod(i, sz)
        y, x = divmod(rem, sy)
        key = int((img[z - 1:z + 2, y - 1:y + 2, x - 1:x + 2] * _POW2).sum())
        simple, end = _classify(key)
        if not simple or (end and rflat[i]):
            continue
        flat[i] = 0
        deleted += 1
        for o in nbr:
            j = i + o
            if flat[j]:
                # refresh the key: the neighbour count just dropped
                version[j] += 1
                heapq.heappush(heap, entry(j))
    return deleted
