"""Lookup tables for 3x3x3 neighbourhood topology.

Neighbourhood positions are indexed ``(dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)``
so the centre voxel sits at index 13. Both thinning backends share these
tables, which keeps them bit-for-bit equivalent.
"""

CENTER = 13

OFFSETS = [
    (dz, dy, dx) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
]


def _l1(o):
    return abs(o[0]) + abs(o[1]) + abs(o[2])


FACE_NEIGHBORS = [i for i, o in enumerate(OFFSETS) if _l1(o) == 1]
N18 = [i for i, o in enumerate(OFFSETS) if i != CENTER and _l1(o) <= 2]

# 26-adjacency between non-centre positions of the cube
ADJ26 = [
    [
        j
        for j, q in enumerate(OFFSETS)
        if j != i and j != CENTER and max(abs(p[k] - q[k]) for k in range(3)) <= 1
    ]
    if i != CENTER
    else []
    for i, p in enumerate(OFFSETS)
]

# 6-adjacency restricted to the 18-neighbourhood
_n18 = set(N18)
ADJ6_N18 = [
    [j for j in N18 if sum(abs(p[k] - OFFSETS[j][k]) for k in range(3)) == 1]
    if i in _n18
    else []
    for i, p in enumerate(OFFSETS)
]


def is_end(nb):
    """Curve end point, allowing a tip up to three voxels thick.

    True for at most one object neighbour, or for two or three neighbours
    that are pairwise 26-adjacent (a blunt tip rather than a path through).
    """
    obj = [i for i in range(27) if i != CENTER and nb[i]]
    if len(obj) <= 1:
        return True
    if len(obj) > 3:
        return False
    return all(j in ADJ26[i] for k, i in enumerate(obj) for j in obj[k + 1:])


def is_simple(nb):
    """Return True when the centre of a 27-element neighbourhood is simple.

    A voxel is simple for (26, 6) connectivity iff its object neighbours form
    exactly one 26-component and the background voxels of its 18-neighbourhood
    form exactly one 6-component touching the centre.
    """
    obj = [i for i in range(27) if i != CENTER and nb[i]]
    if not obj:
        return False
    seen = {obj[0]}
    stack = [obj[0]]
    while stack:
        i = stack.pop()
        for j in ADJ26[i]:
            if nb[j] and j not in seen:
                seen.add(j)
                stack.append(j)
    if len(seen) != len(obj):
        return False

    components = 0
    seen = set()
    for f in FACE_NEIGHBORS:
        if nb[f] or f in seen:
            continue
        components += 1
        if components > 1:
            return False
        seen.add(f)
        stack = [f]
        while stack:
            i = stack.pop()
            for j in ADJ6_N18[i]:
                if not nb[j] and j not in seen:
                    seen.add(j)
                    stack.append(j)
    return components == 1
