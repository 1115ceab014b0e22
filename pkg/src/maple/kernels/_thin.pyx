# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled boundary peeling kernel, mirroring ``_thin_py.peel``."""

import numpy as np
cimport numpy as cnp

from ._topology import ADJ26, ADJ6_N18, FACE_NEIGHBORS, OFFSETS

cnp.import_array()

cdef int _adj26[27][26]
cdef int _n_adj26[27]
cdef unsigned char _is_adj[27][27]
cdef int _adj6[27][6]
cdef int _n_adj6[27]
cdef int _face[6]
cdef int _off[27][3]


def _init_tables():
    cdef int i, j, k
    for i in range(27):
        for j in range(27):
            _is_adj[i][j] = 0
        _n_adj26[i] = len(ADJ26[i])
        for k in range(_n_adj26[i]):
            _adj26[i][k] = ADJ26[i][k]
            _is_adj[i][ADJ26[i][k]] = 1
        _n_adj6[i] = len(ADJ6_N18[i])
        for k in range(_n_adj6[i]):
            _adj6[i][k] = ADJ6_N18[i][k]
        for k in range(3):
            _off[i][k] = OFFSETS[i][k]
    for i in range(6):
        _face[i] = FACE_NEIGHBORS[i]


_init_tables()


cdef bint _simple(unsigned char* nb) noexcept nogil:
    cdef int stack[27]
    cdef unsigned char seen[27]
    cdef int top, i, j, k, m, f, first = -1, n_obj = 0, n_seen, components
    for i in range(27):
        seen[i] = 0
        if i != 13 and nb[i]:
            n_obj += 1
            if first < 0:
                first = i
    if n_obj == 0:
        return False
    seen[first] = 1
    n_seen = 1
    stack[0] = first
    top = 1
    while top > 0:
        top -= 1
        i = stack[top]
        for k in range(_n_adj26[i]):
            j = _adj26[i][k]
            if nb[j] and not seen[j]:
                seen[j] = 1
                n_seen += 1
                stack[top] = j
                top += 1
    if n_seen != n_obj:
        return False

    for i in range(27):
        seen[i] = 0
    components = 0
    for k in range(6):
        f = _face[k]
        if nb[f] or seen[f]:
            continue
        components += 1
        if components > 1:
            return False
        seen[f] = 1
        stack[0] = f
        top = 1
        while top > 0:
            top -= 1
            i = stack[top]
            for m in range(_n_adj6[i]):
                j = _adj6[i][m]
                if not nb[j] and not seen[j]:
                    seen[j] = 1
                    stack[top] = j
                    top += 1
    return components == 1


cdef bint _end(unsigned char* nb) noexcept nogil:
    cdef int obj[3]
    cdef int i, a, b, n = 0
    for i in range(27):
        if i != 13 and nb[i]:
            if n == 3:
                return False
            obj[n] = i
            n += 1
    if n <= 1:
        return True
    for a in range(n):
        for b in range(a + 1, n):
            if not _is_adj[obj[a]][obj[b]]:
                return False
    return True


# binary min-heap on (level, -neighbour count, index, version)
cdef struct Entry:
    long long level
    int neg
    Py_ssize_t idx
    int ver


cdef inline bint _less(Entry* h, Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    if h[a].level != h[b].level:
        return h[a].level < h[b].level
    if h[a].neg != h[b].neg:
        return h[a].neg < h[b].neg
    if h[a].idx != h[b].idx:
        return h[a].idx < h[b].idx
    return h[a].ver < h[b].ver


cdef inline void _swap(Entry* h, Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    cdef Entry t = h[a]
    h[a] = h[b]
    h[b] = t


cdef void _push(Entry* h, Py_ssize_t* n, long long level, int neg, Py_ssize_t idx, int ver) noexcept nogil:
    cdef Py_ssize_t c = n[0], p
    h[c].level = level
    h[c].neg = neg
    h[c].idx = idx
    h[c].ver = ver
    n[0] += 1
    while c > 0:
        p = (c - 1) // 2
        if not _less(h, c, p):
            break
        _swap(h, c, p)
        c = p


cdef Entry _pop(Entry* h, Py_ssize_t* n) noexcept nogil:
    cdef Entry top = h[0]
    cdef Py_ssize_t c = 0, l, r, s
    n[0] -= 1
    h[0] = h[n[0]]
    while True:
        l = 2 * c + 1
        r = l + 1
        s = c
        if l < n[0] and _less(h, l, s):
            s = l
        if r < n[0] and _less(h, r, s):
            s = r
        if s == c:
            break
        _swap(h, c, s)
        c = s
    return top


cdef inline int _count(unsigned char[::1] img, Py_ssize_t i, Py_ssize_t* nbr) noexcept nogil:
    cdef int k, c = 0
    for k in range(27):
        if k != 13 and img[i + nbr[k]]:
            c += 1
    return c


def is_simple(nb):
    """Simple-point test on a 27-element neighbourhood (for cross-checks)."""
    cdef unsigned char buf[27]
    cdef int i
    for i in range(27):
        buf[i] = 1 if nb[i] else 0
    return bool(_simple(buf))


def is_end(nb):
    cdef unsigned char buf[27]
    cdef int i
    for i in range(27):
        buf[i] = 1 if nb[i] else 0
    return bool(_end(buf))


def peel(cnp.ndarray img_arr, cnp.ndarray level_arr, cnp.ndarray ridge_arr, seeds):
    """Delete simple voxels in order of increasing level (see ``_thin_py.peel``)."""
    cdef unsigned char[::1] img = img_arr.reshape(-1)
    cdef long long[::1] level = np.ascontiguousarray(level_arr, dtype=np.int64).reshape(-1)
    cdef unsigned char[::1] ridge = np.ascontiguousarray(ridge_arr, dtype=np.uint8).reshape(-1)
    cdef Py_ssize_t[::1] seed = np.ascontiguousarray(seeds, dtype=np.intp)
    cdef Py_ssize_t n_vox = img.shape[0]
    cdef Py_ssize_t sy = img_arr.shape[2], sz = img_arr.shape[1] * img_arr.shape[2]
    cdef int[::1] version = np.zeros(n_vox, dtype=np.intc)
    # every deletion pushes at most 26 entries
    cdef Py_ssize_t cap = seed.shape[0] + 26 * int(np.count_nonzero(img_arr)) + 1
    cdef cnp.ndarray heap_arr = np.zeros(cap * sizeof(Entry), dtype=np.uint8)
    cdef Entry* heap = <Entry*> cnp.PyArray_DATA(heap_arr)
    cdef Py_ssize_t nbr[27]
    cdef unsigned char nb[27]
    cdef Py_ssize_t n = 0, i, j, k, deleted = 0
    cdef Entry e
    for k in range(27):
        nbr[k] = _off[k][0] * sz + _off[k][1] * sy + _off[k][2]

    with nogil:
        for k in range(seed.shape[0]):
            i = seed[k]
            _push(heap, &n, level[i], -_count(img, i, nbr), i, version[i])
        while n > 0:
            e = _pop(heap, &n)
            i = e.idx
            if e.ver != version[i] or not img[i]:
                continue
            for k in range(27):
                nb[k] = img[i + nbr[k]]
            if not _simple(nb) or (ridge[i] and _end(nb)):
                continue
            img[i] = 0
            deleted += 1
            for k in range(27):
                j = i + nbr[k]
                if k != 13 and img[j]:
                    version[j] += 1
                    _push(heap, &n, level[j], -_count(img, j, nbr), j, version[j])
    return deleted
