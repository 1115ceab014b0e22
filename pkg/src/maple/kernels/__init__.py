"""Hot numerical kernels with a compiled backend and a pure-Python fallback.

The compiled extension (``_thin``, built from Cython) is used when it can be
imported. Setting ``MAPLE_PURE_PYTHON=1`` forces the fallback, which runs
the same algorithm on the same lookup tables and gives identical output.
"""

import os

import numpy as np
from scipy import ndimage

from . import _thin_py

BACKEND = "python"

if os.environ.get("MAPLE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _thin as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _thin_py
else:
    _impl = _thin_py

# margin around the mask; wider than the smoothing kernel so that results
# do not depend on where the array ends
_PAD = 4
_FACES = ndimage.generate_binary_structure(3, 1)
_LEVEL = 1e-6


def prepare(mask, sigma=0.7, tau=0.3, window=5):
    """Padded uint8 image, distance levels, ridge flags and seed indices for ``peel``."""
    mask = np.asarray(mask) != 0
    if mask.ndim != 3:
        raise ValueError(f"expected a 3D mask, got shape {mask.shape}")
    img = np.pad(mask, _PAD)
    dist = ndimage.distance_transform_edt(img)
    if sigma > 0:
        dist = ndimage.gaussian_filter(dist, sigma)
    ridge = img & (dist >= ndimage.maximum_filter(dist, size=window) - tau)
    border = img & ~ndimage.binary_erosion(img, _FACES)
    # quantise so that rounding noise in the smoothing does not decide ties
    level = np.rint(dist / _LEVEL).astype(np.int64)
    return (np.ascontiguousarray(img, dtype=np.uint8), level,
            np.ascontiguousarray(ridge, dtype=np.uint8), np.flatnonzero(border))


def thin(mask, sigma=0.7, tau=0.3, window=5, backend=None):
    """Thin a 3D binary mask to a curve skeleton, preserving topology.

    Border voxels are peeled in order of increasing (smoothed) distance to
    the background, and a voxel is only removed while it is simple for
    (26, 6) connectivity. Curve ends are kept when they lie on the medial
    ridge, i.e. within ``tau`` of the largest smoothed distance inside a
    ``window`` cube. This stops tips from retracting without growing spurs
    from surface bumps. Among voxels at the same distance, those with more
    object neighbours are peeled first.
    """
    impl = {"cython": _impl, "python": _thin_py, None: _impl}[backend]
    out, level, ridge, seeds = prepare(mask, sigma, tau, window)
    impl.peel(out, level, ridge, seeds)
    p = _PAD
    return out[p:-p, p:-p, p:-p].astype(bool)


__all__ = ["BACKEND", "prepare", "thin"]
