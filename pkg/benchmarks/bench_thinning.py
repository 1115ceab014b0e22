"""Compare the compiled and pure-Python thinning backends.

Times the boundary-peeling kernel alone and the full ``thin`` call (which
adds the shared distance-transform preprocessing) on phantom region masks,
and checks that both backends return identical skeletons.

    python3 benchmarks/bench_thinning.py [--edge 64] [--samples 5] [--repeat 3]
"""

import argparse
import time

import numpy as np
from maple import kernels
from maple.kernels import _thin_py
from maple.phantom import PhantomSpec, generate_volume


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--edge", type=int, default=64)
    ap.add_argument("--samples", type=int, default=5)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if kernels.BACKEND != "cython":
        raise SystemExit("compiled backend not available; build it with `pip install -e .`")
    from maple.kernels import _thin

    spec = PhantomSpec(volume_edge=args.edge)
    print(f"{'region':<12}{'voxels':>8}{'peel cy ms':>12}{'peel py ms':>12}{'speedup':>9}"
          f"{'thin cy ms':>12}{'thin py ms':>12}  same")
    totals = np.zeros(4)
    for s in range(args.samples):
        _, mask, _, _ = generate_volume(spec, s)
        for region in mask.region_names:
            m = mask.region(region)
            img, level, ridge, seeds = kernels.prepare(m)
            t_cy = _best(lambda: _thin.peel(img.copy(), level, ridge, seeds), args.repeat)
            t_py = _best(lambda: _thin_py.peel(img.copy(), level, ridge, seeds), args.repeat)
            f_cy = _best(lambda: kernels.thin(m, backend="cython"), args.repeat)
            f_py = _best(lambda: kernels.thin(m, backend="python"), args.repeat)
            same = np.array_equal(kernels.thin(m, backend="cython"), kernels.thin(m, backend="python"))
            totals += (t_cy, t_py, f_cy, f_py)
            print(f"{region:<12}{int(m.sum()):>8}{t_cy * 1e3:>12.2f}{t_py * 1e3:>12.2f}{t_py / t_cy:>8.1f}x"
                  f"{f_cy * 1e3:>12.2f}{f_py * 1e3:>12.2f}  {same}")
    print(f"{'total':<20}{totals[0] * 1e3:>12.1f}{totals[1] * 1e3:>12.1f}{totals[1] / totals[0]:>8.1f}x"
          f"{totals[2] * 1e3:>12.1f}{totals[3] * 1e3:>12.1f}")


if __name__ == "__main__":
    main()
