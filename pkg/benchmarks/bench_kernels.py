"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints median wall time per call for each kernel and backend, and checks the
two backends agree bitwise on every input.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from mirrordepth import _pykernels

try:
    from mirrordepth import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(rng):
    # decoder-sized im2col / col2im (toy and paper widths), and a 352x352 splat
    for c, hw, k, s in ((32, 8, 3, 1), (64, 22, 3, 1), (32, 22, 4, 4)):
        xp = rng.standard_normal((c, hw + 2, hw + 2)).astype(np.float32)
        ho = (hw + 2 - k) // s + 1
        yield f"im2col c={c} {hw + 2}px k={k} s={s}", "im2col", (xp, k, s, ho, ho)
        cols = rng.standard_normal((c * k * k, ho * ho)).astype(np.float32)
        yield f"col2im c={c} {hw + 2}px k={k} s={s}", "col2im", (cols, c, hw + 2, hw + 2, k, s, ho, ho)
    n = 352 * 352
    rows = rng.integers(0, 352, n).astype(np.int64)
    cols = rng.integers(0, 352, n).astype(np.int64)
    depth = rng.uniform(1, 80, n)
    yield "zbuffer_splat 352x352", "zbuffer_splat", (rows, cols, depth, 352, 352)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    backends = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    if _ckernels is None:
        print("compiled extension not built; timing the fallback only")
    print(f"{'kernel':<34s}" + "".join(f"{name:>12s}" for name, _ in backends) + "   speedup  equal")
    for label, fn, a in cases(rng):
        times, outs = [], []
        for _, mod in backends:
            f = getattr(mod, fn)
            outs.append(f(*a))
            t = timeit.repeat(lambda: f(*a), repeat=args.repeat, number=args.number)
            times.append(np.median(t) / args.number)
        speed = f"{times[0] / times[1]:8.1f}x" if len(times) > 1 else "       -"
        equal = all(np.array_equal(outs[0], o) for o in outs[1:])
        print(f"{label:<34s}" + "".join(f"{t * 1e6:10.1f}us" for t in times) + f"  {speed}  {equal}")


if __name__ == "__main__":
    main()
