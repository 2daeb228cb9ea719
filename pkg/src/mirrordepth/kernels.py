"""Backend selection for the hot loops.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is imported. Setting ``MIRRORDEPTH_PURE_PYTHON=1`` forces the
fallback even when the extension exists. Both backends produce bitwise-equal
results.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("MIRRORDEPTH_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels


def im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Unfold ``(C, Hp, Wp)`` into ``(C*k*k, ho*wo)`` sliding-window columns."""
    return _impl.im2col(np.ascontiguousarray(xp), k, s, ho, wo)


def col2im(cols, c_n, hp, wp, k, s, ho, wo) -> np.ndarray:
    """Scatter-add columns back onto a ``(C, hp, wp)`` canvas (adjoint of im2col)."""
    return _impl.col2im(np.ascontiguousarray(cols), c_n, hp, wp, k, s, ho, wo)


def zbuffer_splat(rows, cols, depth, h, w) -> np.ndarray:
    """Keep the smallest depth landing on each pixel; untouched pixels stay inf."""
    return _impl.zbuffer_splat(
        np.ascontiguousarray(rows, dtype=np.int64),
        np.ascontiguousarray(cols, dtype=np.int64),
        np.ascontiguousarray(depth),
        h,
        w,
    )
