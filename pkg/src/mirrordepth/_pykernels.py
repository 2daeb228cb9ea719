"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``."""

import numpy as np


def im2col(xp, k, s, ho, wo):
    c_n = xp.shape[0]
    cols = np.empty((c_n, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i:i + s * ho:s, j:j + s * wo:s]
    return cols.reshape(c_n * k * k, ho * wo)


def col2im(cols, c_n, hp, wp, k, s, ho, wo):
    img = np.zeros((c_n, hp, wp), dtype=cols.dtype)
    blocks = cols.reshape(c_n, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            img[:, i:i + s * ho:s, j:j + s * wo:s] += blocks[:, i, j]
    return img


def zbuffer_splat(rows, cols, depth, h, w):
    buf = np.full((h, w), np.inf, dtype=depth.dtype)
    np.minimum.at(buf, (rows, cols), depth)
    return buf
