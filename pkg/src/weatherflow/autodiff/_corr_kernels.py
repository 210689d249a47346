"""Numba kernels for the displacement correlation (cost volume).

The correlation touches each feature window 81 times; fusing the loops into
single passes avoids the intermediate buffers the numpy formulation needs.
Falls back to numpy in spatial.py when numba is unavailable.
"""

import numba
import numpy as np


@numba.njit(cache=True, fastmath=False)
def corr_forward(f1t, f2pt, d):
    """f1t: (b, h, w, c); f2pt: (b, h+2d, w+2d, c) -> (b, side*side, h, w)."""
    b, h, w, c = f1t.shape
    side = 2 * d + 1
    out = np.empty((b, side * side, h, w), dtype=f1t.dtype)
    for bi in range(b):
        for y in range(h):
            for x in range(w):
                for u in range(side):
                    for v in range(side):
                        acc = 0.0
                        for ch in range(c):
                            acc += f1t[bi, y, x, ch] * f2pt[bi, y + u, x + v, ch]
                        out[bi, u * side + v, y, x] = acc / c
    return out


@numba.njit(cache=True, fastmath=False)
def corr_backward(g, f1t, f2pt, d, need1, need2):
    """g: (b, side*side, h, w); returns (df1t, df2pt) in channels-last."""
    b, h, w, c = f1t.shape
    side = 2 * d + 1
    df1t = np.zeros(f1t.shape, dtype=f1t.dtype)
    df2pt = np.zeros(f2pt.shape, dtype=f2pt.dtype)
    for bi in range(b):
        for y in range(h):
            for x in range(w):
                for u in range(side):
                    for v in range(side):
                        gv = g[bi, u * side + v, y, x] / c
                        if gv != 0.0:
                            if need1:
                                for ch in range(c):
                                    df1t[bi, y, x, ch] += gv * f2pt[bi, y + u, x + v, ch]
                            if need2:
                                for ch in range(c):
                                    df2pt[bi, y + u, x + v, ch] += gv * f1t[bi, y, x, ch]
    return df1t, df2pt
