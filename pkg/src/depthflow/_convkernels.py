"""JIT-compiled im2col/col2im for the 3x3 "same" convolution hot path.

These kernels only move data; the multiply-accumulate work stays in BLAS.
Loop order is chosen so writes are sequential, which is what makes them fast
on small caches. Results are bit-identical to the numpy reference paths in
tensor.py (same element order, same accumulation order).
"""

import numba
import numpy as np


@numba.njit(cache=True)
def im2col3x3(x):
    """(N,C,H,W) -> (N,H,W,C,3,3) patches with zero padding."""
    n, ci, h, w = x.shape
    out = np.zeros((n, h, w, ci, 3, 3), dtype=x.dtype)
    for b in range(n):
        for y in range(h):
            for xx in range(w):
                for c in range(ci):
                    o = out[b, y, xx, c]
                    xc = x[b, c]
                    for ky in range(3):
                        sy = y + ky - 1
                        if sy < 0 or sy >= h:
                            continue
                        for kx in range(3):
                            sx = xx + kx - 1
                            if sx < 0 or sx >= w:
                                continue
                            o[ky, kx] = xc[sy, sx]
    return out


@numba.njit(cache=True)
def col2im3x3(g, h, w):
    """Adjoint of im2col3x3: (N,H,W,C,3,3) -> (N,C,H,W)."""
    n = g.shape[0]
    ci = g.shape[3]
    out = np.zeros((n, ci, h, w), dtype=g.dtype)
    for b in range(n):
        for c in range(ci):
            for y in range(h):
                for xx in range(w):
                    acc = out[b, c, y, xx]  # typed zero
                    for ky in range(3):
                        oy = y - ky + 1
                        if oy < 0 or oy >= h:
                            continue
                        for kx in range(3):
                            ox = xx - kx + 1
                            if ox < 0 or ox >= w:
                                continue
                            acc += g[b, oy, ox, c, ky, kx]
                    out[b, c, y, xx] = acc
    return out
