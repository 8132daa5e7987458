"""Optional numba fast paths for the hot spatial ops.

Everything here has a pure-numpy twin in tensor.py / layers.py; the jitted
kernels only run for shapes where they beat BLAS (large spatial maps, where
im2col buffer traffic dominates on desktop memory bandwidth).  Set
LCFED_PURE_NUMPY=1 to disable them entirely.

fastmath is restricted to {reassoc, contract, nsz}: reductions vectorize, but
no nan/inf assumptions are made.  The summation order is fixed by the
compiled code, so results stay bit-reproducible run to run.
"""

from __future__ import annotations

import os

import numpy as np

HAVE_NUMBA = False
if not os.environ.get("LCFED_PURE_NUMPY"):
    try:
        import numba

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is an optional speedup
        pass

# jitted conv pays off where the spatial map is large; below this, BLAS wins
MIN_SPATIAL = 32 * 32


def use_fast_conv(h: int, w: int, k: int, stride: int) -> bool:
    return HAVE_NUMBA and stride == 1 and k == 3 and h * w >= MIN_SPATIAL


if HAVE_NUMBA:
    _FM = {"reassoc", "contract", "nsz"}

    @numba.njit(cache=True, fastmath=_FM)
    def conv3_fwd(xp, w, y):
        """y[b,o] = cross-correlation of padded xp[b] with w[o]; y preset to bias."""
        b_n, c_n, _, _ = xp.shape
        o_n = w.shape[0]
        h_n, w_n = y.shape[2], y.shape[3]
        for b in range(b_n):
            for o in range(o_n):
                for i in range(h_n):
                    row = y[b, o, i]
                    for c in range(c_n):
                        for di in range(3):
                            xrow = xp[b, c, i + di]
                            for dj in range(3):
                                wv = w[o, c, di, dj]
                                for j in range(w_n):
                                    row[j] += wv * xrow[j + dj]

    @numba.njit(cache=True, fastmath=_FM)
    def conv3_dw(xp, dy, dw, dbias):
        b_n, c_n, _, _ = xp.shape
        o_n, h_n, w_n = dy.shape[1], dy.shape[2], dy.shape[3]
        for b in range(b_n):
            for o in range(o_n):
                for i in range(h_n):
                    grow = dy[b, o, i]
                    s = 0.0
                    for j in range(w_n):
                        s += grow[j]
                    dbias[o] += s
                    for c in range(c_n):
                        for di in range(3):
                            xrow = xp[b, c, i + di]
                            for dj in range(3):
                                acc = 0.0
                                for j in range(w_n):
                                    acc += grow[j] * xrow[j + dj]
                                dw[o, c, di, dj] += acc

    @numba.njit(cache=True, fastmath=_FM)
    def pool2_fwd(x, y, idx):
        """2x2 max pool; idx stores the 0..3 window offset of the max."""
        b_n, c_n, h2, w2 = y.shape
        for b in range(b_n):
            for c in range(c_n):
                for i in range(h2):
                    r0 = x[b, c, 2 * i]
                    r1 = x[b, c, 2 * i + 1]
                    for j in range(w2):
                        j0 = 2 * j
                        best = r0[j0]
                        arg = 0
                        if r0[j0 + 1] > best:
                            best = r0[j0 + 1]
                            arg = 1
                        if r1[j0] > best:
                            best = r1[j0]
                            arg = 2
                        if r1[j0 + 1] > best:
                            best = r1[j0 + 1]
                            arg = 3
                        y[b, c, i, j] = best
                        idx[b, c, i, j] = arg

    @numba.njit(cache=True, fastmath=_FM)
    def pool2_bwd(g, idx, dx):
        b_n, c_n, h2, w2 = g.shape
        for b in range(b_n):
            for c in range(c_n):
                for i in range(h2):
                    for j in range(w2):
                        arg = idx[b, c, i, j]
                        dx[b, c, 2 * i + arg // 2, 2 * j + arg % 2] = g[b, c, i, j]

    @numba.njit(cache=True, fastmath=_FM)
    def inorm_fwd(x, gamma, beta, eps, y, xhat, sigma):
        """Per (b, c) plane normalization with per-channel affine."""
        b_n, c_n, h_n, w_n = x.shape
        m = h_n * w_n
        for b in range(b_n):
            for c in range(c_n):
                plane = x[b, c]
                s = 0.0
                for i in range(h_n):
                    row = plane[i]
                    for j in range(w_n):
                        s += row[j]
                mu = s / m
                sq = 0.0
                for i in range(h_n):
                    row = plane[i]
                    for j in range(w_n):
                        d = row[j] - mu
                        sq += d * d
                sd = np.sqrt(sq / m + eps)
                sigma[b, c] = sd
                gv = gamma[c]
                bv = beta[c]
                for i in range(h_n):
                    row = plane[i]
                    xh_row = xhat[b, c, i]
                    y_row = y[b, c, i]
                    for j in range(w_n):
                        xh = (row[j] - mu) / sd
                        xh_row[j] = xh
                        y_row[j] = xh * gv + bv

    @numba.njit(cache=True, fastmath=_FM)
    def inorm_bwd(g, xhat, sigma, gamma, dx, dgamma, dbeta):
        b_n, c_n, h_n, w_n = g.shape
        m = h_n * w_n
        for b in range(b_n):
            for c in range(c_n):
                gplane = g[b, c]
                xh = xhat[b, c]
                sum_g = 0.0
                sum_gx = 0.0
                for i in range(h_n):
                    grow = gplane[i]
                    xrow = xh[i]
                    for j in range(w_n):
                        sum_g += grow[j]
                        sum_gx += grow[j] * xrow[j]
                dgamma[c] += sum_gx
                dbeta[c] += sum_g
                gv = gamma[c]
                gmean = gv * sum_g / m
                xmean = gv * sum_gx / m
                sd = sigma[b, c]
                for i in range(h_n):
                    grow = gplane[i]
                    xrow = xh[i]
                    dxrow = dx[b, c, i]
                    for j in range(w_n):
                        dxrow[j] = (gv * grow[j] - gmean - xrow[j] * xmean) / sd


def warmup(dtype=np.float64):
    """Trigger jit compilation (cached on disk) outside any timed section."""
    if not HAVE_NUMBA:
        return
    xp = np.zeros((1, 1, 34, 34), dtype=dtype)
    w = np.zeros((1, 1, 3, 3), dtype=dtype)
    y = np.zeros((1, 1, 32, 32), dtype=dtype)
    conv3_fwd(xp, w, y)
    conv3_dw(xp, y, w.copy(), np.zeros(1, dtype=dtype))
    x = np.zeros((1, 1, 4, 4), dtype=dtype)
    idx = np.zeros((1, 1, 2, 2), dtype=np.uint8)
    small = np.zeros((1, 1, 2, 2), dtype=dtype)
    pool2_fwd(x, small, idx)
    pool2_bwd(small, idx, x.copy())
    ones = np.ones(1, dtype=dtype)
    zeros = np.zeros(1, dtype=dtype)
    sig = np.zeros((1, 1), dtype=dtype)
    inorm_fwd(x, ones, zeros, 1e-5, x.copy(), x.copy(), sig)
    inorm_bwd(x, x, sig + 1.0, ones, x.copy(), zeros.copy(), zeros.copy())
