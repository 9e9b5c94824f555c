"""Compiled inner loops for the tensor ops that dominate runtime.

Accumulation order inside every kernel is fixed: for one output element
of the convolution the partial products are added in (ci, ky, kx) order,
exactly like a straight nested-loop reference, so results are
bit-reproducible run to run and machine-independent in ordering.  Inputs
arrive pre-padded; the kernels never bounds-check.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def conv2d_forward(xp, k, b, stride):
    # xp: (n, cin, hp, wp) zero-padded input, k: (cout, cin, kh, kw)
    n, cin, hp, wp = xp.shape
    cout, _, kh, kw = k.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    out = np.empty((n, cout, oh, ow))
    row = np.empty(ow)
    for ni in range(n):
        for co in range(cout):
            for oy in range(oh):
                for ox in range(ow):
                    row[ox] = 0.0
                for ci in range(cin):
                    for ky in range(kh):
                        iy = oy * stride + ky
                        for kx in range(kw):
                            kv = k[co, ci, ky, kx]
                            for ox in range(ow):
                                row[ox] += xp[ni, ci, iy, ox * stride + kx] * kv
                for ox in range(ow):
                    out[ni, co, oy, ox] = row[ox] + b[co]
    return out


@njit(cache=True)
def conv2d_backward(xp, g, k, stride):
    # Returns (grad wrt padded input, grad wrt kernel) in one pass.
    n, cin, hp, wp = xp.shape
    cout, _, kh, kw = k.shape
    oh = g.shape[2]
    ow = g.shape[3]
    gxp = np.zeros((n, cin, hp, wp))
    gk = np.zeros((cout, cin, kh, kw))
    for ni in range(n):
        for co in range(cout):
            for oy in range(oh):
                for ox in range(ow):
                    gv = g[ni, co, oy, ox]
                    if gv == 0.0:
                        continue
                    for ci in range(cin):
                        for ky in range(kh):
                            iy = oy * stride + ky
                            for kx in range(kw):
                                ix = ox * stride + kx
                                gxp[ni, ci, iy, ix] += gv * k[co, ci, ky, kx]
                                gk[co, ci, ky, kx] += gv * xp[ni, ci, iy, ix]
    return gxp, gk


@njit(cache=True)
def gather_bilinear(f, ns, ys, xs, y0, y1, wy, x0, x1, wx):
    # One interpolated feature vector per (sample, pixel) index triple.
    m = ns.shape[0]
    d = f.shape[1]
    out = np.empty((m, d))
    for p in range(m):
        ni = ns[p]
        ya = y0[ys[p]]
        yb = y1[ys[p]]
        fy = wy[ys[p]]
        xa = x0[xs[p]]
        xb = x1[xs[p]]
        fx = wx[xs[p]]
        w00 = (1.0 - fy) * (1.0 - fx)
        w01 = (1.0 - fy) * fx
        w10 = fy * (1.0 - fx)
        w11 = fy * fx
        for c in range(d):
            out[p, c] = (
                w00 * f[ni, c, ya, xa]
                + w01 * f[ni, c, ya, xb]
                + w10 * f[ni, c, yb, xa]
                + w11 * f[ni, c, yb, xb]
            )
    return out


@njit(cache=True)
def scatter_bilinear(g, ns, ys, xs, y0, y1, wy, x0, x1, wx, n, d, h, w):
    # Adjoint of gather_bilinear: spread pixel-vector grads back onto the grid.
    gf = np.zeros((n, d, h, w))
    for p in range(g.shape[0]):
        ni = ns[p]
        ya = y0[ys[p]]
        yb = y1[ys[p]]
        fy = wy[ys[p]]
        xa = x0[xs[p]]
        xb = x1[xs[p]]
        fx = wx[xs[p]]
        w00 = (1.0 - fy) * (1.0 - fx)
        w01 = (1.0 - fy) * fx
        w10 = fy * (1.0 - fx)
        w11 = fy * fx
        for c in range(d):
            gv = g[p, c]
            gf[ni, c, ya, xa] += w00 * gv
            gf[ni, c, ya, xb] += w01 * gv
            gf[ni, c, yb, xa] += w10 * gv
            gf[ni, c, yb, xb] += w11 * gv
    return gf
