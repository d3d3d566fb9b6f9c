"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import time. Set ``CASCADESEG_NUMBA=0`` to force
the numpy path (also used automatically when numba cannot be imported). Both
implementations are always importable under explicit names so the benchmark
and the cross-backend tests can call either one.

The numba convolution kernels walk one output row at a time: the innermost
loop runs along the contiguous W axis of both operands with the weight held as
a scalar, and a stride-1 branch keeps that loop unit-stride so it vectorizes.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("CASCADESEG_NUMBA", "1").lower() not in ("0", "false", "no", "off")

BACKEND = "numba" if USE_NUMBA else "numpy"


def _out_extent(n, k, s):
    return (n - k) // s + 1


# ---------------------------------------------------------------------------
# numpy path


def conv3d_forward_numpy(xp, w, stride):
    """Cross-correlate a padded input ``xp`` (N,C,D,H,W) with ``w`` (O,C,kd,kh,kw)."""
    sd, sh, sw = stride
    kd, kh, kw = w.shape[2:]
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    out = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))


def conv3d_grad_weight_numpy(xp, g, kernel, stride):
    sd, sh, sw = stride
    win = sliding_window_view(xp, kernel, axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    return np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))


def conv3d_grad_input_numpy(g, w, padded_shape, stride):
    sd, sh, sw = stride
    kd, kh, kw = w.shape[2:]
    od, oh, ow = g.shape[2:]
    gxp = np.zeros(padded_shape, dtype=g.dtype)
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                contrib = np.tensordot(g, w[:, :, i, j, k], axes=([1], [0]))  # N,D,H,W,C
                gxp[:, :, i:i + sd * od:sd, j:j + sh * oh:sh, k:k + sw * ow:sw] += contrib.transpose(0, 4, 1, 2, 3)
    return gxp


def min_sq_dist_numpy(src, dst, chunk=2048):
    """For each row of ``src`` (P,3) the minimum squared distance to ``dst`` (Q,3)."""
    out = np.empty(len(src), dtype=np.float64)
    for start in range(0, len(src), chunk):
        a = src[start:start + chunk]
        d0 = a[:, None, 0] - dst[None, :, 0]
        d1 = a[:, None, 1] - dst[None, :, 1]
        d2 = a[:, None, 2] - dst[None, :, 2]
        out[start:start + chunk] = (d0 * d0 + d1 * d1 + d2 * d2).min(axis=1)
    return out


# ---------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _conv_fwd_nb(xp, w, sd, sh, sw, out):
        n_batch, n_out, od, oh, ow = out.shape
        n_in, kd, kh, kw = w.shape[1], w.shape[2], w.shape[3], w.shape[4]
        for n in range(n_batch):
            for z in range(od):
                for y in range(oh):
                    for o in range(n_out):
                        row = out[n, o, z, y]
                        for c in range(n_in):
                            for i in range(kd):
                                for j in range(kh):
                                    src = xp[n, c, z * sd + i, y * sh + j]
                                    for k in range(kw):
                                        wv = w[o, c, i, j, k]
                                        if sw == 1:
                                            for x in range(ow):
                                                row[x] += wv * src[x + k]
                                        else:
                                            for x in range(ow):
                                                row[x] += wv * src[x * sw + k]
        return out

    @njit(cache=True)
    def _conv_gw_nb(xp, g, sd, sh, sw, gw):
        n_batch, n_out, od, oh, ow = g.shape
        n_in, kd, kh, kw = gw.shape[1], gw.shape[2], gw.shape[3], gw.shape[4]
        for n in range(n_batch):
            for z in range(od):
                for y in range(oh):
                    for o in range(n_out):
                        grow = g[n, o, z, y]
                        for c in range(n_in):
                            for i in range(kd):
                                for j in range(kh):
                                    src = xp[n, c, z * sd + i, y * sh + j]
                                    for k in range(kw):
                                        acc = 0.0
                                        if sw == 1:
                                            for x in range(ow):
                                                acc += grow[x] * src[x + k]
                                        else:
                                            for x in range(ow):
                                                acc += grow[x] * src[x * sw + k]
                                        gw[o, c, i, j, k] += acc
        return gw

    @njit(cache=True)
    def _conv_gx_nb(g, w, sd, sh, sw, gxp):
        n_batch, n_out, od, oh, ow = g.shape
        n_in, kd, kh, kw = w.shape[1], w.shape[2], w.shape[3], w.shape[4]
        for n in range(n_batch):
            for z in range(od):
                for y in range(oh):
                    for o in range(n_out):
                        grow = g[n, o, z, y]
                        for c in range(n_in):
                            for i in range(kd):
                                for j in range(kh):
                                    dst = gxp[n, c, z * sd + i, y * sh + j]
                                    for k in range(kw):
                                        wv = w[o, c, i, j, k]
                                        if sw == 1:
                                            for x in range(ow):
                                                dst[x + k] += wv * grow[x]
                                        else:
                                            for x in range(ow):
                                                dst[x * sw + k] += wv * grow[x]
        return gxp

    @njit(cache=True)
    def _min_sq_dist_nb(src, dst, out):
        for p in range(src.shape[0]):
            best = np.inf
            a0 = src[p, 0]
            a1 = src[p, 1]
            a2 = src[p, 2]
            for q in range(dst.shape[0]):
                d0 = a0 - dst[q, 0]
                d1 = a1 - dst[q, 1]
                d2 = a2 - dst[q, 2]
                d = d0 * d0 + d1 * d1 + d2 * d2
                if d < best:
                    best = d
            out[p] = best
        return out

    def conv3d_forward_numba(xp, w, stride):
        n, _, dp, hp, wp = xp.shape
        kd, kh, kw = w.shape[2:]
        out = np.zeros(
            (n, w.shape[0], _out_extent(dp, kd, stride[0]), _out_extent(hp, kh, stride[1]), _out_extent(wp, kw, stride[2])),
            dtype=xp.dtype,
        )
        return _conv_fwd_nb(np.ascontiguousarray(xp), np.ascontiguousarray(w, dtype=xp.dtype), *stride, out)

    def conv3d_grad_weight_numba(xp, g, kernel, stride):
        gw = np.zeros((g.shape[1], xp.shape[1]) + tuple(kernel), dtype=g.dtype)
        return _conv_gw_nb(np.ascontiguousarray(xp, dtype=g.dtype), np.ascontiguousarray(g), *stride, gw)

    def conv3d_grad_input_numba(g, w, padded_shape, stride):
        gxp = np.zeros(padded_shape, dtype=g.dtype)
        return _conv_gx_nb(np.ascontiguousarray(g), np.ascontiguousarray(w, dtype=g.dtype), *stride, gxp)

    def min_sq_dist_numba(src, dst):
        out = np.empty(len(src), dtype=np.float64)
        return _min_sq_dist_nb(np.ascontiguousarray(src, dtype=np.float64), np.ascontiguousarray(dst, dtype=np.float64), out)


# The convolution is BLAS-shaped: tensordot wins once channel counts grow.
# The loop kernels only beat it on thin stride-1 layers (see the benchmark),
# with 3^3 kernels, so numba mode routes a conv there only when it fits that shape.
NUMBA_CONV_MAX_CHANNEL_PRODUCT = 16


def numba_fits_conv(n_in, n_out, kernel, stride):
    """Shape rule only; the dispatchers also require numba mode."""
    return (n_in * n_out <= NUMBA_CONV_MAX_CHANNEL_PRODUCT and tuple(stride) == (1, 1, 1)
            and tuple(kernel) == (3, 3, 3))


def conv3d_forward(xp, w, stride):
    if USE_NUMBA and numba_fits_conv(w.shape[1], w.shape[0], w.shape[2:], stride):
        return conv3d_forward_numba(xp, w, stride)
    return conv3d_forward_numpy(xp, w, stride)


def conv3d_grad_weight(xp, g, kernel, stride):
    if USE_NUMBA and numba_fits_conv(xp.shape[1], g.shape[1], kernel, stride):
        return conv3d_grad_weight_numba(xp, g, kernel, stride)
    return conv3d_grad_weight_numpy(xp, g, kernel, stride)


def conv3d_grad_input(g, w, padded_shape, stride):
    if USE_NUMBA and numba_fits_conv(w.shape[1], w.shape[0], w.shape[2:], stride):
        return conv3d_grad_input_numba(g, w, padded_shape, stride)
    return conv3d_grad_input_numpy(g, w, padded_shape, stride)


min_sq_dist = min_sq_dist_numba if USE_NUMBA else min_sq_dist_numpy
