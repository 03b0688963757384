"""2d convolution kernels in two interchangeable builds.

The numba build compiles explicit loops, the numpy build lowers the same
contractions onto BLAS through stride tricks.  ``IBGC_BACKEND=numba``
selects the compiled loops; ``numpy`` (the default) selects BLAS, which
wins on this package's shapes whenever the BLAS carries wide SIMD
microkernels -- ``benchmarks/bench_kernels.py`` measures both and checks
agreement.  Either build is deterministic run to run.

Convolutions are cross-correlations over NCHW arrays with odd square
kernels, symmetric zero padding and stride 1 or 2.
"""

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("IBGC_BACKEND", "numpy") == "numba"

BACKEND = "numba" if USE_NUMBA else "numpy"


def _check_conv_args(x, w, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIKK weights")
    if x.shape[1] != w.shape[1]:
        raise ValueError("channel mismatch: %d vs %d" % (x.shape[1], w.shape[1]))
    kh, kw = w.shape[2], w.shape[3]
    if kh != kw or kh % 2 == 0:
        raise ValueError("only odd square kernels are supported")
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    if padding < 0 or padding >= kh:
        raise ValueError("padding must lie in [0, kernel)")


def out_hw(h, w, k, stride, padding):
    return (h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


# ---------------------------------------------------------------- numpy build

def _cols(xp, kh, kw, stride, ho, wo):
    """View of all kernel-sized windows, shape (n, c, kh, kw, ho, wo)."""
    n, c = xp.shape[0], xp.shape[1]
    sn, sc, sh, sw = xp.strides
    shape = (n, c, kh, kw, ho, wo)
    strides = (sn, sc, sh, sw, sh * stride, sw * stride)
    return np.lib.stride_tricks.as_strided(xp, shape, strides, writeable=False)


def conv2d_forward_numpy(x, w, stride, padding):
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = out_hw(x.shape[2], x.shape[3], kh, stride, padding)
    cols = _cols(_pad(x, padding), kh, kw, stride, ho, wo)
    out = np.tensordot(w, cols, axes=([1, 2, 3], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv2d_grad_input_numpy(dy, w, x_shape, stride, padding):
    n, c, h, wd = x_shape
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = dy.shape[2], dy.shape[3]
    # (n, ho, wo, c, kh, kw) -> (n, c, kh, kw, ho, wo)
    g = np.tensordot(dy, w, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g[:, :, i, j]
    if padding == 0:
        return dxp
    return np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + wd])


def conv2d_grad_weight_numpy(x, dy, k, stride, padding):
    ho, wo = dy.shape[2], dy.shape[3]
    cols = _cols(_pad(x, padding), k, k, stride, ho, wo)
    return np.tensordot(dy, cols, axes=([0, 2, 3], [0, 4, 5]))


# ---------------------------------------------------------------- numba build

def _forward_loops(xp, w, stride, out):
    n, cin, _, _ = xp.shape
    cout, _, kh, kw = w.shape
    ho, wo = out.shape[2], out.shape[3]
    for img in range(n):
        for oc in range(cout):
            for ic in range(cin):
                for i in range(kh):
                    for j in range(kw):
                        wk = w[oc, ic, i, j]
                        for y in range(ho):
                            yb = y * stride + i
                            for x in range(wo):
                                out[img, oc, y, x] += wk * xp[img, ic, yb, x * stride + j]


def _grad_input_loops(dy, w, stride, dxp):
    n, cout, ho, wo = dy.shape
    _, cin, kh, kw = w.shape
    for img in range(n):
        for oc in range(cout):
            for ic in range(cin):
                for i in range(kh):
                    for j in range(kw):
                        wk = w[oc, ic, i, j]
                        for y in range(ho):
                            yb = y * stride + i
                            for x in range(wo):
                                dxp[img, ic, yb, x * stride + j] += wk * dy[img, oc, y, x]


def _grad_weight_loops(xp, dy, stride, dw):
    n, cout, ho, wo = dy.shape
    _, cin, kh, kw = dw.shape
    for oc in range(cout):
        for ic in range(cin):
            for i in range(kh):
                for j in range(kw):
                    acc = 0.0
                    for img in range(n):
                        for y in range(ho):
                            yb = y * stride + i
                            for x in range(wo):
                                acc += xp[img, ic, yb, x * stride + j] * dy[img, oc, y, x]
                    dw[oc, ic, i, j] = acc


if HAVE_NUMBA:
    _forward_loops = numba.njit(cache=True)(_forward_loops)
    _grad_input_loops = numba.njit(cache=True)(_grad_input_loops)
    _grad_weight_loops = numba.njit(cache=True)(_grad_weight_loops)


def conv2d_forward_numba(x, w, stride, padding):
    kh = w.shape[2]
    ho, wo = out_hw(x.shape[2], x.shape[3], kh, stride, padding)
    xp = np.ascontiguousarray(_pad(x, padding))
    out = np.zeros((x.shape[0], w.shape[0], ho, wo))
    _forward_loops(xp, np.ascontiguousarray(w), stride, out)
    return out


def conv2d_grad_input_numba(dy, w, x_shape, stride, padding):
    n, c, h, wd = x_shape
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    _grad_input_loops(np.ascontiguousarray(dy), np.ascontiguousarray(w), stride, dxp)
    if padding == 0:
        return dxp
    return np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + wd])


def conv2d_grad_weight_numba(x, dy, k, stride, padding):
    xp = np.ascontiguousarray(_pad(x, padding))
    dw = np.zeros((dy.shape[1], x.shape[1], k, k))
    _grad_weight_loops(xp, np.ascontiguousarray(dy), stride, dw)
    return dw


# ------------------------------------------------------------------- dispatch

if USE_NUMBA:
    _forward_impl = conv2d_forward_numba
    _grad_input_impl = conv2d_grad_input_numba
    _grad_weight_impl = conv2d_grad_weight_numba
else:
    _forward_impl = conv2d_forward_numpy
    _grad_input_impl = conv2d_grad_input_numpy
    _grad_weight_impl = conv2d_grad_weight_numpy


def conv2d_forward(x, w, stride=1, padding=0):
    _check_conv_args(x, w, stride, padding)
    return _forward_impl(x, w, stride, padding)


def conv2d_grad_input(dy, w, x_shape, stride=1, padding=0):
    return _grad_input_impl(dy, w, x_shape, stride, padding)


def conv2d_grad_weight(x, dy, k, stride=1, padding=0):
    return _grad_weight_impl(x, dy, k, stride, padding)
