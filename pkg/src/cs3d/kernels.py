"""Hot loops for convolution and pooling.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version built from strided slices.  The active path is chosen once at import
from ``CS3D_NUMBA`` ("0" forces numpy) and can be switched at runtime with
:func:`set_backend`.  ``CS3D_THREADS`` caps numba's thread pool.

All arrays are float64 and laid out (B, C, T, H, W).  Convolution kernels take
an already padded input; padding is the caller's concern.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
    if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
        # skip probing TBB first; old system TBB builds only produce a warning
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False
    prange = range

    def njit(*args, **kwargs):
        def deco(fn):
            return fn

        return deco


_BACKEND = "numba" if HAVE_NUMBA and os.environ.get("CS3D_NUMBA", "1") != "0" else "numpy"

if HAVE_NUMBA and os.environ.get("CS3D_THREADS"):
    try:
        numba.set_num_threads(max(1, min(int(os.environ["CS3D_THREADS"]), numba.config.NUMBA_NUM_THREADS)))
    except ValueError:
        warnings.warn("ignoring non-integer CS3D_THREADS")


def get_backend() -> str:
    return _BACKEND


def set_backend(name: str) -> None:
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _BACKEND = name


def out_extent(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def _out_shape(xp_shape, kshape, stride):
    return tuple(out_extent(xp_shape[2 + i], kshape[i], stride[i]) for i in range(3))


def _window(xp, a, b, c, out, stride):
    st, sh, sw = stride
    to, ho, wo = out
    return xp[:, :, a : a + st * (to - 1) + 1 : st, b : b + sh * (ho - 1) + 1 : sh, c : c + sw * (wo - 1) + 1 : sw]


# ---------------------------------------------------------------------------
# numpy path


def _dense_fwd_np(xp, w, stride):
    co, _, kt, kh, kw = w.shape
    out = _out_shape(xp.shape, (kt, kh, kw), stride)
    y = np.zeros((xp.shape[0], co) + out)
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                xs = _window(xp, a, b, c, out, stride)
                y += np.einsum("oi,bithw->bothw", w[:, :, a, b, c], xs, optimize=True)
    return y


def _dense_bwd_np(xp, w, stride, gy):
    _, _, kt, kh, kw = w.shape
    out = gy.shape[2:]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                xs = _window(xp, a, b, c, out, stride)
                gw[:, :, a, b, c] = np.einsum("bothw,bithw->oi", gy, xs, optimize=True)
                _window(gxp, a, b, c, out, stride)[...] += np.einsum("oi,bothw->bithw", w[:, :, a, b, c], gy, optimize=True)
    return gxp, gw


def _dw_fwd_np(xp, w, stride):
    ch, _, kt, kh, kw = w.shape
    out = _out_shape(xp.shape, (kt, kh, kw), stride)
    y = np.zeros((xp.shape[0], ch) + out)
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                y += w[:, 0, a, b, c][None, :, None, None, None] * _window(xp, a, b, c, out, stride)
    return y


def _dw_bwd_np(xp, w, stride, gy):
    _, _, kt, kh, kw = w.shape
    out = gy.shape[2:]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                xs = _window(xp, a, b, c, out, stride)
                gw[:, 0, a, b, c] = (gy * xs).sum(axis=(0, 2, 3, 4))
                _window(gxp, a, b, c, out, stride)[...] += w[:, 0, a, b, c][None, :, None, None, None] * gy
    return gxp, gw


def _maxpool_fwd_np(x, window, stride):
    out = _out_shape(x.shape, window, stride)
    best = np.full(x.shape[:2] + out, -np.inf)
    arg = np.zeros(x.shape[:2] + out, dtype=np.int64)
    k = 0
    # scan order is row-major inside the window, so strict ">" keeps the lowest flat index on ties
    for a in range(window[0]):
        for b in range(window[1]):
            for c in range(window[2]):
                xs = _window(x, a, b, c, out, stride)
                better = xs > best
                best = np.where(better, xs, best)
                arg[better] = k
                k += 1
    return best, arg


def _maxpool_bwd_np(arg, gy, x_shape, window, stride):
    gx = np.zeros(x_shape)
    out = gy.shape[2:]
    k = 0
    for a in range(window[0]):
        for b in range(window[1]):
            for c in range(window[2]):
                _window(gx, a, b, c, out, stride)[...] += np.where(arg == k, gy, 0.0)
                k += 1
    return gx


def _avgpool_fwd_np(x, window, stride):
    out = _out_shape(x.shape, window, stride)
    y = np.zeros(x.shape[:2] + out)
    for a in range(window[0]):
        for b in range(window[1]):
            for c in range(window[2]):
                y += _window(x, a, b, c, out, stride)
    return y / (window[0] * window[1] * window[2])


def _avgpool_bwd_np(gy, x_shape, window, stride):
    gx = np.zeros(x_shape)
    out = gy.shape[2:]
    g = gy / (window[0] * window[1] * window[2])
    for a in range(window[0]):
        for b in range(window[1]):
            for c in range(window[2]):
                _window(gx, a, b, c, out, stride)[...] += g
    return gx


# ---------------------------------------------------------------------------
# numba path


@njit(parallel=True, cache=True)
def _dense_fwd_nb(xp, w, st, sh, sw, to, ho, wo):
    nb, ci = xp.shape[0], xp.shape[1]
    co, kt, kh, kw = w.shape[0], w.shape[2], w.shape[3], w.shape[4]
    y = np.zeros((nb, co, to, ho, wo))
    for n in prange(nb * co):
        b = n // co
        o = n % co
        for i in range(ci):
            for a in range(kt):
                for p in range(kh):
                    for q in range(kw):
                        wv = w[o, i, a, p, q]
                        for t in range(to):
                            for h in range(ho):
                                xr = xp[b, i, t * st + a, h * sh + p]
                                yr = y[b, o, t, h]
                                for u in range(wo):
                                    yr[u] += wv * xr[u * sw + q]
    return y


@njit(parallel=True, cache=True)
def _dense_bwd_input_nb(xshape, w, st, sh, sw, gy):
    nb, ci = xshape[0], xshape[1]
    co, kt, kh, kw = w.shape[0], w.shape[2], w.shape[3], w.shape[4]
    to, ho, wo = gy.shape[2], gy.shape[3], gy.shape[4]
    gx = np.zeros((nb, ci, xshape[2], xshape[3], xshape[4]))
    for n in prange(nb * ci):
        b = n // ci
        i = n % ci
        for o in range(co):
            for a in range(kt):
                for p in range(kh):
                    for q in range(kw):
                        wv = w[o, i, a, p, q]
                        for t in range(to):
                            for h in range(ho):
                                gr = gx[b, i, t * st + a, h * sh + p]
                                gyr = gy[b, o, t, h]
                                for u in range(wo):
                                    gr[u * sw + q] += wv * gyr[u]
    return gx


@njit(parallel=True, cache=True)
def _dense_bwd_weight_nb(xp, wshape, st, sh, sw, gy):
    nb = xp.shape[0]
    co, ci, kt, kh, kw = wshape[0], wshape[1], wshape[2], wshape[3], wshape[4]
    to, ho, wo = gy.shape[2], gy.shape[3], gy.shape[4]
    gw = np.zeros((co, ci, kt, kh, kw))
    for n in prange(co * ci):
        o = n // ci
        i = n % ci
        for a in range(kt):
            for p in range(kh):
                for q in range(kw):
                    acc = 0.0
                    for b in range(nb):
                        for t in range(to):
                            for h in range(ho):
                                xr = xp[b, i, t * st + a, h * sh + p]
                                gyr = gy[b, o, t, h]
                                for u in range(wo):
                                    acc += gyr[u] * xr[u * sw + q]
                    gw[o, i, a, p, q] = acc
    return gw


@njit(parallel=True, cache=True)
def _dw_fwd_nb(xp, w, st, sh, sw, to, ho, wo):
    nb, ch = xp.shape[0], xp.shape[1]
    kt, kh, kw = w.shape[2], w.shape[3], w.shape[4]
    y = np.zeros((nb, ch, to, ho, wo))
    for n in prange(nb * ch):
        b = n // ch
        c = n % ch
        for a in range(kt):
            for p in range(kh):
                for q in range(kw):
                    wv = w[c, 0, a, p, q]
                    for t in range(to):
                        for h in range(ho):
                            xr = xp[b, c, t * st + a, h * sh + p]
                            yr = y[b, c, t, h]
                            for u in range(wo):
                                yr[u] += wv * xr[u * sw + q]
    return y


@njit(parallel=True, cache=True)
def _dw_bwd_nb(xp, w, st, sh, sw, gy):
    nb, ch = xp.shape[0], xp.shape[1]
    kt, kh, kw = w.shape[2], w.shape[3], w.shape[4]
    to, ho, wo = gy.shape[2], gy.shape[3], gy.shape[4]
    gx = np.zeros(xp.shape)
    gw = np.zeros(w.shape)
    for n in prange(nb * ch):
        b = n // ch
        c = n % ch
        for a in range(kt):
            for p in range(kh):
                for q in range(kw):
                    wv = w[c, 0, a, p, q]
                    for t in range(to):
                        for h in range(ho):
                            gr = gx[b, c, t * st + a, h * sh + p]
                            gyr = gy[b, c, t, h]
                            for u in range(wo):
                                gr[u * sw + q] += wv * gyr[u]
    for c in prange(ch):
        for a in range(kt):
            for p in range(kh):
                for q in range(kw):
                    acc = 0.0
                    for b in range(nb):
                        for t in range(to):
                            for h in range(ho):
                                xr = xp[b, c, t * st + a, h * sh + p]
                                gyr = gy[b, c, t, h]
                                for u in range(wo):
                                    acc += gyr[u] * xr[u * sw + q]
                    gw[c, 0, a, p, q] = acc
    return gx, gw


@njit(parallel=True, cache=True)
def _maxpool_fwd_nb(x, wt, wh, ww, st, sh, sw, to, ho, wo):
    nb, ch = x.shape[0], x.shape[1]
    y = np.empty((nb, ch, to, ho, wo))
    arg = np.empty((nb, ch, to, ho, wo), dtype=np.int64)
    for n in prange(nb * ch):
        b = n // ch
        c = n % ch
        for t in range(to):
            for h in range(ho):
                for u in range(wo):
                    best = -np.inf
                    bk = 0
                    k = 0
                    for a in range(wt):
                        for p in range(wh):
                            for q in range(ww):
                                v = x[b, c, t * st + a, h * sh + p, u * sw + q]
                                if v > best:
                                    best = v
                                    bk = k
                                k += 1
                    y[b, c, t, h, u] = best
                    arg[b, c, t, h, u] = bk
    return y, arg


@njit(parallel=True, cache=True)
def _maxpool_bwd_nb(arg, gy, xshape, wt, wh, ww, st, sh, sw):
    nb, ch = gy.shape[0], gy.shape[1]
    to, ho, wo = gy.shape[2], gy.shape[3], gy.shape[4]
    gx = np.zeros((xshape[0], xshape[1], xshape[2], xshape[3], xshape[4]))
    for n in prange(nb * ch):
        b = n // ch
        c = n % ch
        for t in range(to):
            for h in range(ho):
                for u in range(wo):
                    k = arg[b, c, t, h, u]
                    a = k // (wh * ww)
                    p = (k // ww) % wh
                    q = k % ww
                    gx[b, c, t * st + a, h * sh + p, u * sw + q] += gy[b, c, t, h, u]
    return gx


@njit(parallel=True, cache=True)
def _avgpool_fwd_nb(x, wt, wh, ww, st, sh, sw, to, ho, wo):
    nb, ch = x.shape[0], x.shape[1]
    y = np.empty((nb, ch, to, ho, wo))
    inv = 1.0 / (wt * wh * ww)
    for n in prange(nb * ch):
        b = n // ch
        c = n % ch
        for t in range(to):
            for h in range(ho):
                for u in range(wo):
                    acc = 0.0
                    for a in range(wt):
                        for p in range(wh):
                            for q in range(ww):
                                acc += x[b, c, t * st + a, h * sh + p, u * sw + q]
                    y[b, c, t, h, u] = acc * inv
    return y


@njit(parallel=True, cache=True)
def _avgpool_bwd_nb(gy, xshape, wt, wh, ww, st, sh, sw):
    nb, ch = gy.shape[0], gy.shape[1]
    to, ho, wo = gy.shape[2], gy.shape[3], gy.shape[4]
    gx = np.zeros((xshape[0], xshape[1], xshape[2], xshape[3], xshape[4]))
    inv = 1.0 / (wt * wh * ww)
    for n in prange(nb * ch):
        b = n // ch
        c = n % ch
        for t in range(to):
            for h in range(ho):
                for u in range(wo):
                    g = gy[b, c, t, h, u] * inv
                    for a in range(wt):
                        for p in range(wh):
                            for q in range(ww):
                                gx[b, c, t * st + a, h * sh + p, u * sw + q] += g
    return gx


# ---------------------------------------------------------------------------
# dispatch


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _pointwise(w, stride) -> bool:
    return w.shape[2:] == (1, 1, 1) and tuple(stride) == (1, 1, 1)


def _pw_fwd(x, w):
    b, ci = x.shape[:2]
    y = np.matmul(w[:, :, 0, 0, 0], x.reshape(b, ci, -1))
    return y.reshape((b, w.shape[0]) + x.shape[2:])


def _pw_bwd(x, w, gy):
    b, ci = x.shape[:2]
    co = w.shape[0]
    xr = x.reshape(b, ci, -1)
    gr = gy.reshape(b, co, -1)
    gx = np.matmul(w[:, :, 0, 0, 0].T, gr).reshape(x.shape)
    gw = np.tensordot(gr, xr, axes=([0, 2], [0, 2])).reshape(w.shape)
    return gx, gw


def dense_conv_forward(xp, w, stride):
    # 1x1x1 stride-1 kernels are a batched matmul on either backend
    if _pointwise(w, stride):
        return _pw_fwd(xp, w)
    if _BACKEND == "numpy":
        return _dense_fwd_np(xp, w, stride)
    out = _out_shape(xp.shape, w.shape[2:], stride)
    return _dense_fwd_nb(_c(xp), _c(w), *stride, *out)


def dense_conv_backward(xp, w, stride, gy):
    """Return (grad wrt padded input, grad wrt weight)."""
    if _pointwise(w, stride):
        return _pw_bwd(xp, w, gy)
    if _BACKEND == "numpy":
        return _dense_bwd_np(xp, w, stride, gy)
    xp, w, gy = _c(xp), _c(w), _c(gy)
    gx = _dense_bwd_input_nb(np.array(xp.shape, dtype=np.int64), w, *stride, gy)
    gw = _dense_bwd_weight_nb(xp, np.array(w.shape, dtype=np.int64), *stride, gy)
    return gx, gw


def dw_conv_forward(xp, w, stride):
    if _BACKEND == "numpy":
        return _dw_fwd_np(xp, w, stride)
    out = _out_shape(xp.shape, w.shape[2:], stride)
    return _dw_fwd_nb(_c(xp), _c(w), *stride, *out)


def dw_conv_backward(xp, w, stride, gy):
    if _BACKEND == "numpy":
        return _dw_bwd_np(xp, w, stride, gy)
    return _dw_bwd_nb(_c(xp), _c(w), *stride, _c(gy))


def maxpool_forward(x, window, stride):
    """Windowed max; also returns the row-major offset of the winner inside each window."""
    if _BACKEND == "numpy":
        return _maxpool_fwd_np(x, window, stride)
    out = _out_shape(x.shape, window, stride)
    return _maxpool_fwd_nb(_c(x), *window, *stride, *out)


def maxpool_backward(arg, gy, x_shape, window, stride):
    if _BACKEND == "numpy":
        return _maxpool_bwd_np(arg, gy, x_shape, window, stride)
    return _maxpool_bwd_nb(arg, _c(gy), np.array(x_shape, dtype=np.int64), *window, *stride)


def avgpool_forward(x, window, stride):
    if _BACKEND == "numpy":
        return _avgpool_fwd_np(x, window, stride)
    out = _out_shape(x.shape, window, stride)
    return _avgpool_fwd_nb(_c(x), *window, *stride, *out)


def avgpool_backward(gy, x_shape, window, stride):
    if _BACKEND == "numpy":
        return _avgpool_bwd_np(gy, x_shape, window, stride)
    return _avgpool_bwd_nb(_c(gy), np.array(x_shape, dtype=np.int64), *window, *stride)
