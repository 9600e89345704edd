"""Hot convolution kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import from ``GEO_REPNET_NUMBA``: ``0`` forces
numpy, anything else uses numba when it imports. ``set_backend`` switches at
runtime (tests and the kernel benchmark use it).
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap


_JIT = dict(cache=True, nogil=True, fastmath=False)


def _default_backend():
    flag = os.environ.get("GEO_REPNET_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off") or not HAVE_NUMBA:
        return "numpy"
    return "numba"


BACKEND = _default_backend()


def set_backend(name):
    global BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise ValueError("numba is not installed")
    BACKEND = name


def get_backend():
    return BACKEND


# ---------------------------------------------------------------- numpy path


def _im2col_np(xp, kh, kw, stride, ho, wo):
    b, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (b, c, ho, wo, kh, kw) -> (b, ho, wo, c, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * kh * kw)


def _col2im_np(cols, shape, kh, kw, stride, ho, wo):
    b, c, hp, wp = shape
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(b, ho, wo, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return out


def _dw_forward_np(xp, w, stride, ho, wo):
    kh, kw = w.shape[-2:]
    out = np.zeros((xp.shape[0], xp.shape[1], ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            out += patch * w[None, :, 0, i, j, None, None]
    return out


def _dw_backward_np(xp, w, g, stride):
    kh, kw = w.shape[-2:]
    ho, wo = g.shape[-2:]
    gxp = np.zeros_like(xp)
    gw = np.zeros(w.shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
            gw[:, 0, i, j] = np.einsum("bcyx,bcyx->c", g, xp[sl], dtype=np.float64)
            gxp[sl] += g * w[None, :, 0, i, j, None, None]
    return gxp, gw.astype(w.dtype)


# ---------------------------------------------------------------- numba path


@njit(**_JIT)
def _im2col_nb(xp, kh, kw, stride, ho, wo):
    b, c = xp.shape[0], xp.shape[1]
    out = np.empty((b * ho * wo, c * kh * kw), dtype=xp.dtype)
    for n in range(b):
        for y in range(ho):
            for x in range(wo):
                row = (n * ho + y) * wo + x
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            out[row, col] = xp[n, ch, y * stride + i, x * stride + j]
                            col += 1
    return out


@njit(**_JIT)
def _col2im_nb(cols, out, kh, kw, stride, ho, wo):
    b, c = out.shape[0], out.shape[1]
    for n in range(b):
        for y in range(ho):
            for x in range(wo):
                row = (n * ho + y) * wo + x
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            out[n, ch, y * stride + i, x * stride + j] += cols[row, col]
                            col += 1
    return out


@njit(**_JIT)
def _dw_forward_nb(xp, w, stride, ho, wo):
    b, c = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    out = np.zeros((b, c, ho, wo), dtype=xp.dtype)
    for n in range(b):
        for ch in range(c):
            for y in range(ho):
                for x in range(wo):
                    acc = 0.0
                    for i in range(kh):
                        for j in range(kw):
                            acc += w[ch, 0, i, j] * xp[n, ch, y * stride + i, x * stride + j]
                    out[n, ch, y, x] = acc
    return out


@njit(**_JIT)
def _dw_backward_nb(xp, w, g, stride):
    b, c = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = g.shape[2], g.shape[3]
    gxp = np.zeros_like(xp)
    gw = np.zeros((c, 1, kh, kw), dtype=np.float64)
    for n in range(b):
        for ch in range(c):
            for y in range(ho):
                for x in range(wo):
                    gv = g[n, ch, y, x]
                    for i in range(kh):
                        for j in range(kw):
                            gw[ch, 0, i, j] += gv * xp[n, ch, y * stride + i, x * stride + j]
                            gxp[n, ch, y * stride + i, x * stride + j] += gv * w[ch, 0, i, j]
    return gxp, gw.astype(w.dtype)


# ---------------------------------------------------------------- dispatch


def im2col(xp, kh, kw, stride, ho, wo):
    """Unfold a padded ``(B, C, Hp, Wp)`` array into ``(B*Ho*Wo, C*kh*kw)`` rows."""
    if BACKEND == "numba":
        return _im2col_nb(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)
    return _im2col_np(xp, kh, kw, stride, ho, wo)


def col2im(cols, shape, kh, kw, stride, ho, wo):
    """Adjoint of :func:`im2col`: scatter-add rows back onto a padded input of ``shape``."""
    if BACKEND == "numba":
        out = np.zeros(shape, dtype=cols.dtype)
        return _col2im_nb(np.ascontiguousarray(cols), out, kh, kw, stride, ho, wo)
    return _col2im_np(cols, shape, kh, kw, stride, ho, wo)


def depthwise_forward(xp, w, stride, ho, wo):
    if BACKEND == "numba":
        return _dw_forward_nb(np.ascontiguousarray(xp), np.ascontiguousarray(w), stride, ho, wo)
    return _dw_forward_np(xp, w, stride, ho, wo)


def depthwise_backward(xp, w, g, stride):
    """Return ``(grad_padded_input, grad_weight)`` for a depthwise convolution."""
    if BACKEND == "numba":
        return _dw_backward_nb(
            np.ascontiguousarray(xp), np.ascontiguousarray(w), np.ascontiguousarray(g), stride
        )
    return _dw_backward_np(xp, w, g, stride)
