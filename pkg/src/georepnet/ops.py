"""Differentiable primitives.

Every function accepts :class:`Tensor` or array-likes, returns a new Tensor
and never mutates its inputs. When any input is on a tape the result is
recorded there together with its backward rule. Reductions accumulate in
float64 regardless of the storage dtype.
"""

import math

import numpy as np

from . import kernels
from .errors import ConfigurationError, DataError, DimensionError, UsageError
from .tensor import Tensor, as_float_array, check_finite

_NORM_EPS = 1e-5


def tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(as_float_array(value, dtype))


def _const(value, like):
    """Wrap a non-Tensor operand, adopting the dtype of the Tensor it meets."""
    if isinstance(value, Tensor):
        return value
    if isinstance(value, (int, float)):
        return Tensor(np.asarray(value, dtype=like.dtype))
    return Tensor(as_float_array(value, like.dtype))


def _tape_of(inputs):
    tape = None
    for t in inputs:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise UsageError("operands belong to different gradient tapes")
    return tape


def _finish(rule, inputs, out, backward):
    check_finite(out, rule)
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(rule, inputs, out, backward)


def _tracked(t):
    return t.tape is not None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g.reshape(shape)


def _binary_operands(a, b):
    if isinstance(a, Tensor):
        b = _const(b, a)
    elif isinstance(b, Tensor):
        a = _const(a, b)
    else:
        a, b = tensor(a), tensor(b)
    return a, b


# ------------------------------------------------------------------ elementwise


def add(a, b):
    a, b = _binary_operands(a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish("add", (a, b), out, backward)


def sub(a, b):
    a, b = _binary_operands(a, b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _finish("sub", (a, b), out, backward)


def mul(a, b):
    a, b = _binary_operands(a, b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if _tracked(a) else None
        gb = _unbroadcast(g * a.data, b.shape) if _tracked(b) else None
        return ga, gb

    return _finish("mul", (a, b), out, backward)


def div(a, b):
    a, b = _binary_operands(a, b)
    if np.any(b.data == 0):
        raise DataError("division by zero")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if _tracked(a) else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if _tracked(b) else None
        return ga, gb

    return _finish("div", (a, b), out, backward)


def exp(x):
    x = tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _finish("exp", (x,), out, backward)


def log(x):
    x = tensor(x)
    if np.any(x.data <= 0):
        raise DataError("log of a non-positive value")
    out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _finish("log", (x,), out, backward)


def log1p(x):
    """``log(1 + x)``, accurate for small ``x``."""
    x = tensor(x)
    if np.any(x.data <= -1):
        raise DataError("log1p of a value <= -1")
    out = np.log1p(x.data)

    def backward(g):
        return (g / (1.0 + x.data),)

    return _finish("log1p", (x,), out, backward)


def sqrt(x):
    x = tensor(x)
    if np.any(x.data < 0):
        raise DataError("sqrt of a negative value")
    out = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _finish("sqrt", (x,), out, backward)


def _relu_grad(mask, g):
    return g * mask


def relu(x):
    x = tensor(x)
    mask = x.data > 0
    out = x.data * mask

    def backward(g):
        return (_relu_grad(mask, g),)

    return _finish("relu", (x,), out, backward)


def _sigmoid_np(v):
    z = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(v.dtype, copy=False)


def sigmoid(x):
    x = tensor(x)
    out = _sigmoid_np(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _finish("sigmoid", (x,), out, backward)


def softplus(x):
    x = tensor(x)
    out = np.logaddexp(0.0, x.data).astype(x.dtype, copy=False)

    def backward(g):
        return (g * _sigmoid_np(x.data),)

    return _finish("softplus", (x,), out, backward)


# ------------------------------------------------------------------ structure


def matmul(a, b):
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2", axis=-1)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}", axis=-1)
    out = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if _tracked(a) else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if _tracked(b) else None
        return ga, gb

    return _finish("matmul", (a, b), out, backward)


def reshape(x, shape):
    x = tensor(x)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _finish("reshape", (x,), out, backward)


def transpose(x, axes):
    x = tensor(x)
    axes = tuple(axes)
    out = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _finish("transpose", (x,), out, backward)


def getitem(x, index):
    x = tensor(x)
    out = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _finish("getitem", (x,), np.array(out, copy=True), backward)


def concat(tensors, axis=0):
    tensors = [tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _finish("concat", tuple(tensors), out, backward)


def sum(x, axis=None, keepdims=False):
    x = tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _finish("sum", (x,), out, backward)


def mean(x, axis=None, keepdims=False):
    x = tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return _finish("mean", (x,), out, backward)


def pad_edge(x, pad):
    """Replicate-pad the two trailing axes by ``pad`` on every side."""
    x = tensor(x)
    h, w = x.shape[-2:]
    rows = np.clip(np.arange(-pad, h + pad), 0, h - 1)
    cols = np.clip(np.arange(-pad, w + pad), 0, w - 1)
    out = x.data[..., rows[:, None], cols[None, :]]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (Ellipsis, rows[:, None], cols[None, :]), g)
        return (gx,)

    return _finish("pad_edge", (x,), out, backward)


# ------------------------------------------------------------------ neural


def _check_rank(t, rank, what):
    if t.ndim != rank:
        raise DimensionError(f"{what} must have rank {rank}, got shape {t.shape}", axis=0)


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """2-D cross-correlation of ``(B, Cin, H, W)`` with ``(Cout, Cin/groups, kh, kw)``."""
    x = tensor(x)
    weight = _const(weight, x)
    _check_rank(x, 4, "conv2d input")
    _check_rank(weight, 4, "conv2d weight")
    b, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1 or cin % groups:
        raise ConfigurationError(f"groups={groups} does not divide {cin} input channels")
    if cout % groups:
        raise ConfigurationError(f"groups={groups} does not divide {cout} output channels")
    if cin_g * groups != cin:
        raise DimensionError(
            f"weight expects {cin_g * groups} input channels, input has {cin} (axis 1)", axis=1
        )
    if stride < 1 or padding < 0:
        raise ConfigurationError("stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp:
        raise DimensionError(f"kernel height {kh} exceeds padded input height {hp} (axis 2)", axis=2)
    if kw > wp:
        raise DimensionError(f"kernel width {kw} exceeds padded input width {wp} (axis 3)", axis=3)
    if bias is not None:
        bias = _const(bias, x)
        if bias.shape != (cout,):
            raise DimensionError(f"bias shape {bias.shape} != ({cout},)", axis=0)
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wd = weight.data.astype(x.dtype, copy=False)
    depthwise = groups == cin and cout == cin and cin_g == 1 and groups > 1
    if depthwise:
        out = kernels.depthwise_forward(xp, wd, stride, ho, wo)
        cols = None
    else:
        cols = []
        outs = []
        og = cout // groups
        for gi in range(groups):
            xs = xp if groups == 1 else xp[:, gi * cin_g : (gi + 1) * cin_g]
            c = kernels.im2col(xs, kh, kw, stride, ho, wo)
            cols.append(c)
            wm = wd[gi * og : (gi + 1) * og].reshape(og, -1)
            outs.append(c @ wm.T)
        o = outs[0] if groups == 1 else np.concatenate(outs, axis=1)
        out = o.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(x.dtype) if bias is not None else None
        need_x = _tracked(x)
        if depthwise:
            gxp, gw = kernels.depthwise_backward(xp, wd, np.ascontiguousarray(g), stride)
        else:
            og = cout // groups
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
            gws = []
            gxp = np.zeros(xp.shape, dtype=x.dtype) if need_x and groups > 1 else None
            for gi in range(groups):
                gg = g2[:, gi * og : (gi + 1) * og]
                gws.append((gg.T @ cols[gi]).reshape(og, cin_g, kh, kw))
                if need_x:
                    wm = wd[gi * og : (gi + 1) * og].reshape(og, -1)
                    part = kernels.col2im(gg @ wm, (b, cin_g, hp, wp), kh, kw, stride, ho, wo)
                    if groups == 1:
                        gxp = part
                    else:
                        gxp[:, gi * cin_g : (gi + 1) * cin_g] = part
            gw = gws[0] if groups == 1 else np.concatenate(gws, axis=0)
        gx = None
        if need_x:
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw.astype(weight.dtype, copy=False), gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _finish("conv2d", inputs, out, backward)


def linear(x, weight, bias=None):
    """``out[..., o] = sum_i x[..., i] * weight[o, i] + bias[o]``."""
    x = tensor(x)
    weight = _const(weight, x)
    _check_rank(weight, 2, "linear weight")
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear input has {x.shape[-1]} features, weight expects {weight.shape[1]} (axis {x.ndim - 1})",
            axis=x.ndim - 1,
        )
    if bias is not None:
        bias = _const(bias, x)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"bias shape {bias.shape} != ({weight.shape[0]},)", axis=0)
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if _tracked(x) else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        gb = g2.sum(axis=0, dtype=np.float64).astype(x.dtype) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _finish("linear", inputs, out, backward)


def softmax(x, axis=-1):
    x = tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for rank {x.ndim}", axis=axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = (e / e.sum(axis=axis, keepdims=True, dtype=np.float64)).astype(x.dtype)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True, dtype=np.float64)
        return ((out * (g - dot)).astype(x.dtype),)

    return _finish("softmax", (x,), out, backward)


def _norm_layout(x, mode, groups):
    """Return (view shape, reduction axes, parameter broadcast shape)."""
    if mode == "layer":
        return x.shape, (x.ndim - 1,), (1,) * (x.ndim - 1) + (x.shape[-1],)
    if x.ndim < 2:
        raise DimensionError(f"{mode} normalization needs a channel axis", axis=1)
    c = x.shape[1]
    pshape = (1, c) + (1,) * (x.ndim - 2)
    if mode == "batch":
        return x.shape, (0,) + tuple(range(2, x.ndim)), pshape
    if mode == "group":
        if groups < 1 or c % groups:
            raise ConfigurationError(f"{c} channels not divisible into {groups} groups")
        view = (x.shape[0], groups, c // groups) + x.shape[2:]
        return view, tuple(range(2, len(view))), pshape
    raise ConfigurationError(f"unknown normalization mode {mode!r}")


def normalize(x, mode, scale, shift, running_stats=None, groups=1, eps=_NORM_EPS):
    """Batch / layer / group normalization ``scale * (x - mu) / sqrt(var + eps) + shift``.

    In batch mode, ``running_stats=(mean, var)`` selects inference statistics.
    """
    x = tensor(x)
    scale, shift = _const(scale, x), _const(shift, x)
    view, axes, pshape = _norm_layout(x, mode, groups)
    channels = x.shape[-1] if mode == "layer" else x.shape[1]
    if scale.size != channels or shift.size != channels:
        raise DimensionError(
            f"scale/shift sizes {scale.size}/{shift.size} do not match {channels} channels", axis=1
        )
    sc = scale.data.reshape(pshape)
    sh = shift.data.reshape(pshape)
    xv = x.data.reshape(view)
    if running_stats is not None:
        if mode != "batch":
            raise UsageError("running statistics only apply to batch normalization")
        mu = np.asarray(running_stats[0], dtype=np.float64).reshape(pshape)
        var = np.asarray(running_stats[1], dtype=np.float64).reshape(pshape)
    else:
        mu = xv.mean(axis=axes, keepdims=True, dtype=np.float64)
        var = ((xv - mu) ** 2).mean(axis=axes, keepdims=True, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xv - mu) * inv).astype(x.dtype).reshape(x.shape)
    out = xhat * sc + sh
    param_axes = tuple(i for i, n in enumerate(pshape) if n == 1)
    count = int(np.prod([view[a] for a in axes]))

    def backward(g):
        gscale = (g * xhat).sum(axis=param_axes, dtype=np.float64).astype(x.dtype).reshape(scale.shape)
        gshift = g.sum(axis=param_axes, dtype=np.float64).astype(x.dtype).reshape(shift.shape)
        gx = None
        if _tracked(x):
            gxh = (g * sc).reshape(view)
            if running_stats is not None:
                gx = gxh * inv
            else:
                xh = xhat.reshape(view)
                m1 = gxh.sum(axis=axes, keepdims=True, dtype=np.float64) / count
                m2 = (gxh * xh).sum(axis=axes, keepdims=True, dtype=np.float64) / count
                gx = inv * (gxh - m1 - xh * m2)
            gx = gx.astype(x.dtype).reshape(x.shape)
        return gx, gscale, gshift

    return _finish(f"{mode}_norm", (x, scale, shift), out, backward)


def batch_moments(x):
    """Per-channel mean and unbiased variance of a ``(N, C, ...)`` array (float64)."""
    axes = (0,) + tuple(range(2, x.ndim))
    n = int(np.prod([x.shape[a] for a in axes]))
    mu = x.mean(axis=axes, dtype=np.float64)
    var = x.var(axis=axes, dtype=np.float64) * n / max(n - 1, 1)
    return mu, var


def avg_pool_axis(x, axis):
    """Mean over spatial axis ``"H"`` or ``"W"`` of a ``(B, C, H, W)`` tensor, kept as length 1."""
    x = tensor(x)
    _check_rank(x, 4, "avg_pool_axis input")
    if axis not in ("H", "W"):
        raise ConfigurationError(f"axis must be 'H' or 'W', got {axis!r}")
    return mean(x, axis=2 if axis == "H" else 3, keepdims=True)


def interpolation_matrix(n_in, n_out, dtype=np.float64):
    """Linear interpolation weights ``(n_out, n_in)``, half-pixel centers, no corner alignment."""
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        mat[o, i0] += 1.0 - frac
        mat[o, i1] += frac
    return mat.astype(dtype)


def bilinear_resize(x, out_h, out_w):
    x = tensor(x)
    _check_rank(x, 4, "bilinear_resize input")
    if out_h < 1 or out_w < 1:
        raise ConfigurationError("output size must be at least 1x1")
    h, w = x.shape[2:]
    ry = interpolation_matrix(h, out_h, x.dtype)
    rx = interpolation_matrix(w, out_w, x.dtype)
    out = ry @ (x.data @ rx.T)

    def backward(g):
        return ((ry.T @ g) @ rx,)

    return _finish("bilinear_resize", (x,), out, backward)


def rotate_pairs(x, sin, cos):
    """Rotate feature pairs ``(x[2k], x[2k+1])`` by the angles whose sin/cos are given.

    ``sin``/``cos`` broadcast against ``x[..., ::2]``.
    """
    x = tensor(x)
    if x.shape[-1] % 2:
        raise ConfigurationError(f"rotation needs an even feature size, got {x.shape[-1]}")
    s = np.asarray(sin, dtype=x.dtype)
    c = np.asarray(cos, dtype=x.dtype)
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, xe.shape[:-1] + (x.shape[-1],)), dtype=x.dtype)
    out[..., 0::2] = xe * c - xo * s
    out[..., 1::2] = xe * s + xo * c

    def backward(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * c + go * s
        gx[..., 1::2] = go * c - ge * s
        return (_unbroadcast(gx, x.shape),)

    return _finish("rotate_pairs", (x,), out, backward)


def cross_entropy(logits, labels, weights=None):
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``).

    Optional per-class ``weights`` give the weighted mean ``sum w_y nll / sum w_y``.
    """
    logits = tensor(logits)
    _check_rank(logits, 2, "logits")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} != ({n},)", axis=0)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"label outside [0, {k})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)[labels]
    total = w.sum()
    out = np.asarray(-(w * logp[np.arange(n), labels]).sum() / total, dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return ((p * (w[:, None] * float(g) / total)).astype(logits.dtype),)

    return _finish("cross_entropy", (logits,), out, backward)


def global_avg_pool(x):
    return mean(x, axis=(2, 3))


