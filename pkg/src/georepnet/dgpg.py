"""Depth-guided geometric priors.

A depth map becomes two things consumed by the attention stage: per-axis
angular bases for rotary encoding, and per-head additive decay masks that
attenuate attention between positions far apart in the image plane or in
depth.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .config import DGPGConfig
from .errors import ConfigurationError, DataError, DimensionError
from .nn import Module
from .tensor import Tensor

FREQ_BASE = 10000.0
LN2 = math.log(2.0)


@dataclass
class GeometricPrior:
    pe_sin_h: np.ndarray
    pe_cos_h: np.ndarray
    pe_sin_w: np.ndarray
    pe_cos_w: np.ndarray
    # full-2d: Tensor [..., heads, L, L]; axial-1d: (mask_h [..., heads, H1, H1], mask_w [..., heads, W1, W1])
    decay_mask: object
    resolution: tuple
    formulation: str = "full-2d"


def decay_factor(h, cfg):
    """``log(1 - 2**-(lambda0 + gamma * h / H))`` for head ``h``.

    ``h == num_heads`` is accepted as the closed end of the head ladder.
    """
    if not 0 <= h <= cfg.num_heads:
        raise ConfigurationError(f"head index {h} outside [0, {cfg.num_heads}]")
    if not cfg.lambda0 > 0 or not cfg.gamma >= 0:
        raise ConfigurationError("decay needs lambda0 > 0 and gamma >= 0")
    return math.log1p(-(2.0 ** -(cfg.lambda0 + cfg.gamma * h / cfg.num_heads)))


def decay_factors(lambda0, gamma, num_heads):
    """Differentiable per-head decays, shape ``(num_heads,)``."""
    lambda0, gamma = ops.tensor(lambda0), ops.tensor(gamma)
    if not np.all(lambda0.data > 0) or not np.all(gamma.data >= 0):
        raise ConfigurationError(
            f"decay needs lambda0 > 0 and gamma >= 0, got {float(lambda0.data)}, {float(gamma.data)}"
        )
    ratio = np.arange(num_heads, dtype=lambda0.dtype) / num_heads
    exponent = lambda0 + gamma * ratio
    return ops.log1p(-ops.exp(exponent * -LN2))


def frequencies(freq_count):
    k = np.arange(freq_count, dtype=np.float64)
    return FREQ_BASE ** (-2.0 * k / (2.0 * freq_count))


def positional_encoding(axis_length, freq_count):
    """``(sin, cos)`` tables of shape ``(axis_length, freq_count)`` at angles ``i * omega_k``."""
    if axis_length < 1 or freq_count < 1:
        raise ConfigurationError("axis_length and freq_count must be >= 1")
    angles = np.arange(axis_length, dtype=np.float64)[:, None] * frequencies(freq_count)[None, :]
    return np.sin(angles), np.cos(angles)


def _validate_depth(depth):
    if not np.all(np.isfinite(depth)):
        raise DataError("depth map contains non-finite values")
    if np.any(depth <= 0):
        raise DataError("depth map must be strictly positive")


def position_distance_matrix(h1, w1, formulation="full-2d"):
    """Euclidean grid distance between flattened positions, or per-axis index gaps."""
    if formulation == "full-2d":
        r, c = np.divmod(np.arange(h1 * w1), w1)
        return np.sqrt((r[:, None] - r[None, :]) ** 2 + (c[:, None] - c[None, :]) ** 2.0)
    rh, rw = np.arange(h1, dtype=np.float64), np.arange(w1, dtype=np.float64)
    return np.abs(rh[:, None] - rh[None, :]), np.abs(rw[:, None] - rw[None, :])


def depth_distance_matrix(depth, formulation="full-2d"):
    """Pairwise absolute depth differences of a ``(..., H1, W1)`` depth map.

    full-2d returns ``(..., L, L)`` over flattened positions; axial-1d returns
    ``(rows, cols)`` built from row-mean and column-mean depth.
    """
    depth = np.asarray(depth, dtype=np.float64)
    _validate_depth(depth)
    if formulation == "full-2d":
        flat = depth.reshape(depth.shape[:-2] + (-1,))
        return np.abs(flat[..., :, None] - flat[..., None, :])
    if formulation == "axial-1d":
        rows = depth.mean(axis=-1)
        cols = depth.mean(axis=-2)
        return (
            np.abs(rows[..., :, None] - rows[..., None, :]),
            np.abs(cols[..., :, None] - cols[..., None, :]),
        )
    raise ConfigurationError(f"unknown formulation {formulation!r}")


def _fusion_weights(w1_raw, w2_raw):
    return ops.softplus(w1_raw), ops.softplus(w2_raw)


def geometry_mask(pos_dist, depth_dist, decay, w1, w2):
    """``decay[h] * (w1 * pos_dist + w2 * depth_dist)`` with a head axis before the last two.

    ``depth_dist=None`` drops the depth term.
    """
    decay = ops.tensor(decay)
    pos = np.asarray(pos_dist)
    if pos.shape[-1] != pos.shape[-2]:
        raise DimensionError(f"distance matrices must be square, got {pos.shape}", axis=-1)
    inner = ops.mul(w1, ops.tensor(pos, decay.dtype))
    if depth_dist is not None:
        dd = np.asarray(depth_dist)
        if dd.shape[-2:] != pos.shape[-2:]:
            raise DimensionError(
                f"position distances {pos.shape} and depth distances {dd.shape} disagree", axis=-1
            )
        inner = inner + ops.mul(w2, ops.tensor(dd, decay.dtype))
    n = pos.shape[-1]
    inner = inner.reshape(inner.shape[:-2] + (1, n, n))
    return inner * decay.reshape((decay.shape[0], 1, 1))


def _scalars(cfg, params):
    if params is None:
        return tuple(Tensor(np.asarray(getattr(cfg, k), dtype=np.float64)) for k in DGPG_PARAM_NAMES)
    return tuple(params[k] for k in DGPG_PARAM_NAMES)


DGPG_PARAM_NAMES = ("lambda0", "gamma", "w1_raw", "w2_raw")


def resize_depth(depth, h1, w1):
    """Bring ``(H, W)``, ``(B, H, W)`` or ``(B, 1, H, W)`` depth to ``(..., h1, w1)``."""
    arr = np.asarray(depth.data if isinstance(depth, Tensor) else depth, dtype=np.float64)
    _validate_depth(arr)
    if arr.ndim == 2:
        lead = ()
        arr4 = arr[None, None]
    elif arr.ndim == 3:
        lead = arr.shape[:1]
        arr4 = arr[:, None]
    elif arr.ndim == 4 and arr.shape[1] == 1:
        lead = arr.shape[:1]
        arr4 = arr
    else:
        raise DimensionError(f"depth must be (H,W), (B,H,W) or (B,1,H,W), got {arr.shape}", axis=0)
    out = ops.bilinear_resize(arr4, h1, w1).data
    return out.reshape(lead + (h1, w1))


def generate_priors(depth, h1, w1, cfg, params=None, use_depth=True, dtype=None):
    """Resize depth to ``(h1, w1)`` and build the :class:`GeometricPrior`.

    ``params`` optionally maps the learnable scalar names to tape tensors;
    otherwise the config values are used. ``use_depth=False`` gives the
    position-only prior.
    """
    if not isinstance(cfg, DGPGConfig):
        raise ConfigurationError("cfg must be a DGPGConfig")
    lambda0, gamma, w1_raw, w2_raw = _scalars(cfg, params)
    dtype = dtype or lambda0.dtype
    sin_h, cos_h = positional_encoding(h1, cfg.freq_count)
    sin_w, cos_w = positional_encoding(w1, cfg.freq_count)
    decay = decay_factors(lambda0, gamma, cfg.num_heads)
    wa, wb = _fusion_weights(w1_raw, w2_raw)
    resized = resize_depth(depth, h1, w1) if use_depth else None
    if cfg.formulation == "full-2d":
        pos = position_distance_matrix(h1, w1, "full-2d").astype(dtype)
        dd = depth_distance_matrix(resized, "full-2d").astype(dtype) if use_depth else None
        mask = geometry_mask(pos, dd, decay, wa, wb)
    else:
        pos_h, pos_w = position_distance_matrix(h1, w1, "axial-1d")
        if use_depth:
            dd_h, dd_w = depth_distance_matrix(resized, "axial-1d")
            dd_h, dd_w = dd_h.astype(dtype), dd_w.astype(dtype)
        else:
            dd_h = dd_w = None
        mask = (
            geometry_mask(pos_h.astype(dtype), dd_h, decay, wa, wb),
            geometry_mask(pos_w.astype(dtype), dd_w, decay, wa, wb),
        )
    return GeometricPrior(
        pe_sin_h=sin_h.astype(dtype),
        pe_cos_h=cos_h.astype(dtype),
        pe_sin_w=sin_w.astype(dtype),
        pe_cos_w=cos_w.astype(dtype),
        decay_mask=mask,
        resolution=(h1, w1),
        formulation=cfg.formulation,
    )


class DGPG(Module):
    """Learnable prior scalars ``lambda0, gamma, w1_raw, w2_raw``."""

    def __init__(self, cfg, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        for name in DGPG_PARAM_NAMES:
            self.add_param(name, np.asarray(getattr(cfg, name), dtype=dtype))

    def forward(self, depth, h1, w1, ctx, use_depth=True):
        params = {k: ctx.param(self, k) for k in DGPG_PARAM_NAMES}
        return generate_priors(depth, h1, w1, self.cfg, params=params, use_depth=use_depth)

    def project(self):
        """Clamp the scalars back into the region where the decay is defined."""
        lam = self._params["lambda0"]
        lam[...] = np.maximum(lam, 1e-3)
        gam = self._params["gamma"]
        gam[...] = np.maximum(gam, 0.0)
