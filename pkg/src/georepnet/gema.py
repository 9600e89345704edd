"""Geometry-enhanced multi-scale attention.

Two stages on the stage-1 feature map: geometry-aware self-attention whose
logits combine rotary-encoded query/key products with the depth decay mask,
then a grouped channel gate built from directional average pools.
"""

import math

import numpy as np

from . import ops
from .config import GEMAConfig
from .errors import ConfigurationError, DimensionError
from .nn import Module

GSA_PARAMS = ("ln_scale", "ln_shift", "wq", "wk", "wv", "dw_weight", "dw_bias", "wo", "wo_bias")
EMA_PARAMS = ("conv1x1", "conv3x3", "gn_scale", "gn_shift")


def rotary_transform(x, pe_sin, pe_cos):
    """Rotate consecutive feature pairs of ``x[..., tokens, head_dim]`` by position angles.

    ``pe_sin``/``pe_cos`` hold one row per token position, ``head_dim / 2`` columns.
    """
    x = ops.tensor(x)
    if x.shape[-1] % 2:
        raise ConfigurationError(f"head_dim must be even, got {x.shape[-1]}")
    if np.shape(pe_sin)[-1] * 2 != x.shape[-1]:
        raise DimensionError(
            f"positional basis has {np.shape(pe_sin)[-1]} frequencies for head_dim {x.shape[-1]}", axis=-1
        )
    return ops.rotate_pairs(x, pe_sin, pe_cos)


def _token_bases(prior):
    h1, w1 = prior.resolution
    rows, cols = np.divmod(np.arange(h1 * w1), w1)
    return (
        (prior.pe_sin_w[cols], prior.pe_cos_w[cols]),
        (prior.pe_sin_h[rows], prior.pe_cos_h[rows]),
    )


def _heads(t, b, n, heads, dim):
    return t.reshape(b, n, heads, dim).transpose(0, 2, 1, 3)


def attention(x, prior, params, cfg):
    """Core of :func:`cross_gsa`; returns ``(output, [logits...], [attention...])``.

    Logits and attention maps are exposed for invariant checks: full-2d gives
    one ``[B, heads, L, L]`` pair, axial-1d gives the row pass ``[B, heads,
    H1, W1, W1]`` then the column pass ``[B, heads, W1, H1, H1]``.
    """
    x = ops.tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"features must be (B, C, H, W), got {x.shape}", axis=0)
    b, c, h1, w1 = x.shape
    heads, dim = cfg.num_heads, cfg.head_dim
    if c != heads * dim:
        raise ConfigurationError(f"{c} channels != num_heads {heads} * head_dim {dim}")
    if tuple(prior.resolution) != (h1, w1):
        raise DimensionError(
            f"prior resolution {tuple(prior.resolution)} != feature resolution {(h1, w1)}", axis=2
        )
    n = h1 * w1
    scale = 1.0 / math.sqrt(dim)

    tokens = x.transpose(0, 2, 3, 1).reshape(b, n, c)
    normed = ops.normalize(tokens, "layer", params["ln_scale"], params["ln_shift"])
    q = _heads(ops.linear(normed, params["wq"]), b, n, heads, dim)
    k = _heads(ops.linear(normed, params["wk"]), b, n, heads, dim)
    v = ops.linear(normed, params["wv"]).reshape(b, h1, w1, c).transpose(0, 3, 1, 2)
    v = ops.conv2d(v, params["dw_weight"], params["dw_bias"], padding=1, groups=c)
    v = _heads(v.transpose(0, 2, 3, 1).reshape(b, n, c), b, n, heads, dim)

    if prior.formulation == "full-2d":
        (sx, cx), (sy, cy) = _token_bases(prior)
        qx, kx = rotary_transform(q, sx, cx), rotary_transform(k, sx, cx)
        qy, ky = rotary_transform(q, sy, cy), rotary_transform(k, sy, cy)
        logits = (qx @ kx.transpose(0, 1, 3, 2) + qy @ ky.transpose(0, 1, 3, 2)) * scale
        logits = logits + prior.decay_mask
        attn = ops.softmax(logits, axis=-1)
        out = attn @ v
        all_logits, all_attn = [logits], [attn]
    else:
        mask_h, mask_w = prior.decay_mask
        q5 = q.reshape(b, heads, h1, w1, dim)
        k5 = k.reshape(b, heads, h1, w1, dim)
        v5 = v.reshape(b, heads, h1, w1, dim)
        # along each row (width axis)
        qx = rotary_transform(q5, prior.pe_sin_w, prior.pe_cos_w)
        kx = rotary_transform(k5, prior.pe_sin_w, prior.pe_cos_w)
        lw = (qx @ kx.transpose(0, 1, 2, 4, 3)) * scale + _axial_bias(mask_w)
        aw = ops.softmax(lw, axis=-1)
        mid = (aw @ v5).transpose(0, 1, 3, 2, 4)
        # then along each column (height axis)
        qt, kt = q5.transpose(0, 1, 3, 2, 4), k5.transpose(0, 1, 3, 2, 4)
        qy = rotary_transform(qt, prior.pe_sin_h, prior.pe_cos_h)
        ky = rotary_transform(kt, prior.pe_sin_h, prior.pe_cos_h)
        lh = (qy @ ky.transpose(0, 1, 2, 4, 3)) * scale + _axial_bias(mask_h)
        ah = ops.softmax(lh, axis=-1)
        out = (ah @ mid).transpose(0, 1, 3, 2, 4).reshape(b, heads, n, dim)
        all_logits, all_attn = [lw, lh], [aw, ah]

    merged = out.transpose(0, 2, 1, 3).reshape(b, n, c)
    proj = ops.linear(merged, params["wo"], params["wo_bias"])
    result = x + proj.reshape(b, h1, w1, c).transpose(0, 3, 1, 2)
    return result, all_logits, all_attn


def _axial_bias(mask):
    mask = ops.tensor(mask)
    # [..., heads, n, n] -> [..., heads, 1, n, n] broadcasting over the other axis
    return mask.reshape(mask.shape[:-2] + (1,) + mask.shape[-2:])


def cross_gsa(x, prior, params, cfg):
    """Geometry-aware self-attention with pre-normalization and a residual: ``X + Wo(A V)``."""
    return attention(x, prior, params, cfg)[0]


def ema_attention(x, params, factor):
    """Grouped directional-pool gate: ``X * sigmoid(Z)``."""
    x = ops.tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"features must be (B, C, H, W), got {x.shape}", axis=0)
    b, c, h, w = x.shape
    if factor < 1 or c % factor:
        raise ConfigurationError(f"{c} channels not divisible by grouping factor {factor}")
    cg = c // factor
    g = x.reshape(b * factor, cg, h, w)
    xh = ops.avg_pool_axis(g, "W")
    xw = ops.avg_pool_axis(g, "H").transpose(0, 1, 3, 2)
    y = ops.conv2d(ops.concat([xh, xw], axis=2), params["conv1x1"])
    yh = y[:, :, :h, :]
    yw = y[:, :, h:, :].transpose(0, 1, 3, 2)
    z = ops.conv2d(ops.pad_edge(yh + yw, 1), params["conv3x3"])
    z = ops.normalize(z, "group", params["gn_scale"], params["gn_shift"], groups=cg)
    return (g * ops.sigmoid(z)).reshape(b, c, h, w)


def gema_forward(f1, prior, params, cfg):
    """Attention then gating; each stage is skipped when its toggle is off."""
    out = ops.tensor(f1)
    if cfg.enable_gsa:
        out = cross_gsa(out, prior, params, cfg)
    if cfg.enable_ema:
        out = ema_attention(out, params, cfg.ema_factor)
    return out


class GEMA(Module):
    def __init__(self, cfg, rng, dtype=np.float32):
        super().__init__()
        if not isinstance(cfg, GEMAConfig):
            raise ConfigurationError("cfg must be a GEMAConfig")
        self.cfg = cfg
        c = cfg.channels
        if cfg.enable_gsa:
            dirac = np.zeros((c, 1, 3, 3))
            dirac[:, 0, 1, 1] = 1.0
            self.add_param("ln_scale", np.ones(c, dtype=dtype))
            self.add_param("ln_shift", np.zeros(c, dtype=dtype))
            self.add_param("wq", (rng.standard_normal((c, c)) * 0.02).astype(dtype))
            self.add_param("wk", (rng.standard_normal((c, c)) * 0.02).astype(dtype))
            self.add_param("wv", (rng.standard_normal((c, c)) / np.sqrt(c)).astype(dtype))
            self.add_param("dw_weight", (dirac + 0.1 * rng.standard_normal(dirac.shape)).astype(dtype))
            self.add_param("dw_bias", np.zeros(c, dtype=dtype))
            self.add_param("wo", (rng.standard_normal((c, c)) / np.sqrt(c)).astype(dtype))
            self.add_param("wo_bias", np.zeros(c, dtype=dtype))
        if cfg.enable_ema:
            cg = c // cfg.ema_factor
            self.add_param("conv1x1", (rng.standard_normal((cg, cg, 1, 1)) / np.sqrt(cg)).astype(dtype))
            self.add_param("conv3x3", (rng.standard_normal((cg, cg, 3, 3)) * np.sqrt(2.0 / (9 * cg))).astype(dtype))
            self.add_param("gn_scale", np.ones(cg, dtype=dtype))
            self.add_param("gn_shift", np.zeros(cg, dtype=dtype))

    def forward(self, f1, prior, ctx):
        params = {k: ctx.param(self, k) for k in self._params}
        return gema_forward(f1, prior, params, self.cfg)
