"""RepVGG blocks, structural re-parameterization and the Geo-RepNet model."""

import copy

import numpy as np

from . import ops
from .config import GeoRepNetConfig
from .dgpg import DGPG
from .errors import ConfigurationError, DataError, DimensionError, UsageError
from .gema import GEMA
from .nn import Context, Module, kaiming_normal
from .tensor import Tensor
from .tensorfile import Checkpoint

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
BRANCHES = ("rbr_3x3", "rbr_1x1", "rbr_id")


class RepVGGBlock(Module):
    """3x3-conv+BN, 1x1-conv+BN and (same shape only) BN-identity branches, summed then ReLU.

    After :func:`fuse_block` the same computation is a single 3x3 conv with bias.
    """

    def __init__(self, in_channels, out_channels, stride=1, rng=None, dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.has_identity = in_channels == out_channels and stride == 1
        self.fused = False
        rng = rng if rng is not None else np.random.default_rng(0)
        self.add_param("rbr_3x3.weight", kaiming_normal(rng, (out_channels, in_channels, 3, 3), dtype))
        self._add_bn("rbr_3x3", out_channels, dtype)
        self.add_param("rbr_1x1.weight", kaiming_normal(rng, (out_channels, in_channels, 1, 1), dtype))
        self._add_bn("rbr_1x1", out_channels, dtype)
        if self.has_identity:
            self._add_bn("rbr_id", out_channels, dtype)

    def _add_bn(self, branch, c, dtype):
        self.add_param(f"{branch}.bn.scale", np.ones(c, dtype=dtype))
        self.add_param(f"{branch}.bn.shift", np.zeros(c, dtype=dtype))
        self.add_buffer(f"{branch}.bn.running_mean", np.zeros(c, dtype=dtype))
        self.add_buffer(f"{branch}.bn.running_var", np.ones(c, dtype=dtype))

    @property
    def branch_count(self):
        if self.fused:
            return 1
        return 3 if self.has_identity else 2

    def _bn(self, x, branch, ctx):
        scale = ctx.param(self, f"{branch}.bn.scale")
        shift = ctx.param(self, f"{branch}.bn.shift")
        rm = self._buffers[f"{branch}.bn.running_mean"]
        rv = self._buffers[f"{branch}.bn.running_var"]
        if ctx.training:
            if ctx.update_stats:
                mu, var = ops.batch_moments(x.data)
                rm[...] = (1 - BN_MOMENTUM) * rm + BN_MOMENTUM * mu
                rv[...] = (1 - BN_MOMENTUM) * rv + BN_MOMENTUM * var
            return ops.normalize(x, "batch", scale, shift, eps=BN_EPS)
        return ops.normalize(x, "batch", scale, shift, running_stats=(rm, rv), eps=BN_EPS)

    def forward(self, x, ctx):
        return block_forward(x, self, ctx)


def block_forward(x, block, ctx):
    """Multi-branch: ``ReLU(BN(conv3x3 x) + BN(conv1x1 x) [+ BN(x)])``; fused: ``ReLU(conv3x3 x + b)``."""
    x = ops.tensor(x)
    if x.ndim != 4 or x.shape[1] != block.in_channels:
        raise DimensionError(
            f"block expects {block.in_channels} input channels, got shape {x.shape} (axis 1)", axis=1
        )
    ctx.counter["block_convs"] += block.branch_count
    if block.fused:
        if ctx.training:
            raise UsageError("a fused block cannot run in training mode")
        w = ctx.param(block, "fused.weight")
        b = ctx.param(block, "fused.bias")
        return ops.relu(ops.conv2d(x, w, b, stride=block.stride, padding=1))
    out = block._bn(ops.conv2d(x, ctx.param(block, "rbr_3x3.weight"), stride=block.stride, padding=1), "rbr_3x3", ctx)
    out = out + block._bn(ops.conv2d(x, ctx.param(block, "rbr_1x1.weight"), stride=block.stride), "rbr_1x1", ctx)
    if block.has_identity:
        out = out + block._bn(x, "rbr_id", ctx)
    return ops.relu(out)


def fold_bn(kernel, scale, shift, mean, var, eps=BN_EPS):
    """Fold inference batch norm into a preceding bias-free conv: ``(kernel * s, shift - mean * s)``."""
    s = np.asarray(scale, np.float64) / np.sqrt(np.asarray(var, np.float64) + eps)
    return np.asarray(kernel, np.float64) * s[:, None, None, None], np.asarray(shift, np.float64) - np.asarray(mean, np.float64) * s


def _branch_stats(block, branch):
    p, b = block._params, block._buffers
    return (
        p[f"{branch}.bn.scale"],
        p[f"{branch}.bn.shift"],
        b[f"{branch}.bn.running_mean"],
        b[f"{branch}.bn.running_var"],
    )


def fused_kernel_bias(block):
    """Equivalent single 3x3 kernel and bias of a multi-branch block, in float64."""
    p = block._params
    k3, b3 = fold_bn(p["rbr_3x3.weight"], *_branch_stats(block, "rbr_3x3"))
    k1 = np.zeros_like(k3)
    k1[:, :, 1:2, 1:2] = p["rbr_1x1.weight"]
    k1, b1 = fold_bn(k1, *_branch_stats(block, "rbr_1x1"))
    kernel, bias = k3 + k1, b3 + b1
    if block.has_identity:
        dirac = np.zeros_like(k3)
        idx = np.arange(block.out_channels)
        dirac[idx, idx, 1, 1] = 1.0
        kid, bid = fold_bn(dirac, *_branch_stats(block, "rbr_id"))
        kernel, bias = kernel + kid, bias + bid
    return kernel, bias


def fuse_block(block):
    """Return a new block in fused mode computing the same inference function."""
    if block.fused:
        raise UsageError("block is already fused")
    dtype = block._params["rbr_3x3.weight"].dtype
    kernel, bias = fused_kernel_bias(block)
    out = copy.copy(block)
    out._params = {"fused.weight": kernel.astype(dtype), "fused.bias": bias.astype(dtype)}
    out._buffers = {}
    out._children = {}
    out.fused = True
    return out


class GeoRepNet(Module):
    """Stem, four RepVGG stages, GEMA after stage 1, global pool and a linear head."""

    def __init__(self, config, seed=0, dtype=np.float32):
        super().__init__()
        if not isinstance(config, GeoRepNetConfig):
            raise ConfigurationError("config must be a GeoRepNetConfig")
        self.config = config
        self.dtype = np.dtype(dtype)
        self.fused = False
        backbone_ss, gema_ss, head_ss = np.random.SeedSequence(seed).spawn(3)
        rng = np.random.default_rng(backbone_ss)
        widths, depths = config.stage_widths, config.stage_depths
        self.blocks = []  # (stage index, block); stage 0 is the stem
        self._add_block(0, "stem", RepVGGBlock(3, widths[0], 2, rng, dtype))
        cin = widths[0]
        for s, (w, d) in enumerate(zip(widths, depths), start=1):
            for i in range(d):
                self._add_block(s, f"stage{s}.{i}", RepVGGBlock(cin, w, 2 if i == 0 else 1, rng, dtype))
                cin = w
        hrng = np.random.default_rng(head_ss)
        self.add_param("head.weight", (hrng.standard_normal((config.num_classes, cin)) * 0.01).astype(dtype))
        self.add_param("head.bias", np.zeros(config.num_classes, dtype=dtype))
        self.gema = None
        self.dgpg = None
        if config.uses_gema:
            grng = np.random.default_rng(gema_ss)
            self.gema = self.add_child("gema", GEMA(config.gema, grng, dtype))
        if config.enable_gsa:
            self.dgpg = self.add_child("dgpg", DGPG(config.dgpg, dtype))
        self.assign_names()

    def _add_block(self, stage, name, block):
        self.add_child(name, block)
        self.blocks.append((stage, name))

    def block(self, name):
        return self._children[name]

    def iter_blocks(self):
        for stage, name in self.blocks:
            yield stage, name, self._children[name]

    # ------------------------------------------------------------ forward

    def _check_inputs(self, rgb, depth):
        rgb = ops.tensor(rgb, self.dtype)
        depth = np.asarray(depth.data if isinstance(depth, Tensor) else depth)
        h, w = self.config.input_size
        if rgb.ndim != 4 or rgb.shape[1] != 3:
            raise DimensionError(f"rgb must be (B, 3, H, W), got {rgb.shape}", axis=1)
        if rgb.shape[2:] != (h, w):
            raise DimensionError(f"rgb spatial size {rgb.shape[2:]} != configured {(h, w)}", axis=2)
        if depth.shape != (rgb.shape[0], 1, h, w):
            raise DimensionError(f"depth must be {(rgb.shape[0], 1, h, w)}, got {depth.shape}", axis=0)
        if not np.all(np.isfinite(rgb.data)):
            raise DataError("rgb contains non-finite values")
        if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
            raise DataError("depth must be finite and strictly positive")
        return rgb, depth

    def features(self, rgb, depth, ctx):
        """Stage-1 features after the geometry-aware enhancement (``f1_hat``)."""
        x = rgb
        for stage, _, blk in self.iter_blocks():
            if stage > 1:
                break
            x = blk.forward(x, ctx)
        if self.gema is not None:
            prior = None
            if self.dgpg is not None:
                h1, w1 = x.shape[2:]
                prior = self.dgpg.forward(depth, h1, w1, ctx, use_depth=self.config.enable_dgpg)
            x = self.gema.forward(x, prior, ctx)
        return x

    def forward(self, rgb, depth, training=False, tape=None, ctx=None):
        """Logits ``[B, num_classes]``."""
        ctx = ctx or Context(tape=tape, training=training)
        rgb, depth = self._check_inputs(rgb, depth)
        x = self.features(rgb, depth, ctx)
        for stage, _, blk in self.iter_blocks():
            if stage > 1:
                x = blk.forward(x, ctx)
        pooled = ops.global_avg_pool(x)
        return ops.linear(pooled, ctx.param(self, "head.weight"), ctx.param(self, "head.bias"))

    __call__ = forward

    # ------------------------------------------------------------ bookkeeping

    def block_conv_count(self):
        """Structural per-forward branch-conv invocations (identity branch counts as one)."""
        return sum(blk.branch_count for _, _, blk in self.iter_blocks())

    def project_parameters(self):
        if self.dgpg is not None:
            self.dgpg.project()

    def to_checkpoint(self, extra=None):
        return Checkpoint(
            config=self.config,
            tensors={k: np.array(v, copy=True) for k, v in self.state_dict().items()},
            fused=self.fused,
            extra=dict(extra or {}),
        )

    @classmethod
    def from_checkpoint(cls, ckpt):
        dtypes = {v.dtype for v in ckpt.tensors.values()}
        dtype = dtypes.pop() if len(dtypes) == 1 else np.float32
        model = cls(ckpt.config, seed=0, dtype=dtype)
        if ckpt.fused:
            model = reparameterize_model(model)
        model.load_state(ckpt.tensors)
        return model

    def load_state(self, tensors):
        expected = self.state_dict()
        missing = sorted(set(expected) - set(tensors))
        unexpected = sorted(set(tensors) - set(expected))
        if missing or unexpected:
            raise ConfigurationError(f"checkpoint mismatch: missing {missing}, unexpected {unexpected}")
        for m in self.modules():
            for store in (m._params, m._buffers):
                for k in store:
                    src = tensors[m.path + k]
                    if src.shape != store[k].shape:
                        raise DimensionError(f"{m.path + k}: shape {src.shape} != {store[k].shape}")
                    store[k][...] = src
        return self


def reparameterize_model(model):
    """Copy of ``model`` with every RepVGG block fused; other parameters are copied unchanged."""
    if model.fused:
        raise UsageError("model is already re-parameterized")
    out = copy.deepcopy(model)
    for _, name, blk in out.iter_blocks():
        out._children[name] = fuse_block(blk)
    out.fused = True
    out.assign_names()
    return out
