"""Adam with cosine annealing, the training loop, evaluation and gradient checks."""

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .config import GeoRepNetConfig, TrainConfig, micro_config
from .data import CONFUSABLE_PAIRS, ArrayDataset
from .errors import DimensionError, NonFiniteError, UsageError
from .gradcheck import STEP, check_gradients
from .metrics import build_report, pair_scores
from .nn import Context
from .repvgg import GeoRepNet
from .tensor import Tape, Tensor, backward

cross_entropy = ops.cross_entropy

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


def cosine_lr(t, T, lr_max, lr_min=0.0):
    if T < 1:
        raise UsageError(f"total steps must be >= 1, got {T}")
    if not 0 <= t <= T:
        raise UsageError(f"step {t} outside [0, {T}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / T))


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state, lr, beta1=BETA1, beta2=BETA2, eps=ADAM_EPS):
    """Bias-corrected Adam; updates the arrays in ``params`` in place."""
    if not lr > 0:
        raise UsageError(f"learning rate must be > 0, got {lr}")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads[name]
        g = np.asarray(g.data if isinstance(g, Tensor) else g)
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        g = g.astype(np.float64)
        m = state.m.setdefault(name, np.zeros(p.shape))
        v = state.v.setdefault(name, np.zeros(p.shape))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


def class_weights(labels, num_classes):
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    w = np.where(counts > 0, counts.sum() / np.maximum(counts, 1) / num_classes, 0.0)
    return w


def train(model, dataset, cfg, log=None):
    """Train ``model`` in place; return ``(checkpoint, history)``.

    Deterministic for a given ``cfg.seed``: the epoch permutations come from
    one generator seeded by it and nothing else draws randomness.
    """
    if not isinstance(cfg, TrainConfig):
        raise UsageError("cfg must be a TrainConfig")
    n = len(dataset)
    if n == 0:
        raise UsageError("cannot train on an empty dataset")
    if model.fused:
        raise UsageError("a re-parameterized model cannot be trained")
    k = model.config.num_classes
    weights = class_weights(dataset.labels, k) if cfg.class_weighting else None
    rng = np.random.default_rng(cfg.seed)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * per_epoch
    params = model.named_parameters()
    state = OptimState()
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        lr = cosine_lr(step, total, cfg.base_lr, cfg.lr_min)
        for b in range(per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            lr = cosine_lr(step, total, cfg.base_lr, cfg.lr_min)
            tape = Tape()
            ctx = Context(tape=tape, training=True)
            try:
                logits = model.forward(dataset.rgb[idx], dataset.depth[idx], ctx=ctx)
                loss = cross_entropy(logits, dataset.labels[idx], weights)
                grads = backward(loss)
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch}, batch {b}: {exc}", index=b) from exc
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteError(f"epoch {epoch}, batch {b}: loss is {value}", index=b)
            adam_step(params, {k_: grads[k_] for k_ in params}, state, lr)
            model.project_parameters()
            loss_sum += value * len(idx)
            correct += int(np.sum(logits.data.argmax(axis=1) == dataset.labels[idx]))
            step += 1
        record = {"epoch": epoch, "loss": loss_sum / n, "train_accuracy": correct / n, "lr": lr}
        history.append(record)
        if log is not None:
            log(record)
    return model.to_checkpoint(extra={"train": cfg.__dict__.copy(), "steps": step}), history


def predict_logits(model, dataset, batch_size=64):
    out = []
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        out.append(model.forward(dataset.rgb[sl], dataset.depth[sl]).data.astype(np.float64))
    return np.concatenate(out, axis=0)


def evaluate(model, dataset, batch_size=64):
    """Inference-mode metrics; ``extra`` carries confusable-pair accuracies."""
    if len(dataset) == 0:
        raise UsageError("cannot evaluate an empty dataset")
    if dataset.labels.max() >= model.config.num_classes:
        raise UsageError("dataset labels exceed the model's class count")
    logits = predict_logits(model, dataset, batch_size)
    report = build_report(logits, dataset.labels, model.config.num_classes)
    raw, balanced = pair_scores(dataset.labels, logits.argmax(axis=1), CONFUSABLE_PAIRS)
    report.extra = {"pair_accuracy": raw, "pair_balanced_accuracy": balanced}
    return report


def gradient_check(model_config=None, tolerance=1e-4, seed=0, batch=4, step=STEP):
    """Finite-difference check of every parameter group of a float64 model.

    A batch of at least 3 keeps the 1x1 deepest stage away from the exact
    ReLU kink that two-sample batch norm produces.
    """
    cfg = model_config or micro_config()
    if not isinstance(cfg, GeoRepNetConfig):
        raise UsageError("model_config must be a GeoRepNetConfig")
    model = GeoRepNet(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    h, w = cfg.input_size
    rgb = rng.random((batch, 3, h, w))
    depth = 0.1 + 0.9 * rng.random((batch, 1, h, w))
    labels = np.arange(batch) % cfg.num_classes

    def loss_fn(tape):
        ctx = Context(tape=tape, training=True, update_stats=False)
        return cross_entropy(model.forward(rgb, depth, ctx=ctx), labels)

    groups = check_gradients(loss_fn, model.named_parameters(), step=step, seed=seed)
    groups = {k: float(v) for k, v in sorted(groups.items())}
    worst = max(groups.values())
    return {"groups": groups, "max_error": worst, "tolerance": tolerance, "passed": worst <= tolerance}
