"""Central finite-difference gradient checking."""

import numpy as np

from .tensor import Tape, backward

STEP = 1e-5


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def _loss_value(loss_fn):
    return float(loss_fn(Tape()).data)


def check_gradients(loss_fn, params, step=STEP, elementwise_limit=16, top_k=3, n_directions=2, seed=0):
    """Compare tape gradients of ``loss_fn`` with central differences.

    ``loss_fn(tape)`` must build a scalar loss, registering every entry of
    ``params`` (name -> float64 array) through ``tape.param``. Arrays are
    perturbed in place and restored.

    Small parameter groups are checked entry by entry. Larger groups are
    checked on their ``top_k`` largest-gradient entries and along directional
    derivatives: the gradient direction itself plus ``n_directions``
    positively reweighted variants of it, which keeps the projected slope
    well above finite-difference roundoff. Returns ``{name: worst relative
    error}``.
    """
    rng = np.random.default_rng(seed)
    tape = Tape()
    grads = backward(loss_fn(tape))
    report = {}
    for name, arr in params.items():
        g = grads[name].data.astype(np.float64).reshape(-1)
        flat = arr.reshape(-1)
        worst = 0.0
        if arr.size <= elementwise_limit:
            entries = range(arr.size)
        else:
            entries = np.argsort(-np.abs(g), kind="stable")[:top_k]
        for e in entries:
            orig = flat[e]
            flat[e] = orig + step
            up = _loss_value(loss_fn)
            flat[e] = orig - step
            down = _loss_value(loss_fn)
            flat[e] = orig
            worst = max(worst, relative_error(g[e], (up - down) / (2 * step)))
        if arr.size > elementwise_limit:
            norm = np.linalg.norm(g)
            directions = []
            if norm > 0:
                directions.append(g / norm)
                for _ in range(n_directions):
                    u = g * rng.uniform(0.0, 2.0, size=g.shape)
                    directions.append(u / np.linalg.norm(u))
            else:
                u = rng.standard_normal(g.shape)
                directions.append(u / np.linalg.norm(u))
            base = flat.copy()
            for u in directions:
                flat[:] = base + step * u
                up = _loss_value(loss_fn)
                flat[:] = base - step * u
                down = _loss_value(loss_fn)
                flat[:] = base
                worst = max(worst, relative_error(float(g @ u), (up - down) / (2 * step)))
        report[name] = worst
    return report
