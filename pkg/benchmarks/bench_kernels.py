"""Time the hot kernels and a full training step under both backends.

    python3 benchmarks/bench_kernels.py [--repeats 20]

Prints one canonical-JSON line per measurement and a closing summary with
the numba/numpy speedups. The first numba call of each kernel is compiled
before timing starts.
"""

import argparse
import time

import numpy as np

from georepnet import kernels, ops
from georepnet.config import RunConfig, canonical_json
from georepnet.nn import Context
from georepnet.repvgg import GeoRepNet
from georepnet.tensor import Tape, backward


def best_of(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_cases(rng):
    x = rng.standard_normal((16, 32, 18, 18)).astype(np.float32)
    w_dw = rng.standard_normal((32, 1, 3, 3)).astype(np.float32)
    g_dw = rng.standard_normal((16, 32, 16, 16)).astype(np.float32)
    cols = kernels.im2col(x, 3, 3, 1, 16, 16)
    return {
        "im2col": lambda: kernels.im2col(x, 3, 3, 1, 16, 16),
        "col2im": lambda: kernels.col2im(cols, x.shape, 3, 3, 1, 16, 16),
        "depthwise_forward": lambda: kernels.depthwise_forward(x, w_dw, 1, 16, 16),
        "depthwise_backward": lambda: kernels.depthwise_backward(x, w_dw, g_dw, 1),
    }


def train_step_case(rng):
    cfg = RunConfig().model
    model = GeoRepNet(cfg, seed=0)
    h, w = cfg.input_size
    rgb = rng.random((16, 3, h, w)).astype(np.float32)
    depth = (0.1 + 0.9 * rng.random((16, 1, h, w))).astype(np.float32)
    labels = np.arange(16) % cfg.num_classes

    def step():
        tape = Tape()
        ctx = Context(tape=tape, training=True, update_stats=False)
        backward(ops.cross_entropy(model.forward(rgb, depth, ctx=ctx), labels))

    return step


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    timings = {}
    for backend in ("numpy", "numba"):
        kernels.set_backend(backend)
        rng = np.random.default_rng(0)
        cases = kernel_cases(rng)
        cases["train_step_default_config"] = train_step_case(rng)
        for name, fn in cases.items():
            repeats = max(3, args.repeats // 5) if name.startswith("train") else args.repeats
            t = best_of(fn, repeats)
            timings.setdefault(name, {})[backend] = t
            print(canonical_json({"backend": backend, "case": name, "seconds": t}), flush=True)
    summary = {name: round(t["numpy"] / t["numba"], 3) for name, t in timings.items()}
    print(canonical_json({"speedup_numba_over_numpy": summary}))


if __name__ == "__main__":
    main()
