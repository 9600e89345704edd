"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` or ``python3 tests/test_acceptance.py``.
The lines are echoed live and repeated in the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from conftest import CONFIGS
from georepnet import dgpg, gema
from georepnet.config import DGPGConfig, GEMAConfig, RunConfig, TrainConfig, micro_config
from georepnet.data import DEFAULT_TRAIN_COUNTS, TABLE_TEST_COUNTS, ArrayDataset, generate_dataset, scaled_counts
from georepnet.errors import FormatError
from georepnet.metrics import accuracy, auc_ovr, binary_auc, macro_f1
from georepnet.nn import Context
from georepnet.repvgg import GeoRepNet, RepVGGBlock, block_forward, fuse_block, reparameterize_model
from georepnet.tensorfile import decode_tensor, encode_tensor, read_tensor, write_tensor
from georepnet.train import evaluate, gradient_check, train
from oracles import brute_auc_ovr, brute_macro_f1
from test_repvgg import randomize_bn

RESULTS = []
CASES = 200
SIZE = (32, 32)


def record(capsys, name, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    RESULTS.append(line)
    with capsys.disabled():
        print("\n" + line, flush=True)
    assert passed, line


# ---------------------------------------------------------------- fusion


def test_fusion_equivalence_block(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {np.float32: 0.0, np.float64: 0.0}
    for _ in range(1000):
        cin, cout = rng.integers(1, 9, size=2)
        if rng.random() < 0.4:
            cout = cin
        stride = int(rng.integers(1, 3))
        blk = RepVGGBlock(int(cin), int(cout), stride, rng, np.float64)
        randomize_bn(blk, rng)
        x = rng.standard_normal((int(rng.integers(1, 4)), int(cin), *rng.integers(3, 9, size=2)))
        for dtype in worst:
            b = blk if dtype is np.float64 else _cast_block(blk, dtype)
            xi = x.astype(dtype)
            ref = block_forward(xi, b, Context()).data
            got = block_forward(xi, fuse_block(b), Context()).data
            worst[dtype] = max(worst[dtype], float(np.max(np.abs(ref.astype(np.float64) - got))))
    elapsed = time.perf_counter() - start
    ok = worst[np.float32] <= 1e-4 and worst[np.float64] <= 1e-8 and elapsed <= 60
    record(
        capsys,
        "fusion equivalence (block)",
        ok,
        f"1000 blocks, max |diff| single {worst[np.float32]:.2e} (<=1e-4), double {worst[np.float64]:.2e} (<=1e-8), {elapsed:.1f}s",
    )


def _cast_block(blk, dtype):
    out = RepVGGBlock(blk.in_channels, blk.out_channels, blk.stride, dtype=dtype)
    for store, src in ((out._params, blk._params), (out._buffers, blk._buffers)):
        for k in store:
            store[k] = src[k].astype(dtype)
    return out


def test_fusion_equivalence_model(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    model = GeoRepNet(micro_config(), seed=0)
    randomize_bn(model, rng)
    fused = reparameterize_model(model)
    worst = 0.0
    for _ in range(20):
        rgb = rng.random((1, 3, *SIZE)).astype(np.float32)
        depth = (0.05 + 0.95 * rng.random((1, 1, *SIZE))).astype(np.float32)
        a = model.forward(rgb, depth).data.astype(np.float64)
        b = fused.forward(rgb, depth).data.astype(np.float64)
        worst = max(worst, float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-12)))
    counts = model.block_conv_count(), fused.block_conv_count()
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-3 and counts[1] < counts[0] and elapsed <= 60
    record(
        capsys,
        "fusion equivalence (model)",
        ok,
        f"20 RGB-D pairs, max relative logit diff {worst:.2e} (<=1e-3), block convs {counts[0]} -> {counts[1]}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------- gradients


def test_gradient_integrity(capsys):
    start = time.perf_counter()
    report = gradient_check(micro_config(), tolerance=1e-4)
    elapsed = time.perf_counter() - start
    groups = report["groups"]
    required = ("dgpg.lambda0", "dgpg.gamma", "dgpg.w1_raw", "dgpg.w2_raw", "gema.wq", "gema.wk", "gema.wo",
                "gema.conv1x1", "gema.conv3x3")
    covered = all(any(g.startswith(r) for g in groups) for r in required)
    worst_group = max(groups, key=groups.get)
    ok = report["passed"] and covered and elapsed <= 600
    record(
        capsys,
        "gradient integrity",
        ok,
        f"{len(groups)} groups, worst {report['max_error']:.2e} at {worst_group} (<=1e-4), "
        f"prior/attention/EMA groups present={covered}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------- geometry invariants


def _decay_cases(rng):
    bad = 0
    for _ in range(CASES):
        cfg = DGPGConfig(
            num_heads=int(rng.integers(1, 13)), lambda0=float(rng.uniform(0.05, 20)), gamma=float(rng.uniform(0, 10))
        )
        vals = [dgpg.decay_factor(h, cfg) for h in range(cfg.num_heads + 1)]
        vec = dgpg.decay_factors(cfg.lambda0, cfg.gamma, cfg.num_heads).data
        bad += not (all(v < 0 for v in vals) and all(b >= a for a, b in zip(vals, vals[1:])))
        bad += not np.allclose(vec, vals[:-1], rtol=1e-12, atol=0)
    return bad


def _random_prior(rng, formulation, h1, w1, heads=2, freq=2, depth=None):
    cfg = DGPGConfig(
        num_heads=heads, freq_count=freq, formulation=formulation,
        lambda0=float(rng.uniform(0.5, 8)), gamma=float(rng.uniform(0, 4)),
        w1_raw=float(rng.normal()), w2_raw=float(rng.normal()),
    )
    if depth is None:
        depth = rng.uniform(0.01, 1, (int(rng.integers(1, 3)), 1, h1 * int(rng.integers(1, 4)), w1 * int(rng.integers(1, 4))))
    return dgpg.generate_priors(depth, h1, w1, cfg)


def _mask_cases(rng):
    bad = 0
    for i in range(CASES):
        formulation = ("full-2d", "axial-1d")[i % 2]
        prior = _random_prior(rng, formulation, int(rng.integers(1, 7)), int(rng.integers(1, 7)))
        masks = [prior.decay_mask] if formulation == "full-2d" else list(prior.decay_mask)
        for m in masks:
            m = m.data
            diag = np.diagonal(m, axis1=-2, axis2=-1)
            bad += not (np.array_equal(m, np.swapaxes(m, -1, -2)) and np.all(diag == 0) and np.all(m <= 0))
    return bad


def _params(cfg, rng):
    module = gema.GEMA(cfg, rng, np.float64)
    p = {k: v.copy() for k, v in module._params.items()}
    for k in ("wq", "wk"):
        p[k] = rng.standard_normal(p[k].shape) * rng.uniform(0.1, 3)
    return p


def _depth_monotone_cases(rng):
    bad = 0
    cfg = GEMAConfig(num_heads=2, head_dim=4)
    for i in range(CASES):
        h1, w1 = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        params = _params(cfg, rng)
        x = rng.standard_normal((1, 8, h1, w1))
        depth = rng.uniform(0.3, 0.7, (1, 1, h1, w1))
        a, b = rng.choice(h1 * w1, size=2, replace=False)
        dgpg_seed = int(rng.integers(2**31))
        logits = []
        for gap in (0.0, 0.05, 0.15, 0.3):
            d = depth.copy()
            d.reshape(-1)[b] = d.reshape(-1)[a] + gap
            prior = _random_prior(np.random.default_rng(dgpg_seed), "full-2d", h1, w1, depth=d)
            logits.append(gema.attention(x, prior, params, cfg)[1][0].data[0, :, a, b])
        bad += not all(np.all(n < p) for p, n in zip(logits, logits[1:]))
    return bad


def _rotary_cases(rng):
    worst = 0.0
    for _ in range(CASES):
        f = int(rng.integers(1, 9))
        i, j = rng.integers(0, 64, size=2)
        q, k = rng.standard_normal(2 * f), rng.standard_normal(2 * f)

        def rot(v, pos):
            ang = pos * dgpg.frequencies(f)
            return gema.rotary_transform(v[None], np.sin(ang)[None], np.cos(ang)[None]).data[0]

        worst = max(worst, abs(rot(q, i) @ rot(k, j) - q @ rot(k, j - i)))
    return worst


def _row_sum_cases(rng):
    worst = 0.0
    for i in range(CASES):
        heads, dim = int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4))
        cfg = GEMAConfig(num_heads=heads, head_dim=dim, enable_ema=False)
        h1, w1 = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        prior = _random_prior(rng, ("full-2d", "axial-1d")[i % 2], h1, w1, heads, dim // 2)
        x = rng.standard_normal((prior.decay_mask[0].shape[0] if isinstance(prior.decay_mask, tuple)
                                 else prior.decay_mask.shape[0], heads * dim, h1, w1)) * rng.uniform(0.1, 10)
        for a in gema.attention(x, prior, _params(cfg, rng), cfg)[2]:
            worst = max(worst, float(np.max(np.abs(a.data.sum(axis=-1) - 1))))
    return worst


def _ema_cases(rng):
    bad = 0
    for _ in range(CASES):
        factor = int(rng.choice([1, 2, 4, 8]))
        c = factor * int(rng.integers(1, 4))
        cg = c // factor
        params = {
            "conv1x1": rng.standard_normal((cg, cg, 1, 1)) * rng.uniform(0.1, 5),
            "conv3x3": rng.standard_normal((cg, cg, 3, 3)) * rng.uniform(0.1, 5),
            "gn_scale": rng.standard_normal(cg) * 3,
            "gn_shift": rng.standard_normal(cg) * 3,
        }
        x = rng.standard_normal((int(rng.integers(1, 3)), c, *rng.integers(1, 7, size=2))) * rng.uniform(0.1, 100)
        out = gema.ema_attention(x, params, factor).data
        bad += not np.all(np.abs(out) <= np.abs(x))
    return bad


def test_geometry_invariants(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(99)
    results = {
        "decay negative+monotone": _decay_cases(rng),
        "masks symmetric/zero-diag/nonpositive": _mask_cases(rng),
        "depth-gap lowers logits": _depth_monotone_cases(rng),
    }
    rotary = _rotary_cases(rng)
    rows = _row_sum_cases(rng)
    ema_bad = _ema_cases(rng)
    elapsed = time.perf_counter() - start
    ok = all(v == 0 for v in results.values()) and rotary <= 1e-6 and rows <= 1e-6 and ema_bad == 0 and elapsed <= 300
    detail = ", ".join(f"{k} {v} bad" for k, v in results.items())
    detail += f", rotary max err {rotary:.1e}, row sums max |1-s| {rows:.1e}, EMA {ema_bad} bad"
    record(capsys, "geometry invariants", ok, f"{CASES} cases each; {detail}; {elapsed:.1f}s")


# ---------------------------------------------------------------- ablation


@pytest.fixture(scope="module")
def ablation_data():
    train_set = ArrayDataset.synthesize(DEFAULT_TRAIN_COUNTS, 0, "train", SIZE)
    val_set = ArrayDataset.synthesize(TABLE_TEST_COUNTS, 0, "val", SIZE)
    return train_set, val_set


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_geometry_ablation_signal(capsys, ablation_data, seed):
    run = RunConfig.load(CONFIGS / "ablation.json")
    train_set, val_set = ablation_data
    tcfg = TrainConfig(**{**run.train.__dict__, "seed": seed})
    start = time.perf_counter()
    full = GeoRepNet(run.model, seed=seed)
    train(full, train_set, tcfg)
    full_report = evaluate(full, val_set)
    backbone = GeoRepNet(run.model.with_toggles(dgpg=False, gsa=False, ema=False), seed=seed)
    train(backbone, train_set, tcfg)
    bb_report = evaluate(backbone, val_set)
    elapsed = time.perf_counter() - start
    bb_pair = bb_report.extra["pair_balanced_accuracy"]
    ok = full_report.accuracy >= 0.90 and bb_pair <= 0.60 and elapsed <= 1800
    record(
        capsys,
        f"geometry ablation signal (seed {seed})",
        ok,
        f"full model val acc {full_report.accuracy:.3f} (>=0.90), backbone pair acc {bb_pair:.3f} (<=0.60; "
        f"raw {bb_report.extra['pair_accuracy']:.3f}), full-model pair acc {full_report.extra['pair_balanced_accuracy']:.3f}, "
        f"{elapsed:.0f}s",
    )


# ---------------------------------------------------------------- factor sweep


@pytest.mark.slow
def test_factor_sweep(capsys):
    run = RunConfig.load(CONFIGS / "sweep.json")
    train_set = ArrayDataset.synthesize(DEFAULT_TRAIN_COUNTS, 0, "train", SIZE)
    val_set = ArrayDataset.synthesize(scaled_counts(TABLE_TEST_COUNTS, "0.1"), 0, "val", SIZE)
    start = time.perf_counter()
    rows = []
    finite = True
    for factor in (4, 8, 16, 32):
        model = GeoRepNet(run.model.with_toggles(factor=factor), seed=0)
        _, hist = train(model, train_set, run.train)
        rep = evaluate(model, val_set)
        values = [rep.accuracy, rep.macro_f1, rep.weighted_f1, rep.auc, hist[-1]["loss"]]
        finite &= all(math.isfinite(v) for v in values)
        rows.append(f"f={factor}: acc {rep.accuracy:.3f} F1 {rep.macro_f1:.3f} AUC {rep.auc:.3f}")
    elapsed = time.perf_counter() - start
    ok = finite and elapsed <= 600
    record(capsys, "factor sweep", ok, f"{run.train.epochs} epochs each; " + "; ".join(rows) + f"; {elapsed:.0f}s")


# ---------------------------------------------------------------- metrics


def test_metric_oracles(capsys):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(CASES):
        n, k = int(rng.integers(2, 101)), int(rng.integers(2, 10))
        y = rng.integers(0, k, n)
        y[:2] = [0, 1]
        p = rng.integers(0, k, n)
        scores = rng.integers(0, int(rng.choice([4, 50, 10**6])), (n, k)) / 3.0
        worst = max(
            worst,
            abs(accuracy(y, p) - sum(int(a == b) for a, b in zip(y, p)) / n),
            abs(macro_f1(y, p) - brute_macro_f1(y.tolist(), p.tolist())),
            abs(auc_ovr(scores, y) - brute_auc_ovr(scores.tolist(), y.tolist())),
        )
    f1_example = macro_f1([0, 0, 1, 1], [0, 1, 1, 1])
    auc_example = binary_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    ok = worst <= 1e-12 and abs(f1_example - 11 / 15) <= 1e-12 and abs(auc_example - 0.75) <= 1e-12
    record(
        capsys,
        "metric oracles",
        ok,
        f"{CASES} instances, max |diff| {worst:.1e} (<=1e-12); macro-F1 example {f1_example:.5f}, AUC example {auc_example:.2f}",
    )


# ---------------------------------------------------------------- determinism


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_determinism(capsys, tmp_path):
    counts = [3, 3, 3, 1, 3, 3, 3, 3, 3]
    for name in ("a", "b"):
        generate_dataset(counts, 11, tmp_path / name, size=SIZE)
    same_data = _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")
    ds = ArrayDataset.load(tmp_path / "a")
    cfg = TrainConfig(epochs=2, batch_size=8, base_lr=1e-3, seed=5)
    ckpts = [train(GeoRepNet(micro_config(), seed=5), ds, cfg)[0].to_bytes() for _ in range(2)]
    same_ckpt = ckpts[0] == ckpts[1]
    record(
        capsys,
        "determinism",
        same_data and same_ckpt,
        f"dataset trees byte-identical={same_data} ({sum(counts)} samples), "
        f"checkpoints byte-identical={same_ckpt} ({len(ckpts[0])} bytes)",
    )


# ---------------------------------------------------------------- containers


def test_container_round_trips(capsys, tmp_path):
    rng = np.random.default_rng(3)
    mismatches = 0
    for i in range(CASES):
        dtype = (np.float32, np.float64)[i % 2]
        shape = tuple(int(s) for s in rng.integers(0, 6, size=int(rng.integers(0, 5))))
        arr = rng.standard_normal(shape).astype(dtype)
        if arr.size:
            arr.reshape(-1)[0] = (np.nan, np.inf, -0.0)[i % 3]
        write_tensor(arr, tmp_path / "t.grtf")
        back = read_tensor(tmp_path / "t.grtf").data
        mismatches += not (back.dtype == arr.dtype and back.shape == arr.shape and back.tobytes() == arr.tobytes())
    good = encode_tensor(np.ones((2, 3), np.float32))
    malformed = {
        "magic": (b"XXXX" + good[4:], 0),
        "version": (good[:4] + b"\x07" + good[5:], 4),
        "dtype": (good[:5] + b"\x09" + good[6:], 5),
        "truncated payload": (good[:-1], len(good) - 1),
        "trailing bytes": (good + b"\0", len(good)),
    }
    offsets_ok = True
    for buf, offset in malformed.values():
        try:
            decode_tensor(buf)
            offsets_ok = False
        except FormatError as exc:
            offsets_ok &= exc.offset == offset and str(offset) in str(exc)
    ok = mismatches == 0 and offsets_ok
    record(
        capsys,
        "container round trips",
        ok,
        f"{CASES} tensors (rank<=4, both precisions) {mismatches} mismatches; "
        f"{len(malformed)} malformed headers rejected at the right offset={offsets_ok}",
    )


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v", *sys.argv[1:]]))
