"""``georepnet`` command line: gen-data, train, eval, reparam, gradcheck, bench."""

import argparse
import os
import sys
import time

import numpy as np

from .config import EMA_FACTORS, RunConfig, TrainConfig, canonical_json, micro_config
from .data import TABLE_TEST_COUNTS, TABLE_TRAIN_COUNTS, ArrayDataset, generate_dataset, scaled_counts
from .errors import GeoRepNetError, UsageError
from .nn import Context
from .repvgg import GeoRepNet, reparameterize_model
from .tensorfile import Checkpoint
from .train import evaluate, gradient_check, predict_logits, train

OUT_ENV = "GEO_REPNET_OUT"


def default_out():
    return os.environ.get(OUT_ENV, "runs")


def _write_json(path, obj):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(obj) + "\n")


def _emit(obj, path=None):
    text = canonical_json(obj)
    print(text)
    if path:
        _write_json(path, obj)


def _counts(text):
    try:
        return [int(v) for v in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"counts must be comma-separated ints, got {text!r}") from exc


def cmd_gen_data(args):
    out = args.out or os.path.join(default_out(), "data")
    size = (args.size, args.size)
    train_counts = _counts(args.counts) if args.counts else scaled_counts(TABLE_TRAIN_COUNTS, args.scale)
    val_counts = scaled_counts(TABLE_TEST_COUNTS, args.val_scale)
    summary = {}
    for split, counts in (("train", train_counts), ("val", val_counts)):
        manifest = generate_dataset(counts, args.seed, os.path.join(out, split), split=split, size=size)
        summary[split] = {"counts": manifest["counts"], "total": len(manifest["files"])}
    _emit({"out": out, "seed": args.seed, "splits": summary})
    return 0


def _run_config(args):
    run = RunConfig.load(args.config) if args.config else RunConfig()
    model = run.model.with_toggles(
        dgpg=False if args.no_dgpg else None,
        gsa=False if args.no_gsa else None,
        ema=False if args.no_ema else None,
        factor=args.factor,
    )
    train_fields = dict(run.train.__dict__)
    for key in ("epochs", "batch_size", "seed"):
        if getattr(args, key, None) is not None:
            train_fields[key] = getattr(args, key)
    if args.lr is not None:
        train_fields["base_lr"] = args.lr
    return RunConfig(model=model, train=TrainConfig(**train_fields))


def _split_dir(data, split):
    sub = os.path.join(data, split)
    return sub if os.path.isdir(sub) else (data if split == "train" else None)


def cmd_train(args):
    run = _run_config(args)
    out = args.out or os.path.join(default_out(), "train")
    train_set = ArrayDataset.load(_split_dir(args.data, "train"))
    val_dir = _split_dir(args.data, "val")
    model = GeoRepNet(run.model, seed=run.train.seed)
    ckpt, history = train(model, train_set, run.train, log=None if args.quiet else _log_epoch)
    os.makedirs(out, exist_ok=True)
    ckpt.save(os.path.join(out, "checkpoint.grck"))
    _write_json(os.path.join(out, "config.json"), run.to_dict())
    _write_json(os.path.join(out, "history.json"), history)
    result = {"checkpoint": os.path.join(out, "checkpoint.grck"), "final": history[-1]}
    if val_dir:
        report = evaluate(model, ArrayDataset.load(val_dir)).to_dict()
        _write_json(os.path.join(out, "metrics.json"), report)
        result["metrics"] = {k: report[k] for k in ("accuracy", "macro_f1", "weighted_f1", "auc")}
        result["metrics"].update(report["extra"])
    _emit(result)
    return 0


def _log_epoch(record):
    print(canonical_json(record), file=sys.stderr, flush=True)


def cmd_eval(args):
    model = GeoRepNet.from_checkpoint(Checkpoint.load(args.checkpoint))
    split = _split_dir(args.data, "val") or args.data
    report = evaluate(model, ArrayDataset.load(split)).to_dict()
    _emit(report, args.out)
    return 0


def cmd_reparam(args):
    ckpt = Checkpoint.load(args.checkpoint)
    model = GeoRepNet.from_checkpoint(ckpt)
    fused = reparameterize_model(model)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "fused.grck")
    fused.to_checkpoint(extra=ckpt.extra).save(out)
    _emit({"fused": out, "block_convs": [model.block_conv_count(), fused.block_conv_count()]})
    return 0


def cmd_gradcheck(args):
    cfg = RunConfig.load(args.config).model if args.config else micro_config()
    report = gradient_check(cfg, tolerance=args.tol, seed=args.seed)
    _emit(report, args.out)
    if not report["passed"]:
        print(f"gradient check failed: max error {report['max_error']:.3e} > {args.tol:g}", file=sys.stderr)
        return 1
    return 0


def _timed_forward(model, rgb, depth, iters):
    counter_ctx = Context()
    model.forward(rgb, depth, ctx=counter_ctx)  # warm-up, also counts convs
    start = time.perf_counter()
    for _ in range(iters):
        model.forward(rgb, depth)
    return (time.perf_counter() - start) / iters, counter_ctx.counter["block_convs"]


def cmd_bench(args):
    if args.iters < 1:
        raise UsageError("--iters must be >= 1")
    multi_ckpt = Checkpoint.load(args.checkpoint)
    fused_ckpt = Checkpoint.load(args.fused) if args.fused else None
    multi = GeoRepNet.from_checkpoint(multi_ckpt)
    if multi.fused:
        raise UsageError("--checkpoint must be a multi-branch checkpoint")
    if fused_ckpt is None:
        fused = reparameterize_model(multi)
    else:
        if fused_ckpt.config != multi_ckpt.config:
            print("checkpoints encode different architectures", file=sys.stderr)
            return 1
        fused = GeoRepNet.from_checkpoint(fused_ckpt)
        if not fused.fused:
            print("--fused checkpoint is not re-parameterized", file=sys.stderr)
            return 1
    rng = np.random.default_rng(args.seed)
    h, w = multi.config.input_size
    rgb = rng.random((args.batch, 3, h, w)).astype(np.float32)
    depth = (0.1 + 0.9 * rng.random((args.batch, 1, h, w))).astype(np.float32)
    t_multi, n_multi = _timed_forward(multi, rgb, depth, args.iters)
    t_fused, n_fused = _timed_forward(fused, rgb, depth, args.iters)
    a = multi.forward(rgb, depth).data.astype(np.float64)
    b = fused.forward(rgb, depth).data.astype(np.float64)
    divergence = float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-12))
    report = {
        "batch": args.batch,
        "iters": args.iters,
        "multi_branch": {"seconds_per_forward": t_multi, "block_convs": n_multi},
        "fused": {"seconds_per_forward": t_fused, "block_convs": n_fused},
        "max_relative_logit_divergence": divergence,
    }
    _emit(report, args.out)
    if not n_fused < n_multi:
        print("fused model does not perform fewer convolutions", file=sys.stderr)
        return 1
    if divergence > 1e-3:
        print(f"fused logits diverge by {divergence:.3e}", file=sys.stderr)
        return 1
    return 0


def _add_toggles(p):
    p.add_argument("--no-dgpg", action="store_true", help="position-only priors")
    p.add_argument("--no-gsa", action="store_true", help="disable the geometry-aware attention")
    p.add_argument("--no-ema", action="store_true", help="disable the grouped channel gate")
    p.add_argument("--factor", type=int, choices=EMA_FACTORS, help="EMA grouping factor")


def build_parser():
    parser = argparse.ArgumentParser(prog="georepnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic train/val datasets")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=0.1, help="train counts = table counts x scale")
    p.add_argument("--val-scale", type=float, default=1.0, help="val counts = test column x scale")
    p.add_argument("--counts", help="explicit comma-separated train counts")
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--quiet", action="store_true")
    _add_toggles(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reparam", help="fuse every RepVGG block of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_reparam)

    p = sub.add_parser("gradcheck", help="finite-difference check of a float64 model")
    p.add_argument("--config")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="latency and conv counts, multi-branch vs fused")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fused")
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (GeoRepNetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())
