"""Command-line entry point.

Exit codes: 0 ok, 1 check failed, 2 usage error, 3 missing/invalid weights,
4 bad image input, 5 kernel equivalence failure.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench, gradcheck, image_io, knnflow
from . import network as nw
from .exceptions import ConfigError, ContractError, MucanError
from .loss_metrics import psnr, rgb_to_y, ssim

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_WEIGHTS, EXIT_IMAGE, EXIT_EQUIV = 0, 1, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return h, w


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def resolve_threads(value) -> int:
    if value is None:
        env = os.environ.get("MUCAN_THREADS", "").strip()
        if not env:
            return 1
        try:
            value = int(env)
        except ValueError:
            raise CliError(f"MUCAN_THREADS must be an integer, got {env!r}", EXIT_USAGE) from None
    if value < 1:
        raise CliError("thread count must be >= 1", EXIT_USAGE)
    return value


def _load_config(path):
    if path is None:
        return nw.MucanConfig()
    try:
        return nw.MucanConfig.from_file(path)
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}", EXIT_USAGE) from exc
    except ConfigError as exc:
        raise CliError(f"bad config: {exc}", EXIT_USAGE) from exc


def _out(*fields):
    print("\t".join(str(f) for f in fields))


# ---------------------------------------------------------------------------

def cmd_sr(args) -> int:
    config = _load_config(args.config)
    threads = resolve_threads(args.threads)
    if not args.weights or not os.path.isfile(args.weights):
        raise CliError(f"weights file not found: {args.weights}", EXIT_WEIGHTS)
    try:
        weights = nw.load_model(args.weights, config)
    except (ContractError, OSError) as exc:
        raise CliError(f"invalid weights: {exc}", EXIT_WEIGHTS) from exc
    if not os.path.isdir(args.input):
        raise CliError(f"input directory not found: {args.input}", EXIT_IMAGE)
    listing = image_io.list_frames(args.input)
    if len(listing) < config.n_frames:
        raise CliError(f"need at least {config.n_frames} frames, found {len(listing)}", EXIT_IMAGE)
    try:
        frames = [image_io.read_png(p) for _, p in listing]
    except image_io.ImageError as exc:
        raise CliError(str(exc), EXIT_IMAGE) from exc
    if any(f.shape != frames[0].shape for f in frames):
        raise CliError("all input frames must share one size", EXIT_IMAGE)
    os.makedirs(args.output, exist_ok=True)
    n, last = config.temporal_radius, len(frames) - 1
    # BLAS stays single-threaded so results do not depend on --threads
    with threadpool_limits(limits=1):
        for i, (index, _) in enumerate(listing):
            window = [frames[min(max(i + j, 0), last)] for j in range(-n, n + 1)]
            out = nw.predict(window, weights, config, threads)
            path = os.path.join(args.output, f"out_{index:04d}.png")
            image_io.write_png(path, out)
            _out(index, path)
    return EXIT_OK


def cmd_train_toy(args) -> int:
    config = _load_config(args.config)
    iterations = config.iterations if args.iterations is None else args.iterations
    frames, hr = nw.make_toy_clip(args.seed, args.size, config.temporal_radius, kind=args.clip)
    start = nw.init_weights(config)
    psnr0 = psnr(nw.predict(list(frames), start, config), hr)

    def report(it, loss):
        if it % args.log_every == 0 or it == iterations - 1:
            _out("iter", it, f"{loss:.8f}")

    weights, losses = nw.train_toy((list(frames), hr), config, iterations, callback=report)
    psnr1 = psnr(nw.predict(list(frames), weights, config), hr)
    _out("loss_initial", f"{losses[0]:.8f}")
    _out("loss_final", f"{losses[-1]:.8f}")
    _out("psnr_initial", f"{psnr0:.4f}")
    _out("psnr_final", f"{psnr1:.4f}")
    if args.output:
        weights.save(args.output)
        _out("weights", args.output)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ops = args.ops.split(",") if args.ops else None
    unknown = [o for o in ops or [] if o not in gradcheck.CASES]
    if unknown:
        raise CliError(f"unknown op {unknown[0]!r}; known: {', '.join(gradcheck.CASES)}", EXIT_USAGE)
    reports = gradcheck.run_suite(ops, seeds=args.seeds, base_seed=args.seed)
    for r in reports:
        print(r.line())
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def cmd_knnflow(args) -> int:
    report = knnflow.run_knnflow(args.k, args.noise, args.trials, args.seed, args.disp, args.patch, args.size)
    print(report.table())
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("K,mean_epe\n")
            fh.writelines(f"{k},{e:.6f}\n" for k, e in zip(report.ks, report.mean_epe))
    return EXIT_OK


def cmd_bench(args) -> int:
    threads = resolve_threads(args.threads)
    h, w = args.size
    try:
        if args.kernel == "corr":
            result = bench.bench_corr(h, w, args.channels, args.disp, 3, threads, args.seed, args.repeat)
        else:
            result = bench.bench_nnsearch(h, w, args.channels, args.seed, args.repeat)
    except bench.EquivalenceError as exc:
        raise CliError(f"equivalence failure: {exc}", EXIT_EQUIV) from exc
    _out("kernel", result["kernel"])
    _out("threads", threads)
    _out("ops", result["ops"])
    _out("naive_ns_per_op", f"{result['naive_ns_per_op']:.2f}")
    _out("optimized_ns_per_op", f"{result['optimized_ns_per_op']:.2f}")
    _out("speedup", f"{result['speedup']:.2f}")
    _out("max_rel_err", f"{result['max_rel_err']:.3e}")
    if result["speedup"] < 1.0:
        print("optimized kernel slower than the naive oracle", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _image_pairs(ref, test):
    if os.path.isdir(ref) != os.path.isdir(test):
        raise CliError("--ref and --test must both be files or both be directories", EXIT_USAGE)
    if not os.path.isdir(ref):
        return [(os.path.basename(test), ref, test)]
    names = sorted(n for n in os.listdir(ref) if n.lower().endswith(".png"))
    tests = sorted(n for n in os.listdir(test) if n.lower().endswith(".png"))
    if len(names) != len(tests):
        raise CliError(f"{len(names)} reference vs {len(tests)} test images", EXIT_IMAGE)
    return [(t, os.path.join(ref, r), os.path.join(test, t)) for r, t in zip(names, tests)]


def cmd_metrics(args) -> int:
    rows = []
    for name, rp, tp in _image_pairs(args.ref, args.test):
        try:
            a, b = image_io.read_png(rp), image_io.read_png(tp)
        except image_io.ImageError as exc:
            raise CliError(str(exc), EXIT_IMAGE) from exc
        if a.shape != b.shape:
            raise CliError(f"{name}: size {a.shape} vs {b.shape}", EXIT_IMAGE)
        if args.luma:
            a, b = rgb_to_y(a), rgb_to_y(b)
        try:
            rows.append((name, psnr(a, b), ssim(a, b)))
        except ConfigError as exc:
            raise CliError(f"{name}: {exc}", EXIT_IMAGE) from exc
    _out("image", "psnr", "ssim")
    for name, p, s in rows:
        _out(name, f"{p:.4f}", f"{s:.6f}")
    if len(rows) > 1:
        _out("mean", f"{np.mean([r[1] for r in rows]):.4f}", f"{np.mean([r[2] for r in rows]):.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mucan", description="4x video super-resolution kernels, experiments and tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sr", help="super-resolve a PNG frame sequence")
    p.add_argument("--config")
    p.add_argument("--weights")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("train-toy", help="overfit one synthetic clip")
    p.add_argument("--config")
    p.add_argument("--iterations", type=int)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clip", choices=("mosaic", "texture"), default="mosaic")
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--output", help="write trained weights here")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--ops", help="comma-separated subset of ops")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("knnflow", help="best-of-K patch flow error experiment")
    p.add_argument("--k", type=_int_list, default=[1, 2, 4, 6])
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--disp", type=int, default=5)
    p.add_argument("--patch", type=int, default=3)
    p.add_argument("--size", type=int, default=40)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_knnflow)

    p = sub.add_parser("bench", help="naive vs optimized kernel timing")
    p.add_argument("--kernel", choices=("corr", "nnsearch"), required=True)
    p.add_argument("--size", type=_size, default=(64, 64))
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--disp", type=int, default=3)
    p.add_argument("--threads", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeat", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("metrics", help="PSNR/SSIM between PNG images or directories")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--luma", action="store_true", help="score the BT.601 Y channel only")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"mucan: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, MucanError) as exc:
        print(f"mucan: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, ConfigError) else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
