"""``kipd`` command line: distill, labelsolve and eval.

Exit codes: 0 ok, 2 usage, 3 data or format error, 4 numeric failure.
KIPD_THREADS caps the BLAS/LAPACK thread pools.
"""

from __future__ import annotations

import argparse
import logging
import os
import re
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from kipd import krr
from kipd.datasets import (
    AugmentOptions,
    Dataset,
    class_balanced_sample,
    load_csv,
    load_mnist,
    resolve_data_path,
)
from kipd.errors import FormatError, NumericError
from kipd.evaluation import (
    baseline_curve,
    compression_ratio,
    measure_eps,
    train_fc,
    write_baseline_csv,
)
from kipd.kernels import KernelSpec
from kipd.kip import KipConfig, SupportSet, run_kip, write_history_csv
from kipd.labelsolve import label_covariance, solve_labels, write_covariance_csv
from kipd.snapshot import Snapshot, load, save

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("kipd")


class UsageError(Exception):
    pass


# ----------------------------------------------------------------- helpers

def load_data(path: str, test_path: str | None = None) -> tuple[Dataset, Dataset | None]:
    """A directory of MNIST IDX files, or a CSV file (label in the last column)."""
    p = resolve_data_path(path)
    if p.is_dir():
        train, test = load_mnist(p)
    else:
        train, test = load_csv(p), None
    if test_path is not None:
        test = load_csv(resolve_data_path(test_path), train.num_classes, train.image_shape)
    if test is not None and test.d != train.d:
        raise FormatError(f"test data has {test.d} features, training data {train.d}")
    return train, test


def parse_kernels(text: str) -> list[KernelSpec]:
    try:
        return [KernelSpec.parse(k) for k in text.split(",") if k.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def parse_sizes(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --sizes {text!r}") from exc
    if not sizes or min(sizes) < 1:
        raise UsageError("--sizes needs positive integers")
    return sizes


def check_dims(support: SupportSet, data: Dataset) -> None:
    if support.X.shape[1] != data.d or support.y.shape[1] != data.num_classes:
        raise FormatError(f"snapshot is {support.X.shape[1]}-d with {support.y.shape[1]} classes, "
                          f"data is {data.d}-d with {data.num_classes} classes")


def full_target_loss(support: SupportSet, data: Dataset, kernel: KernelSpec, lam: float) -> float:
    return float(krr.kip_loss((support.X, support.y), (data.X, data.y), kernel, lam))


def krr_test_accuracy(support: SupportSet, test: Dataset, kernel: KernelSpec, lam: float) -> float:
    model = krr.fit((support.X, support.y), kernel, lam)
    return krr.accuracy(model.predict(test.X), test.labels)


def require_test(test: Dataset | None) -> Dataset:
    if test is None:
        raise UsageError("no test split: pass --test for CSV data")
    return test


# ---------------------------------------------------------------- commands

def cmd_distill(args) -> int:
    kernels = parse_kernels(args.kernel)
    train, test = load_data(args.data, args.test)
    augment = None
    if args.augment:
        if train.image_shape is None:
            raise UsageError("--augment needs image data")
        augment = AugmentOptions.default_for(train.image_shape)
    config = KipConfig(
        kernels=kernels, lam=args.lam, lr=args.lr, target_batch=args.target_batch,
        support_batch=args.support_batch, iterations=args.iters, init=args.init, rho=args.rho,
        corruption_scheme=args.corrupt_scheme, augment=augment, learn_labels=args.learn_labels,
        seed=args.seed, checkpoint_count=args.checkpoints,
    )
    if args.eval_test:
        require_test(test)
    result = run_kip(train, args.support_size, config)
    best = result.best
    loss = full_target_loss(best, train, kernels[0], args.lam)
    step = result.checkpoints[0].step if result.checkpoints else 0
    meta = {"kernels": [str(k) for k in kernels], "lambda": args.lam, "lr": args.lr,
            "iterations": args.iters, "target_batch": args.target_batch, "seed": args.seed,
            "init": args.init, "step": step, "train_loss": loss}
    save(args.out, Snapshot.from_support(best, **meta))
    history = args.history or f"{args.out}.history.csv"
    write_history_csv(history, result.history)
    if result.skipped_steps:
        print(f"skipped steps (numeric): {result.skipped_steps}")
    last = result.history[-1][1] if result.history else float("nan")
    print(f"final batch loss: {last:.10g}")
    print(f"train loss ({kernels[0]}, full target): {loss:.12g}")
    if args.eval_test:
        print(f"test accuracy ({kernels[0]}): {100 * krr_test_accuracy(best, test, kernels[0], args.lam):.2f}")
    print(f"wrote {args.out} and {history}")
    return EXIT_OK


def cmd_labelsolve(args) -> int:
    kernels = parse_kernels(args.kernel)
    if len(kernels) != 1:
        raise UsageError("labelsolve takes exactly one kernel")
    kernel = kernels[0]
    train, test = load_data(args.data, args.test)
    rng = np.random.default_rng(args.seed)
    if args.support:
        support = load(args.support).to_support()
        check_dims(support, train)
    elif args.support_size:
        S = class_balanced_sample(train, args.support_size, rng)
        support = SupportSet(S.X, S.y)
    else:
        raise UsageError("labelsolve needs --support or --support-size")
    target = train if args.target_size is None else class_balanced_sample(train, args.target_size, rng)
    before = full_target_loss(support, target, kernel, args.lam)
    y_star = solve_labels(support.X, (target.X, target.y), kernel, args.lam, args.rcond)
    solved = SupportSet(support.X, y_star, support.mask, True)
    after = full_target_loss(solved, target, kernel, args.lam)
    print(f"train loss before: {before:.12g}")
    print(f"train loss after:  {after:.12g}")
    print(f"max |y* - y|: {np.max(np.abs(y_star - support.y)):.3e}")
    if args.eval_test:
        acc = krr_test_accuracy(solved, require_test(test), kernel, args.lam)
        print(f"test accuracy ({kernel}): {100 * acc:.2f}")
    if args.covariance:
        write_covariance_csv(args.covariance, label_covariance(support.y, y_star))
    save(args.out, Snapshot.from_support(solved, kernels=[str(kernel)], **{
        "lambda": args.lam, "rcond": args.rcond, "seed": args.seed, "train_loss": after}))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    train, test = load_data(args.data, args.test)
    rng = np.random.default_rng(args.seed)
    if args.baseline:
        if not args.kernel:
            raise UsageError("--baseline needs --kernel")
        test = require_test(test)
        out = open(args.out, "w", newline="") if args.out else sys.stdout
        try:
            for i, kernel in enumerate(parse_kernels(args.kernel)):
                rows = baseline_curve(train, test, kernel, parse_sizes(args.sizes),
                                      args.resamples, args.lam, rng)
                write_baseline_csv(out, rows, str(kernel), header=i == 0)
        finally:
            if args.out:
                out.close()
        return EXIT_OK

    if not args.snapshot:
        raise UsageError("eval needs --snapshot or --baseline")
    snap = load(args.snapshot)
    support = snap.to_support()
    check_dims(support, train)
    test = require_test(test)
    orig = args.orig_size or train.n
    print(f"compression ratio: {compression_ratio(orig, support.n):.6g}")

    if args.net:
        m = re.fullmatch(r"fc(\d+)", args.net.lower())
        if not m:
            raise UsageError(f"unknown --net {args.net!r} (expected fcN)")
        D = Dataset(support.X, support.y, np.argmax(support.y, axis=1), train.num_classes,
                    train.image_shape)
        res = train_fc(D, depth=int(m.group(1)), width=args.width, lr=args.lr,
                       steps=args.steps, rng=rng)
        if res.diverged:
            raise NumericError("network training diverged")
        print(f"transfer accuracy ({args.net}, width {args.width}): "
              f"{100 * res.net.accuracy(test):.2f}")
        return EXIT_OK

    if not args.kernel:
        raise UsageError("eval --snapshot needs --kernel or --net")
    kernel = parse_kernels(args.kernel)[0]
    model = krr.fit((support.X, support.y), kernel, args.lam)
    print(f"train loss ({kernel}, full target): "
          f"{full_target_loss(support, train, kernel, args.lam):.12g}")
    print(f"test accuracy ({kernel}): {100 * krr.accuracy(model.predict(test.X), test.labels):.2f}")
    if args.reference_size:
        ref = train if args.reference_size >= train.n else class_balanced_sample(
            train, args.reference_size, rng)
        ref_model = krr.fit((ref.X, ref.y), kernel, args.lam)
        for kind in ("zero-one", "mse"):
            r = measure_eps(model, ref_model, test, kind)
            print(f"eps[{kind}] vs reference of size {ref.n}: weak {r.weak_eps:.6g} "
                  f"strong {r.strong_eps:.6g} (loss {r.loss_a:.6g} vs {r.loss_b:.6g})")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kipd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, kernel_required=True):
        p.add_argument("--data", required=True, help="MNIST IDX directory or CSV file")
        p.add_argument("--test", help="test CSV (CSV data only)")
        p.add_argument("--kernel", required=kernel_required,
                       help="kernel spec(s), e.g. rbf or fc1,fc2,fc3")
        p.add_argument("--lambda", dest="lam", type=float, default=1e-6)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("distill", help="learn a support set with KIP")
    common(p)
    p.add_argument("--support-size", type=int, required=True)
    p.add_argument("--target-batch", type=int, required=True)
    p.add_argument("--support-batch", type=int)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--rho", type=float, default=0.0)
    p.add_argument("--corrupt-scheme", choices=("uniform", "zero"), default="uniform")
    p.add_argument("--learn-labels", action="store_true")
    p.add_argument("--augment", action="store_true")
    p.add_argument("--init", choices=("image", "noise"), default="image")
    p.add_argument("--checkpoints", type=int, default=5)
    p.add_argument("--history", help="history CSV path (default: <out>.history.csv)")
    p.add_argument("--eval-test", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("labelsolve", help="solve support labels in closed form")
    common(p)
    p.add_argument("--support-size", type=int)
    p.add_argument("--support", help="snapshot whose inputs are kept")
    p.add_argument("--target-size", type=int, help="class-balanced target subset (default: all)")
    p.add_argument("--rcond", type=float, default=1e-10)
    p.add_argument("--covariance", help="write the natural/solved label covariance CSV here")
    p.add_argument("--eval-test", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_labelsolve)

    p = sub.add_parser("eval", help="evaluate a snapshot or random-subset baselines")
    common(p, kernel_required=False)
    p.add_argument("--snapshot")
    p.add_argument("--baseline", action="store_true")
    p.add_argument("--sizes", default="10,20,40,80,160,320,640,1280,2560,5120,10000")
    p.add_argument("--resamples", type=int, default=20)
    p.add_argument("--reference-size", type=int)
    p.add_argument("--orig-size", type=int)
    p.add_argument("--net", help="train an FC network (fc1, fc2, ...) instead of KRR")
    p.add_argument("--width", type=int, default=1024)
    p.add_argument("--lr", type=float, default=4e-4)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--out", help="baseline CSV path (default: stdout)")
    p.set_defaults(func=cmd_eval)
    return parser


def thread_limit() -> int | None:
    raw = os.environ.get("KIPD_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"KIPD_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"KIPD_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=thread_limit()):
            return args.func(args)
    except UsageError as exc:
        print(f"kipd {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"kipd {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"kipd {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"kipd {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
