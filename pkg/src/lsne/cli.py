"""Command-line pipeline: gen-data, train-base, fit-gmm, expand, eval, bench,
gmm-fidelity.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

from ._textio import FormatError, write_text
from .baselines import load_prototypes
from .bench import (METHODS, BenchOptions, ScenarioSpec, draw_low_shot, evaluate, format_csv, gen_scenario,
                    gmm_fidelity, run_bench)
from .expand import expand_model, train_expansion
from .features import load_features, save_features, split_by_label
from .gmm import EmConfig, fit_bank, load_bank, save_bank
from .net import TwoLayerNet, load_model, save_model, train_base, train_head
from .optim import NumericalError, TrainConfig, base_train_config

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text):
    return [x.strip() for x in text.split(",") if x.strip()]


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _scenario_flags(p):
    p.add_argument("--scenario", type=int, choices=(1, 2, 3), default=1)
    p.add_argument("--dims", type=_positive_int, default=64)
    p.add_argument("--base", type=_positive_int, default=5)
    p.add_argument("--novel", type=int, default=2)
    p.add_argument("--train-per-class", type=_positive_int, default=1000)
    p.add_argument("--test-per-class", type=_positive_int, default=250)
    p.add_argument("--class-mixtures", type=_positive_int, default=3)
    p.add_argument("--separation", type=float, default=8.0)
    p.add_argument("--novel-gap", type=float, default=2.0, help="novel-novel gap (scenario 2)")
    p.add_argument("--base-gap", type=float, default=2.0, help="novel-base gap (scenario 3)")
    p.add_argument("--class-std", type=float, default=1.0)


def _spec_from(args):
    if args.novel < 0:
        raise UsageError("--novel must be >= 0")
    try:
        return ScenarioSpec(args.scenario, args.dims, args.base, args.novel, args.train_per_class,
                            args.test_per_class, args.class_mixtures, args.separation, args.novel_gap,
                            args.base_gap, args.class_std, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _expansion_flags(p):
    d = TrainConfig()
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--momentum-rule", choices=("paper", "conventional"), default=d.momentum_rule)
    p.add_argument("--iters", type=int, default=d.iters)
    p.add_argument("--batch-per-class", type=_positive_int, default=d.batch_per_class)
    p.add_argument("--aug", type=int, default=d.aug_per_sample, help="jittered copies per novel sample")
    p.add_argument("--aug-scale", type=float, default=d.aug_scale)


def _train_cfg(args, p=None):
    try:
        return TrainConfig(lr=args.lr, momentum=args.momentum, grad_dropout_p=1.0 if p is None else p,
                           batch_per_class=args.batch_per_class, iters=args.iters, aug_per_sample=args.aug,
                           aug_scale=args.aug_scale, seed=args.seed, momentum_rule=args.momentum_rule)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def read_labels(path):
    """Parse labels.txt into (base labels, novel labels)."""
    base, novel = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            kind, _, label = line.partition(":")
            if kind == "base" and label:
                base.append(label)
            elif kind == "novel" and label:
                novel.append(label)
            else:
                raise FormatError(f"{path}: malformed label line {lineno}")
    return base, novel


def write_labels(path, base, novel):
    write_text(path, "".join(f"base:{x}\n" for x in base) + "".join(f"novel:{x}\n" for x in novel))


# -- commands ------------------------------------------------------------------

def cmd_gen_data(args):
    sc = gen_scenario(_spec_from(args))
    os.makedirs(args.out, exist_ok=True)
    save_features(sc.train, os.path.join(args.out, "train.features"))
    save_features(sc.test, os.path.join(args.out, "test.features"))
    write_labels(os.path.join(args.out, "labels.txt"), sc.base_labels, sc.novel_labels)


def _base_subset(features, labels_path):
    if labels_path is None:
        return features, features.label_set
    base, _ = read_labels(labels_path)
    missing = [lab for lab in base if lab not in set(features.labels)]
    if missing:
        raise ValueError(f"base label(s) {missing} not present in features")
    return split_by_label(features, base)[0], base


def cmd_train_base(args):
    train, labels = _base_subset(load_features(args.train), args.labels)
    cfg = base_train_config(seed=args.seed, iters=args.iters, lr=args.lr)
    if args.arch == "head":
        model = train_head(train, labels, cfg, verbose=args.verbose)
    else:
        model = train_base(train, args.hidden, labels, cfg, verbose=args.verbose)
    save_model(model, args.out)


def cmd_fit_gmm(args):
    train, _ = _base_subset(load_features(args.train), args.labels)
    bank = fit_bank(train.by_label(), EmConfig(args.mixtures, args.max_iters, args.rel_tol,
                                               args.variance_floor, args.seed))
    save_bank(bank, args.out)


def _novel_pool(args, model_labels):
    features = load_features(args.novel_features)
    if args.labels is not None:
        _, novel = read_labels(args.labels)
        features = split_by_label(features, [lab for lab in novel if lab in set(features.labels)])[0]
    groups = {lab: x for lab, x in features.by_label().items() if lab not in set(model_labels)}
    if not groups:
        raise ValueError("no novel classes found in --novel-features")
    return draw_low_shot(groups, args.samples, args.seed)


def cmd_expand(args):
    base = load_model(args.model)
    bank = load_bank(args.bank)
    if bank.dims != base.in_dims:
        raise ValueError(f"bank dims {bank.dims} differ from model input dims {base.in_dims}")
    pool = _novel_pool(args, base.labels)
    if args.mode == "deep" and not isinstance(base, TwoLayerNet):
        raise UsageError("--mode deep needs a two-layer model")
    if args.mode == "head" and args.new_features:
        raise UsageError("--new-features requires --mode deep")
    cfg = _train_cfg(args, args.grad_dropout)
    model = expand_model(base, list(pool), args.new_features, seed=args.seed)
    trained = train_expansion(model, bank, pool, cfg, masked=args.grad_dropout is not None, verbose=args.verbose)
    save_model(trained.expanded, args.out)


def _load_classifier(path):
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith("lsne-features"):
        return load_prototypes(path)
    return load_model(path)


def cmd_eval(args):
    model = _load_classifier(args.model)
    test = load_features(args.test)
    if args.labels is not None:
        base, novel = read_labels(args.labels)
    else:
        known = getattr(model, "labels", [])
        base, novel = [lab for lab in test.label_set if lab in known], []
    r = evaluate(model, test, base, novel)
    print(f"overall_err={r.overall_err:.2f} base_err={r.base_err:.2f} novel_err={r.novel_err:.2f}")


def cmd_bench(args):
    spec = _spec_from(args)
    unknown = [m for m in args.methods if m not in METHODS]
    if unknown:
        raise UsageError(f"unknown method(s) {unknown}; choose from {', '.join(METHODS)}")
    cfg = _train_cfg(args, args.grad_dropout)
    options = BenchOptions(hidden=args.hidden, mixtures=args.mixtures, new_features=args.new_features,
                           lam=args.lam, temperature=args.temperature)
    rows = run_bench(spec, args.methods, args.samples, args.trials, cfg, options, jobs=args.jobs)
    text = format_csv(rows)
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)


def cmd_gmm_fidelity(args):
    train, labels = _base_subset(load_features(args.train), args.labels)
    test = load_features(args.test)
    test = split_by_label(test, [lab for lab in labels if lab in set(test.labels)])[0]
    cfg = base_train_config(seed=args.seed, iters=args.iters, lr=args.lr)
    res = gmm_fidelity(train, test, args.mixtures, cfg, arch=args.arch, hidden=args.hidden)
    lines = ["mixtures,accuracy"] + [f"{m},{acc:.2f}" for m, acc in res.rows()]
    text = "\n".join(lines) + "\n"
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)


def build_parser():
    parser = _Parser(prog="lsne", description="Low-shot network expansion toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic base/novel scenario")
    _scenario_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    base_cfg = base_train_config()
    p = sub.add_parser("train-base", help="train a base classifier on the base classes")
    p.add_argument("--train", required=True)
    p.add_argument("--labels")
    p.add_argument("--arch", choices=("two-layer", "head"), default="two-layer")
    p.add_argument("--hidden", type=_positive_int, default=BenchOptions().hidden)
    p.add_argument("--iters", type=int, default=base_cfg.iters)
    p.add_argument("--lr", type=float, default=base_cfg.lr)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_base)

    em = EmConfig()
    p = sub.add_parser("fit-gmm", help="fit per-class diagonal GMMs")
    p.add_argument("--train", required=True)
    p.add_argument("--labels")
    p.add_argument("--mixtures", type=_positive_int, default=em.mixtures)
    p.add_argument("--max-iters", type=_positive_int, default=em.max_iters)
    p.add_argument("--rel-tol", type=float, default=em.rel_tol)
    p.add_argument("--variance-floor", type=float, default=em.variance_floor)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_gmm)

    p = sub.add_parser("expand", help="expand a model to novel classes (hard distillation)")
    p.add_argument("--model", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--novel-features", required=True)
    p.add_argument("--labels")
    p.add_argument("--samples", type=_positive_int, required=True)
    p.add_argument("--mode", choices=("head", "deep"), default="head")
    p.add_argument("--new-features", type=int, default=0)
    p.add_argument("--grad-dropout", type=float, default=None, metavar="P",
                   help="enable gradient dropout with keep probability P")
    _expansion_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_expand)

    p = sub.add_parser("eval", help="top-1 errors of a model or prototype file")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--labels")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run the method comparison and write a CSV table")
    _scenario_flags(p)
    p.add_argument("--methods", type=_str_list, default=list(METHODS))
    p.add_argument("--samples", type=_int_list, default=[1, 3, 5, 9, 15])
    p.add_argument("--trials", type=_positive_int, default=1)
    p.add_argument("--grad-dropout", type=float, default=TrainConfig().grad_dropout_p, metavar="P")
    _expansion_flags(p)
    p.add_argument("--hidden", type=_positive_int, default=BenchOptions().hidden)
    p.add_argument("--mixtures", type=_positive_int, default=BenchOptions().mixtures)
    p.add_argument("--new-features", type=int, default=0)
    p.add_argument("--lam", type=float, default=BenchOptions().lam)
    p.add_argument("--temperature", type=float, default=BenchOptions().temperature)
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gmm-fidelity", help="full-data vs GMM-generated training accuracy")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--labels")
    p.add_argument("--mixtures", type=_int_list, default=[1, 10, 20, 40, 60])
    p.add_argument("--arch", choices=("head", "two-layer"), default="head")
    p.add_argument("--hidden", type=_positive_int, default=BenchOptions().hidden)
    p.add_argument("--iters", type=int, default=base_cfg.iters)
    p.add_argument("--lr", type=float, default=base_cfg.lr)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gmm_fidelity)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    try:
        args.func(args)
    except UsageError as exc:
        print(f"lsne {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"lsne {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"lsne {args.command}: {msg}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
