"""Synthetic base/novel scenarios and the method-comparison harness."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .baselines import SoftDisConfig, ncm_build, pknn_build, soft_dis_train
from .expand import expand_model, make_batch, train_expansion
from .features import FeatureSet, split_by_label
from .gmm import EmConfig, fit_bank
from .net import SoftmaxHead, TwoLayerNet, fit, train_base, train_head
from .optim import TrainConfig, base_train_config

METHODS = ("gen-lsne", "gen-lsne-graddrop", "soft-dis", "soft-dis-graddrop", "ncm", "pknn")
DEFAULT_SAMPLES = (1, 3, 5, 9, 15)
CSV_HEADER = ["method", "samples", "overall_err", "base_err", "novel_err", "trials"]
MAX_PLACEMENT_TRIES = 10_000
_TOL = 1e-9


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    """Synthetic scenario parameters.

    Scenario 1 keeps every class mean at least ``separation`` apart; scenario 2
    clusters the novel means within ``novel_novel_gap`` of each other; scenario 3
    puts each novel mean within ``novel_base_gap`` of a distinct base mean.
    ``class_std`` bounds the per-coordinate within-class standard deviation.
    """

    scenario: int = 1
    dims: int = 64
    base_count: int = 5
    novel_count: int = 2
    train_per_class: int = 1000
    test_per_class: int = 250
    class_mixtures: int = 3
    separation: float = 8.0
    novel_novel_gap: float = 2.0
    novel_base_gap: float = 2.0
    class_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in (1, 2, 3):
            raise ValueError("scenario must be 1, 2 or 3")
        if self.dims < 1 or self.base_count < 1 or self.novel_count < 0:
            raise ValueError("dims and base_count must be positive, novel_count non-negative")
        if self.train_per_class < 1 or self.test_per_class < 1 or self.class_mixtures < 1:
            raise ValueError("per-class counts and class_mixtures must be positive")
        if min(self.separation, self.novel_novel_gap, self.novel_base_gap) < 0 or not self.class_std > 0:
            raise ValueError("gaps must be non-negative and class_std positive")

    @property
    def base_labels(self):
        return [f"base{i}" for i in range(self.base_count)]

    @property
    def novel_labels(self):
        return [f"novel{i}" for i in range(self.novel_count)]


class Scenario(NamedTuple):
    train: FeatureSet
    test: FeatureSet
    base_labels: list
    novel_labels: list
    means: dict


def _place(rng, scale, dims, accept, what):
    for _ in range(MAX_PLACEMENT_TRIES):
        cand = rng.normal(0.0, scale, dims)
        if accept(cand):
            return cand
    raise ScenarioError(f"could not place {what} after {MAX_PLACEMENT_TRIES} tries")


def _unit(rng, dims):
    u = rng.standard_normal(dims)
    return u / np.linalg.norm(u)


def _far(points, sep):
    return lambda c: all(np.linalg.norm(c - p) >= sep for p in points)


def _class_means(spec, rng):
    n, sep = spec.dims, spec.separation
    scale = max(sep, 1e-12) * 1.15 / np.sqrt(2.0 * n)
    base = []
    for i in range(spec.base_count):
        base.append(_place(rng, scale, n, _far(base, sep), f"base mean {i} (separation {sep})"))
    novel = []
    if spec.scenario == 1:
        for i in range(spec.novel_count):
            novel.append(_place(rng, scale, n, _far(base + novel, sep), f"novel mean {i} (separation {sep})"))
    elif spec.scenario == 2:
        half = spec.novel_novel_gap / 2.0
        center = _place(rng, scale, n, _far(base, sep + half), f"novel centre (separation {sep} from base)")
        novel = [center + half * _unit(rng, n) for _ in range(spec.novel_count)]
    else:
        gap = spec.novel_base_gap
        if spec.novel_count > spec.base_count:
            raise ScenarioError("scenario 3 needs at least as many base as novel classes")
        if spec.base_count > 1 and sep <= 2 * gap:
            raise ScenarioError(f"novel_base_gap {gap} must be below half the separation {sep}")
        partners = rng.permutation(spec.base_count)[: spec.novel_count]
        novel = [base[j] + gap * _unit(rng, n) for j in partners]
    means = dict(zip(spec.base_labels, base))
    means.update(zip(spec.novel_labels, novel))
    return means


def check_constraints(spec: ScenarioSpec, means) -> None:
    """Raise ScenarioError unless the class means satisfy the scenario geometry."""
    base = [means[lab] for lab in spec.base_labels]
    novel = [means[lab] for lab in spec.novel_labels]
    sep = spec.separation

    def dist(a, b):
        return float(np.linalg.norm(a - b))

    for i in range(len(base)):
        for j in range(i):
            if dist(base[i], base[j]) < sep - _TOL:
                raise ScenarioError(f"base means {j},{i} closer than separation {sep}")
    if spec.scenario in (1, 2):
        for k, v in enumerate(novel):
            if any(dist(v, b) < sep - _TOL for b in base):
                raise ScenarioError(f"novel mean {k} closer than separation {sep} to a base mean")
    if spec.scenario == 1:
        for i in range(len(novel)):
            for j in range(i):
                if dist(novel[i], novel[j]) < sep - _TOL:
                    raise ScenarioError(f"novel means {j},{i} closer than separation {sep}")
    if spec.scenario == 2:
        for i in range(len(novel)):
            for j in range(i):
                if dist(novel[i], novel[j]) > spec.novel_novel_gap + _TOL:
                    raise ScenarioError(f"novel means {j},{i} farther apart than {spec.novel_novel_gap}")
    if spec.scenario == 3:
        used = set()
        for k, v in enumerate(novel):
            near = [i for i, b in enumerate(base) if dist(v, b) <= spec.novel_base_gap + _TOL]
            if len(near) != 1 or near[0] in used:
                raise ScenarioError(f"novel mean {k} is not near exactly one distinct base mean")
            used.add(near[0])


def _class_mixture(spec, center, rng):
    m, n, s = spec.class_mixtures, spec.dims, spec.class_std
    weights = rng.dirichlet(np.full(m, 5.0))
    offsets = rng.normal(0.0, 0.5 * s, (m, n))
    variances = (s * s) * rng.uniform(0.25, 0.75, (m, n))
    return weights, center + offsets, variances


def _draw(mixture, count, rng):
    weights, means, variances = mixture
    comps = rng.choice(len(weights), size=count, p=weights)
    return means[comps] + np.sqrt(variances[comps]) * rng.standard_normal((count, means.shape[1]))


def gen_scenario(spec: ScenarioSpec) -> Scenario:
    """Deterministically generate train/test features for every class."""
    rng = np.random.default_rng(spec.seed)
    means = _class_means(spec, rng)
    check_constraints(spec, means)
    train, test = {}, {}
    for lab, center in means.items():
        mixture = _class_mixture(spec, center, rng)
        train[lab] = _draw(mixture, spec.train_per_class, rng)
        test[lab] = _draw(mixture, spec.test_per_class, rng)
    return Scenario(
        FeatureSet.from_groups(train, spec.dims),
        FeatureSet.from_groups(test, spec.dims),
        spec.base_labels,
        spec.novel_labels,
        means,
    )


# -- evaluation ----------------------------------------------------------------

@dataclass(frozen=True)
class TrialResult:
    """Error counts for one method on one test set; rates are percentages."""

    method: str
    samples: int
    base_total: int
    base_wrong: int
    novel_total: int
    novel_wrong: int
    trial: int = 0

    @staticmethod
    def _pct(wrong, total):
        return float(Fraction(100 * wrong, total)) if total else float("nan")

    @property
    def overall_fraction(self):
        return Fraction(self.base_wrong + self.novel_wrong, self.base_total + self.novel_total)

    @property
    def overall_err(self):
        return self._pct(self.base_wrong + self.novel_wrong, self.base_total + self.novel_total)

    @property
    def base_err(self):
        return self._pct(self.base_wrong, self.base_total)

    @property
    def novel_err(self):
        return self._pct(self.novel_wrong, self.novel_total)


def _model_labels(model):
    for attr in ("class_labels", "labels"):
        labs = getattr(model, attr, None)
        if labs is not None and not callable(labs):
            return set(labs)
    return None


def evaluate(model, test: FeatureSet, base_labels, novel_labels, method="", samples=0, trial=0) -> TrialResult:
    """Top-1 errors overall and on base-only / novel-only test records.

    ``model`` needs ``predict(X) -> labels`` or must itself be such a callable.
    """
    base_labels, novel_labels = set(base_labels), set(novel_labels)
    stray = set(test.labels) - base_labels - novel_labels
    if stray:
        raise ValueError(f"test labels outside base/novel: {sorted(stray)}")
    known = _model_labels(model)
    if known is not None and not set(test.labels) <= known:
        raise ValueError(f"model does not cover test labels {sorted(set(test.labels) - known)}")
    predict = model.predict if hasattr(model, "predict") else model
    pred = np.asarray(predict(test.vectors), dtype=object)
    truth = test.label_array()
    wrong = pred != truth
    is_base = np.isin(truth, list(base_labels))
    return TrialResult(
        method, int(samples),
        int(is_base.sum()), int((wrong & is_base).sum()),
        int((~is_base).sum()), int((wrong & ~is_base).sum()),
        int(trial),
    )


# -- harness -------------------------------------------------------------------

@dataclass(frozen=True)
class BenchOptions:
    """Settings shared by every trial besides the scenario and expansion config."""

    hidden: int = 32
    mixtures: int = 20
    new_features: int = 0
    lam: float = 1.0
    temperature: float = 2.0
    base_cfg: TrainConfig = base_train_config()
    em_max_iters: int = 200


class TrialContext(NamedTuple):
    seed: int
    scenario: Scenario
    base_net: TwoLayerNet
    bank: object
    novel_train: dict


def prepare_trial(spec: ScenarioSpec, seed, options=BenchOptions(), need_net=True) -> TrialContext:
    """Generate the scenario for ``seed``, train the base net and fit the GMM bank."""
    sc = gen_scenario(replace(spec, seed=seed))
    base_train, novel_train = split_by_label(sc.train, sc.base_labels)
    net = train_base(base_train, options.hidden, sc.base_labels, options.base_cfg.with_(seed=seed)) if need_net else None
    bank = fit_bank(base_train.by_label(), EmConfig(options.mixtures, options.em_max_iters, seed=seed))
    return TrialContext(seed, sc, net, bank, novel_train.by_label())


def draw_low_shot(novel_train, n, seed):
    """``n`` samples per novel class, without replacement."""
    rng = np.random.default_rng(seed)
    out = {}
    for lab, x in novel_train.items():
        if n > len(x):
            raise ValueError(f"class {lab!r} has only {len(x)} samples, {n} requested")
        out[lab] = x[rng.choice(len(x), size=n, replace=False)]
    return out


def run_method(method, base_net, bank, pool, cfg: TrainConfig, options=BenchOptions()):
    """Build the classifier for ``method`` from a base net, bank and low-shot pool."""
    if method == "ncm":
        return ncm_build(bank, pool)
    if method == "pknn":
        return pknn_build(bank, pool)
    if method in ("gen-lsne", "gen-lsne-graddrop"):
        model = expand_model(base_net, list(pool), options.new_features, seed=cfg.seed)
        return train_expansion(model, bank, pool, cfg, masked=method.endswith("graddrop"))
    if method in ("soft-dis", "soft-dis-graddrop"):
        base_fields = {f.name: getattr(cfg, f.name) for f in fields(TrainConfig)}
        sd_cfg = SoftDisConfig(**base_fields, lam=options.lam, temperature=options.temperature)
        return soft_dis_train(base_net, bank, pool, sd_cfg, masked=method.endswith("graddrop"),
                              new_features=options.new_features)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def run_trial(spec, methods, sample_counts, seed, cfg, options=BenchOptions(), trial=0):
    need_net = any(m not in ("ncm", "pknn") for m in methods)
    ctx = prepare_trial(spec, seed, options, need_net)
    results = []
    for n in sample_counts:
        pool = draw_low_shot(ctx.novel_train, n, seed)
        for method in methods:
            model = run_method(method, ctx.base_net, ctx.bank, pool, cfg.with_(seed=seed), options)
            results.append(evaluate(model, ctx.scenario.test, ctx.scenario.base_labels,
                                    ctx.scenario.novel_labels, method, n, trial))
    return results


@dataclass(frozen=True)
class BenchRow:
    method: str
    samples: int
    overall_err: float
    base_err: float
    novel_err: float
    trials: int


def aggregate(results, methods, sample_counts):
    rows = []
    for method in methods:
        for n in sample_counts:
            rs = sorted((r for r in results if r.method == method and r.samples == n), key=lambda r: r.trial)
            if not rs:
                continue
            rows.append(BenchRow(
                method, n,
                float(np.mean([r.overall_err for r in rs])),
                float(np.mean([r.base_err for r in rs])),
                float(np.mean([r.novel_err for r in rs])),
                len(rs),
            ))
    return rows


def run_bench(spec: ScenarioSpec, methods, sample_counts=DEFAULT_SAMPLES, trials=1, cfg=TrainConfig(),
              options=BenchOptions(), jobs=1, return_trials=False):
    """Mean error table over ``trials``; trial t uses seed ``spec.seed + t``."""
    methods = list(methods)
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown method(s) {unknown}; expected a subset of {METHODS}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    sample_counts = [int(n) for n in sample_counts]
    args = [(spec, methods, sample_counts, spec.seed + t, cfg, options, t) for t in range(trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            per_trial = list(ex.map(run_trial, *zip(*args)))
    else:
        per_trial = [run_trial(*a) for a in args]
    results = [r for rs in per_trial for r in rs]
    rows = aggregate(results, methods, sample_counts)
    return (rows, results) if return_trials else rows


def format_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.method, r.samples, f"{r.overall_err:.2f}", f"{r.base_err:.2f}", f"{r.novel_err:.2f}", r.trials])
    return buf.getvalue()


# -- GMM fidelity --------------------------------------------------------------

@dataclass(frozen=True)
class FidelityResult:
    full_accuracy: float
    by_mixtures: dict  # M -> accuracy (%)

    def rows(self):
        return [("full", self.full_accuracy)] + [(str(m), a) for m, a in self.by_mixtures.items()]


def _accuracy(model, test, labels):
    keep = np.isin(test.label_array(), labels)
    pred = model.predict(test.vectors[keep])
    return 100.0 * float(np.mean(pred == test.label_array()[keep]))


def _fresh_model(arch, labels, dims, hidden, rng):
    if arch == "head":
        return SoftmaxHead.init(labels, dims, rng)
    if arch == "two-layer":
        return TwoLayerNet.init(labels, dims, hidden, rng)
    raise ValueError(f"unknown arch {arch!r}")


def gmm_fidelity(train: FeatureSet, test: FeatureSet, mixtures=(1, 10, 20, 40, 60), cfg=None,
                 arch="head", hidden=32, em_max_iters=200) -> FidelityResult:
    """Test accuracy of a classifier trained on the full training features versus
    one trained only on generations from per-class GMMs with M mixtures.

    Both runs share init seed, optimizer, batch size and iteration count.
    """
    cfg = base_train_config() if cfg is None else cfg
    labels = train.label_set
    if len(labels) < 2:
        raise ValueError("need at least two classes")
    if arch == "head":
        full = train_head(train, labels, cfg)
    else:
        full = train_base(train, hidden, labels, cfg)
    full_acc = _accuracy(full, test, labels)

    groups = train.by_label()
    by_m = {}
    for m in mixtures:
        bank = fit_bank(groups, EmConfig(int(m), em_max_iters, seed=cfg.seed))
        rng = np.random.default_rng(cfg.seed)
        model = _fresh_model(arch, labels, train.dims, hidden, rng)
        batches = (make_batch(bank, {}, cfg.batch_per_class, rng, labels) for _ in range(cfg.iters))
        fit(model, batches, cfg)
        by_m[int(m)] = _accuracy(model, test, labels)
    return FidelityResult(full_acc, by_m)
