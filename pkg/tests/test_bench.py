from fractions import Fraction

import numpy as np
import pytest

from lsne.baselines import ncm_build
from lsne.bench import (
    BenchOptions,
    ScenarioError,
    ScenarioSpec,
    TrialResult,
    check_constraints,
    draw_low_shot,
    evaluate,
    format_csv,
    gen_scenario,
    gmm_fidelity,
    prepare_trial,
    run_bench,
)
from lsne.features import FeatureSet, format_features
from lsne.optim import TrainConfig

SMALL = dict(dims=16, train_per_class=100, test_per_class=40)


def _dist(a, b):
    return float(np.linalg.norm(a - b))


# -- scenarios ------------------------------------------------------------------------

def test_scenario_deterministic():
    a = gen_scenario(ScenarioSpec(seed=42, **SMALL))
    b = gen_scenario(ScenarioSpec(seed=42, **SMALL))
    assert format_features(a.train) == format_features(b.train)
    assert format_features(a.test) == format_features(b.test)


def test_scenario_seed_matters():
    a = gen_scenario(ScenarioSpec(seed=1, **SMALL))
    b = gen_scenario(ScenarioSpec(seed=2, **SMALL))
    assert not np.array_equal(a.train.vectors, b.train.vectors)


def test_scenario_counts():
    spec = ScenarioSpec(seed=0, **SMALL)
    sc = gen_scenario(spec)
    labels = spec.base_labels + spec.novel_labels
    assert len(sc.train) == len(labels) * 100
    for lab in labels:
        assert sc.test.labels.count(lab) == 40
        assert sc.train.labels.count(lab) == 100


@pytest.mark.parametrize("seed", range(5))
def test_scenario1_constraints(seed):
    spec = ScenarioSpec(scenario=1, seed=seed, **SMALL)
    means = list(gen_scenario(spec).means.values())
    for i in range(len(means)):
        for j in range(i):
            assert _dist(means[i], means[j]) >= spec.separation - 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_scenario2_constraints(seed):
    spec = ScenarioSpec(scenario=2, novel_count=3, seed=seed, **SMALL)
    m = gen_scenario(spec).means
    novel = [m[k] for k in spec.novel_labels]
    base = [m[k] for k in spec.base_labels]
    for i in range(len(novel)):
        for j in range(i):
            assert _dist(novel[i], novel[j]) <= spec.novel_novel_gap + 1e-9
        assert min(_dist(novel[i], b) for b in base) >= spec.separation - 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_scenario3_constraints(seed):
    spec = ScenarioSpec(scenario=3, novel_base_gap=0.5, separation=10.0, seed=seed, **SMALL)
    m = gen_scenario(spec).means
    partners = []
    for lab in spec.novel_labels:
        near = [b for b in spec.base_labels if _dist(m[lab], m[b]) <= 0.5 + 1e-9]
        assert len(near) == 1
        partners.append(near[0])
    assert len(set(partners)) == len(partners)


def test_scenario3_infeasible_gap():
    with pytest.raises(ScenarioError):
        gen_scenario(ScenarioSpec(scenario=3, novel_base_gap=5.0, separation=8.0, **SMALL))


def test_check_constraints_detects_violation():
    spec = ScenarioSpec(base_count=2, novel_count=0, separation=3.0, dims=2)
    with pytest.raises(ScenarioError):
        check_constraints(spec, {"base0": np.zeros(2), "base1": np.ones(2)})


# -- evaluate --------------------------------------------------------------------------

def _balanced_test(per=10):
    labels = [f"base{i}" for i in range(5)] + ["novel0", "novel1"]
    labs = tuple(lab for lab in labels for _ in range(per))
    return FeatureSet(1, labs, np.zeros((len(labs), 1))), labels[:5], labels[5:]


def test_evaluate_oracle_model():
    test, base, novel = _balanced_test()
    res = evaluate(lambda X: np.array(test.labels, dtype=object), test, base, novel)
    assert (res.overall_err, res.base_err, res.novel_err) == (0.0, 0.0, 0.0)


def test_evaluate_constant_model():
    test, base, novel = _balanced_test()
    res = evaluate(lambda X: np.full(len(X), "base0", dtype=object), test, base, novel)
    assert res.overall_fraction == Fraction(6, 7)
    assert res.overall_err == pytest.approx(600 / 7)
    assert res.base_err == 80.0 and res.novel_err == 100.0


def test_evaluate_stray_labels():
    test, base, novel = _balanced_test()
    with pytest.raises(ValueError):
        evaluate(lambda X: X, test, base[:-1], novel)


@pytest.mark.parametrize("counts", [(10, 3, 4, 1), (1250, 17, 500, 499), (7, 0, 3, 3)])
def test_decomposition_identity(counts):
    bt, bw, nt, nw = counts
    r = TrialResult("m", 1, bt, bw, nt, nw)
    weighted = (Fraction(bw, bt) * bt + Fraction(nw, nt) * nt) / (bt + nt)
    assert r.overall_fraction == weighted
    assert r.overall_err == pytest.approx((bt * r.base_err + nt * r.novel_err) / (bt + nt), abs=1e-12)


# -- harness ----------------------------------------------------------------------------

def test_bench_single_row():
    rows = run_bench(ScenarioSpec(**SMALL), ["ncm"], [1], trials=1)
    assert len(rows) == 1 and rows[0].method == "ncm" and rows[0].trials == 1


def test_bench_csv_deterministic():
    spec = ScenarioSpec(seed=3, **SMALL)
    cfg = TrainConfig(iters=20)
    a = format_csv(run_bench(spec, ["ncm", "pknn", "gen-lsne"], [1, 3], trials=2, cfg=cfg))
    b = format_csv(run_bench(spec, ["ncm", "pknn", "gen-lsne"], [1, 3], trials=2, cfg=cfg))
    assert a == b
    lines = a.split("\n")
    assert lines[0] == "method,samples,overall_err,base_err,novel_err,trials"
    assert len(lines) == 1 + 6 + 1 and lines[-1] == ""


def test_bench_unknown_method():
    with pytest.raises(ValueError, match="unknown"):
        run_bench(ScenarioSpec(**SMALL), ["svm"], [1])


def test_ncm_row_matches_manual_composition():
    spec = ScenarioSpec(seed=9, **SMALL)
    rows, trials = run_bench(spec, ["ncm"], [1], trials=1, return_trials=True)
    ctx = prepare_trial(spec, 9, BenchOptions(), need_net=False)
    protos = ncm_build(ctx.bank, draw_low_shot(ctx.novel_train, 1, 9))
    manual = evaluate(protos, ctx.scenario.test, ctx.scenario.base_labels, ctx.scenario.novel_labels, "ncm", 1)
    assert trials[0] == manual
    assert rows[0].overall_err == manual.overall_err


def test_mask_degeneracy_through_harness():
    spec = ScenarioSpec(seed=4, **SMALL)
    cfg = TrainConfig(iters=30, grad_dropout_p=1.0)
    plain = run_bench(spec, ["gen-lsne"], [1, 3], trials=1, cfg=cfg)
    drop = run_bench(spec, ["gen-lsne-graddrop"], [1, 3], trials=1, cfg=cfg)
    for a, b in zip(plain, drop):
        assert (a.overall_err, a.base_err, a.novel_err) == (b.overall_err, b.base_err, b.novel_err)


def test_draw_low_shot_without_replacement():
    pool = {"n": np.arange(10.0)[:, None]}
    got = draw_low_shot(pool, 10, 0)["n"]
    assert sorted(got.ravel()) == list(range(10))
    with pytest.raises(ValueError):
        draw_low_shot(pool, 11, 0)


# -- GMM fidelity -------------------------------------------------------------------------

def test_gmm_fidelity_single_gaussian_family():
    spec = ScenarioSpec(dims=16, class_mixtures=1, train_per_class=300, test_per_class=100, seed=5,
                        separation=4.0)
    sc = gen_scenario(spec)
    res = gmm_fidelity(sc.train, sc.test, mixtures=(1,))
    assert abs(res.by_mixtures[1] - res.full_accuracy) <= 1.0


def test_gmm_fidelity_deterministic():
    sc = gen_scenario(ScenarioSpec(seed=6, **SMALL))
    from lsne.optim import base_train_config

    cfg = base_train_config(iters=50)
    a = gmm_fidelity(sc.train, sc.test, mixtures=(1, 3), cfg=cfg)
    b = gmm_fidelity(sc.train, sc.test, mixtures=(1, 3), cfg=cfg)
    assert a == b
    assert [r[0] for r in a.rows()] == ["full", "1", "3"]
