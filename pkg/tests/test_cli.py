import subprocess
import sys

import pytest

from lsne.cli import main

SMALL = ["--dims", "8", "--train-per-class", "60", "--test-per-class", "20"]


def _run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def _pipeline(d, capsys, seed=1, samples=3, extra_expand=()):
    assert _run(["gen-data", *SMALL, "--seed", seed, "--out", d], capsys)[0] == 0
    assert _run(["train-base", "--train", d / "train.features", "--labels", d / "labels.txt",
                 "--hidden", 8, "--iters", 200, "--seed", seed, "--out", d / "base.json"], capsys)[0] == 0
    assert _run(["fit-gmm", "--train", d / "train.features", "--labels", d / "labels.txt",
                 "--mixtures", 3, "--seed", seed, "--out", d / "bank.json"], capsys)[0] == 0
    assert _run(["expand", "--model", d / "base.json", "--bank", d / "bank.json",
                 "--novel-features", d / "train.features", "--labels", d / "labels.txt",
                 "--samples", samples, "--iters", 100, "--seed", seed, *extra_expand,
                 "--out", d / "expanded.json"], capsys)[0] == 0
    code, out, _ = _run(["eval", "--model", d / "expanded.json", "--test", d / "test.features",
                         "--labels", d / "labels.txt"], capsys)
    assert code == 0
    return out


def test_gen_data_files_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert _run(["gen-data", *SMALL, "--seed", 1, "--out", d], capsys)[0] == 0
    for name in ("train.features", "test.features", "labels.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    rows = (a / "train.features").read_text().splitlines()[1:]
    assert len(rows) == (5 + 2) * 60
    assert (a / "labels.txt").read_text().splitlines()[0] == "base:base0"
    assert (a / "labels.txt").read_text().splitlines()[-1] == "novel:novel1"


def test_gen_data_zero_base_is_usage_error(tmp_path, capsys):
    code, _, err = _run(["gen-data", "--base", 0, "--out", tmp_path], capsys)
    assert code == 1 and "error" in err


def test_unknown_flag_is_usage_error(tmp_path, capsys):
    assert _run(["gen-data", "--bogus", "--out", tmp_path], capsys)[0] == 1


def test_full_pipeline_deterministic(tmp_path, capsys):
    out1 = _pipeline(tmp_path / "r1", capsys)
    out2 = _pipeline(tmp_path / "r2", capsys)
    assert out1 == out2
    assert out1.startswith("overall_err=") and "base_err=" in out1 and "novel_err=" in out1
    assert (tmp_path / "r1" / "expanded.json").read_bytes() == (tmp_path / "r2" / "expanded.json").read_bytes()


def test_expand_one_shot_and_deep(tmp_path, capsys):
    _pipeline(tmp_path, capsys, samples=1, extra_expand=("--mode", "deep", "--new-features", 2,
                                                         "--grad-dropout", 0.5))


def test_bench_two_rows(tmp_path, capsys):
    code, out, _ = _run(["bench", *SMALL, "--methods", "ncm", "--samples", "1,3", "--trials", 2], capsys)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "method,samples,overall_err,base_err,novel_err,trials"
    assert len(lines) == 3


def test_bench_out_file_deterministic(tmp_path, capsys):
    argv = ["bench", *SMALL, "--methods", "ncm,pknn", "--samples", "1", "--seed", 3]
    assert _run([*argv, "--out", tmp_path / "a.csv"], capsys)[0] == 0
    assert _run([*argv, "--out", tmp_path / "b.csv"], capsys)[0] == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_bench_unknown_method(capsys):
    assert _run(["bench", "--methods", "svm"], capsys)[0] == 1


def test_bench_matches_manual_composition(tmp_path, capsys):
    seed = 4
    _, csv_text, _ = _run(["bench", *SMALL, "--methods", "gen-lsne", "--samples", 3, "--hidden", 8,
                           "--mixtures", 3, "--iters", 100, "--seed", seed], capsys)
    # bench trains its base net with the default base iterations; match them here
    d = tmp_path
    _run(["gen-data", *SMALL, "--seed", seed, "--out", d], capsys)
    _run(["train-base", "--train", d / "train.features", "--labels", d / "labels.txt", "--hidden", 8,
          "--seed", seed, "--out", d / "base.json"], capsys)
    _run(["fit-gmm", "--train", d / "train.features", "--labels", d / "labels.txt", "--mixtures", 3,
          "--seed", seed, "--out", d / "bank.json"], capsys)
    _run(["expand", "--model", d / "base.json", "--bank", d / "bank.json", "--novel-features",
          d / "train.features", "--labels", d / "labels.txt", "--samples", 3, "--iters", 100,
          "--seed", seed, "--out", d / "exp.json"], capsys)
    _, out, _ = _run(["eval", "--model", d / "exp.json", "--test", d / "test.features",
                      "--labels", d / "labels.txt"], capsys)
    fields = dict(kv.split("=") for kv in out.split())
    row = csv_text.splitlines()[1].split(",")
    assert row[2:5] == [fields["overall_err"], fields["base_err"], fields["novel_err"]]


def test_gmm_fidelity_command(tmp_path, capsys):
    _run(["gen-data", *SMALL, "--seed", 2, "--out", tmp_path], capsys)
    code, out, _ = _run(["gmm-fidelity", "--train", tmp_path / "train.features", "--test",
                         tmp_path / "test.features", "--labels", tmp_path / "labels.txt",
                         "--mixtures", "1,2", "--iters", 100], capsys)
    assert code == 0
    assert out.splitlines()[0] == "mixtures,accuracy"
    assert [line.split(",")[0] for line in out.splitlines()[1:]] == ["full", "1", "2"]


def test_missing_file_is_data_error(tmp_path, capsys):
    code, _, err = _run(["eval", "--model", tmp_path / "nope.json", "--test", tmp_path / "t"], capsys)
    assert code == 2 and err.count("\n") == 1


def test_malformed_features_is_data_error(tmp_path, capsys):
    (tmp_path / "bad").write_text("lsne-features 1 dims=2\na,1\n")
    code, _, err = _run(["fit-gmm", "--train", tmp_path / "bad", "--out", tmp_path / "b.json"], capsys)
    assert code == 2 and "line 2" in err


def test_label_conflict_is_data_error(tmp_path, capsys):
    _run(["gen-data", *SMALL, "--seed", 1, "--out", tmp_path], capsys)
    _run(["train-base", "--train", tmp_path / "train.features", "--labels", tmp_path / "labels.txt",
          "--hidden", 4, "--iters", 10, "--out", tmp_path / "m.json"], capsys)
    (tmp_path / "other.txt").write_text("base:zzz\n")
    code, _, _ = _run(["fit-gmm", "--train", tmp_path / "train.features", "--labels", tmp_path / "other.txt",
                       "--out", tmp_path / "b.json"], capsys)
    assert code == 2


def test_numerical_failure_exit_code(tmp_path, capsys):
    _run(["gen-data", *SMALL, "--seed", 1, "--out", tmp_path], capsys)
    code, _, err = _run(["train-base", "--train", tmp_path / "train.features", "--labels",
                         tmp_path / "labels.txt", "--lr", "1e300", "--iters", 50, "--out", tmp_path / "m.json"],
                        capsys)
    assert code == 3 and "numerical" in err


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lsne.cli", "gen-data", *SMALL, "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
