import csv
import json

import pytest

from gpssm import cli
from gpssm.gauss import NotPositiveDefinite

FAST_FIT = {"variant": "factorised_nonlinear", "n_inducing": 5, "n_iter": 20, "grid": [-3, 1.2, 21],
            "pair_samples": 50, "elbo_samples": 20}


def write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_generate_is_deterministic(tmp_path):
    cfg = write(tmp_path, {})
    assert cli.main(["generate", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["generate", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "b")]) == 0
    a, b = (tmp_path / "a" / "data.csv").read_bytes(), (tmp_path / "b" / "data.csv").read_bytes()
    assert a == b and len(a.splitlines()) == 51
    meta = json.loads((tmp_path / "a" / "data.json").read_text())
    assert meta["Q"] == 0.01 and meta["R"] == 0.1


def test_fit_outputs(tmp_path):
    out = tmp_path / "fit"
    assert cli.main(["fit", "--config", write(tmp_path, FAST_FIT), "--out", str(out)]) == 0
    grid = rows(out / "grid.csv")
    assert grid[0] == ["x", "mean", "std"] and len(grid) == 22
    pairs = rows(out / "pairs.csv")
    assert pairs[0] == ["t", "mean_t", "mean_t1", "c00", "c01", "c11"] and len(pairs) == 50
    report = json.loads((out / "report.json").read_text())
    assert {"config", "elbo", "metrics", "trace_path"} <= set(report)
    assert 0.0 <= report["metrics"]["coverage2sigma"] <= 1.0
    assert report["config"]["n_inducing"] == 5 and report["config"]["learning_rate"] == 0.01
    assert (out / report["trace_path"]).exists()


def test_echoed_config_reproduces_fit(tmp_path):
    first = tmp_path / "first"
    assert cli.main(["fit", "--config", write(tmp_path, FAST_FIT), "--out", str(first)]) == 0
    echo = str(first / "fit_config.json")
    second = tmp_path / "second"
    assert cli.main(["fit", "--config", echo, "--out", str(second)]) == 0
    for name in ("grid.csv", "pairs.csv", "trace.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_fit_from_dataset_file(tmp_path):
    assert cli.main(["generate", "--out", str(tmp_path), "--seed", "1"]) == 0
    doc = dict(FAST_FIT, dataset=str(tmp_path / "data.csv"))
    assert cli.main(["fit", "--config", write(tmp_path, doc), "--out", str(tmp_path / "f")]) == 0


@pytest.mark.parametrize("doc", [
    {"bogus_key": 1},
    {"grid": [-3, 1.2, 1]},
    {"n_inducing": 0},
    {"variant": "nope"},
    {"dataset": "/no/such/file.csv"},
])
def test_config_errors_exit_2(tmp_path, doc):
    assert cli.main(["fit", "--config", write(tmp_path, doc), "--out", str(tmp_path)]) == 2


def test_unreadable_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["generate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert cli.main(["generate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2


def test_numerical_failure_exits_3(tmp_path, monkeypatch):
    from gpssm import estimator

    def boom(self, Y, y=None):
        raise NotPositiveDefinite("forced")

    monkeypatch.setattr(estimator.GPSSM, "fit", boom)
    assert cli.main(["fit", "--config", write(tmp_path, FAST_FIT), "--out", str(tmp_path)]) == 3


def test_oracle_reports(tmp_path):
    doc = {"oracle_configs": 1, "oracle_samples": 2000}
    out = tmp_path / "o"
    assert cli.main(["oracle", "--config", write(tmp_path, doc), "--out", str(out)]) == 0
    bound = json.loads((out / "bound_report.json").read_text())
    assert bound["violations"] == 0 and len(bound["checks"]) == 5
    assert {"elbo", "stderr", "log_evidence", "violation"} <= set(bound["checks"][0])
    nm = json.loads((out / "nonmarkov_report.json").read_text())
    assert nm["point_mass"]["max_deviation"] <= 1e-9 and nm["spread"]["max_deviation"] >= 1e-3


def test_oracle_violation_exits_4(tmp_path, monkeypatch):
    from gpssm import experiment

    monkeypatch.setattr(experiment, "bound_check", lambda **kw: [{"violation": True}])
    assert cli.main(["oracle", "--out", str(tmp_path)]) == 4


def test_benchmark_outputs(tmp_path):
    doc = {"bench_variants": ["factorised_linear"], "bench_lengths": [10, 20], "bench_chunked": ["non_factorised"],
           "bench_tau": 5, "bench_repeats": 2, "bench_inducing": 4, "bench_samples": 2}
    out = tmp_path / "b"
    assert cli.main(["benchmark", "--config", write(tmp_path, doc), "--out", str(out), "--threads", "1"]) == 0
    bench = rows(out / "bench.csv")
    assert bench[0] == ["variant", "T", "tau", "median_seconds"] and len(bench) == 5
    slopes = json.loads((out / "bench.json").read_text())["slopes"]
    assert {(s["variant"], s["tau"]) for s in slopes} == {("factorised_linear", None), ("non_factorised", 5)}
