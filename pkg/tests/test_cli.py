import json

import pytest

from coexplore import cli

TINY_SEARCH = {"epochs": 2, "steps_per_epoch": 3, "lr_alpha": 1.0}


@pytest.fixture
def est_path(quick_estimator, tmp_path):
    path = tmp_path / "est.json"
    quick_estimator.save(path)
    return str(path)


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"search": TINY_SEARCH, "delta0": 0.1}))
    return str(path)


def test_sample_deterministic_and_prints_refs(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert cli.main(["sample", "--n", "200", "--seed", "4", "--out", str(a)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert set(summary["refs"]) == {"latency_ms", "energy_mJ", "area_mm2"}
    assert cli.main(["sample", "--n", "200", "--seed", "4", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes() and len(a.read_text().splitlines()) == 200


@pytest.mark.parametrize("doc", ['{"layers": 8, "bogus": 1}', '{"search": {"epochs": 0}}',
                                 '{"cost": {"c_power": 1}}', "not json", '{"constraints": "x<=1"}'])
def test_malformed_config_exits_2_without_partial_file(tmp_path, doc):
    cfg = tmp_path / "bad.json"
    cfg.write_text(doc)
    out = tmp_path / "d.jsonl"
    assert cli.main(["sample", "--config", str(cfg), "--n", "5", "--out", str(out)]) == 2
    assert not out.exists()


def test_missing_config_is_io_error(tmp_path):
    assert cli.main(["sample", "--config", str(tmp_path / "nope.json"), "--n", "5",
                     "--out", str(tmp_path / "x")]) == 3


def test_pretrain_rejects_bad_dataset(tmp_path):
    data = tmp_path / "d.jsonl"
    data.write_text('{"arch": [0]}\n')
    assert cli.main(["pretrain", "--dataset", str(data), "--out", str(tmp_path / "m.json")]) == 2
    assert cli.main(["pretrain", "--dataset", str(tmp_path / "missing.jsonl"),
                     "--out", str(tmp_path / "m.json")]) == 3


def test_pretrain_reports_and_is_deterministic(tmp_path, capsys):
    data = tmp_path / "d.jsonl"
    assert cli.main(["sample", "--n", "10000", "--seed", "0", "--out", str(data)]) == 0
    capsys.readouterr()
    for name in ("m1.json", "m2.json"):
        assert cli.main(["pretrain", "--dataset", str(data), "--out", str(tmp_path / name),
                         "--epochs", "1"]) == 0
    report = json.loads(capsys.readouterr().out.splitlines()[0])
    assert set(report["holdout_accuracy"]) == {"latency_ms", "energy_mJ", "area_mm2"}
    assert (tmp_path / "m1.json").read_bytes() == (tmp_path / "m2.json").read_bytes()


def test_search_unconstrained_with_constraints_exits_2(tmp_path, est_path, config):
    code = cli.main(["search", "--config", config, "--estimator", est_path, "--mode", "unconstrained",
                     "--constraints", "latency_ms<=1", "--out", str(tmp_path / "r")])
    assert code == 2


def test_search_bad_constraint_names_token(tmp_path, est_path, config, capsys):
    code = cli.main(["search", "--config", config, "--estimator", est_path,
                     "--constraints", "energy_mJ<=0.5,latency_ms=>3", "--out", str(tmp_path / "r")])
    assert code == 2 and "latency_ms=>3" in capsys.readouterr().err


def test_search_missing_estimator_exits_before_training(tmp_path, config):
    code = cli.main(["search", "--config", config, "--estimator", str(tmp_path / "none.json"),
                     "--out", str(tmp_path / "r")])
    assert code == 3
    assert not (tmp_path / "r").exists()


def test_search_writes_artifacts_deterministically(tmp_path, est_path, config, capsys):
    args = ["search", "--config", config, "--estimator", est_path, "--constraints", "latency_ms<=100",
            "--seed", "2"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert "in-constraint" in capsys.readouterr().out
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("trajectory.csv", "solution.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "run.log").exists()


def test_search_infeasible_exits_1(tmp_path, est_path, config, capsys):
    code = cli.main(["search", "--config", config, "--estimator", est_path, "--mode", "nas-then-hw",
                     "--constraints", "latency_ms<=0.000001", "--out", str(tmp_path / "r")])
    assert code == 1 and "out-of-constraint" in capsys.readouterr().out


def test_search_parallel_seeds_match_serial(tmp_path, est_path, config):
    base = ["search", "--config", config, "--estimator", est_path, "--seeds", "2", "--mode", "unconstrained"]
    assert cli.main(base + ["--out", str(tmp_path / "serial")]) == 0
    assert cli.main(base + ["--jobs", "2", "--out", str(tmp_path / "par")]) == 0
    for seed in ("seed-0000", "seed-0001"):
        for name in ("trajectory.csv", "solution.json"):
            assert ((tmp_path / "serial" / seed / name).read_bytes()
                    == (tmp_path / "par" / seed / name).read_bytes())


def test_lambda_grid_parsing():
    grid = cli._parse_lambdas("0.001:0.010:0.001")
    assert len(grid) == 10 and grid[0] == 0.001 and grid[-1] == 0.01
    assert cli._parse_lambdas("0.5,1") == [0.5, 1.0]
    with pytest.raises(cli.ConfigError):
        cli._parse_lambdas("1:0:0.1")


def test_sweep_writes_csv(tmp_path, est_path, config):
    out = tmp_path / "sweep.csv"
    assert cli.main(["sweep", "--config", config, "--estimator", est_path, "--lambda", "0.001:0.002:0.001",
                     "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "lambda,seed,error,latency_ms,energy_mJ,area_mm2,cost_hw" and len(lines) == 3


def test_autotune_json(tmp_path, est_path, config):
    out = tmp_path / "tune.json"
    code = cli.main(["autotune", "--config", config, "--estimator", est_path, "--mode", "hdx",
                     "--constraints", "latency_ms<=100", "--out", str(out)])
    doc = json.loads(out.read_text())
    assert doc["search_count"] == 1 and len(doc["control_values"]) == 1
    assert code == (0 if doc["success"] else 1)
    assert cli.main(["autotune", "--config", config, "--estimator", est_path,
                     "--constraints", "latency_ms<=1,area_mm2<=2"]) == 2


def test_report(tmp_path, capsys):
    assert cli.main(["report", str(tmp_path)]) == 2
    for i, ok in enumerate([True, False, True, True]):
        d = tmp_path / f"run{i}"
        d.mkdir()
        (d / "solution.json").write_text(json.dumps({
            "oracle": {"latency_ms": 1.0 + i, "energy_mJ": 0.1, "area_mm2": 3.0},
            "satisfied": {"latency_ms": ok}, "val_error": 0.4}))
    assert cli.main(["report", str(tmp_path), "--csv", str(tmp_path / "r.csv")]) == 0
    out = capsys.readouterr().out
    assert "satisfaction rate: 0.75" in out and "| latency_ms | 2.5 | 1 | 4 |" in out
    assert "satisfaction_rate,0.75" in (tmp_path / "r.csv").read_text()


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["search"])
    assert exc.value.code == 2
