import csv
import json

import pytest
import yaml

from racsim.cli import (
    COMPARE_COLUMNS,
    byzantine_cast,
    main,
    parse_float_list,
    parse_int_list,
    parse_seed_range,
    resolve_out_dir,
)


def small_scenario(**over):
    data = {
        "algorithm": "rac",
        "seed": 1,
        "orgs": {"alpha": 3, "beta": 3},
        "latency": {"mean_ms": 3, "jitter_ms": 1},
        "duration_ms": 1500,
        "workload": {"rate_per_ms": 0.1, "total_requests": 12},
        "risk": {
            "trace_length": 60, "trees": 30, "subsample": 16,
            "kappa": 6.0, "alphabet": 6, "noise": 0.0,
        },
    }
    data.update(over)
    return data


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "scenario.yaml"
    path.write_text(yaml.safe_dump(small_scenario()))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ------------------------------------------------------------------ run


def test_run_writes_artifacts(scenario_file, tmp_path, capsys):
    out = tmp_path / "a"
    assert main(["run", "--scenario", str(scenario_file), "--out", str(out)]) == 0
    for name in ("events.ldjson", "metrics.csv", "verdicts.csv", "manifest.json"):
        assert (out / name).exists()
    assert "12 committed" in capsys.readouterr().out
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "run" and manifest["seed"] == 1
    rows = read_csv(out / "metrics.csv")
    assert rows[0] == ["section", "name", "value"]
    assert any(r[1] == "committed" and r[2] == "12" for r in rows)


def test_run_reruns_byte_identical(scenario_file, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    main(["run", "--scenario", str(scenario_file), "--out", str(out_a)])
    main(["run", "--scenario", str(scenario_file), "--out", str(out_b)])
    for name in ("events.ldjson", "metrics.csv", "verdicts.csv"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
    # the manifests differ only by timestamp and target directory
    a = json.loads((out_a / "manifest.json").read_text())
    b = json.loads((out_b / "manifest.json").read_text())
    for volatile in ("created_unix", "output_dir"):
        a.pop(volatile), b.pop(volatile)
    assert a == b


def test_run_seed_override_changes_run(scenario_file, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    main(["run", "--scenario", str(scenario_file), "--out", str(out_a)])
    main(["run", "--scenario", str(scenario_file), "--seed", "9", "--out", str(out_b)])
    manifest = json.loads((out_b / "manifest.json").read_text())
    assert manifest["seed"] == 9
    assert (out_a / "events.ldjson").read_bytes() != (out_b / "events.ldjson").read_bytes()


def test_run_invalid_scenario_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(small_scenario(algorithm="nope")))
    assert main(["run", "--scenario", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "invalid scenario" in capsys.readouterr().err


def test_run_invariant_violation_exits_3(tmp_path, capsys):
    path = tmp_path / "mut.yaml"
    path.write_text(yaml.safe_dump(small_scenario(inject=["double_accountant"])))
    out = tmp_path / "o"
    assert main(["run", "--scenario", str(path), "--out", str(out)]) == 3
    assert "invariant violated: election_safety" in capsys.readouterr().err
    # artifacts still land for the postmortem
    assert (out / "events.ldjson").exists()


# -------------------------------------------------------------- compare


def test_compare_grid_rows_and_columns(tmp_path, capsys):
    out = tmp_path / "cmp"
    code = main([
        "compare", "--nodes", "4", "--byz", "0", "--seeds", "0",
        "--algo", "both", "--out", str(out),
    ])
    assert code == 0
    rows = read_csv(out / "compare.csv")
    assert rows[0] == list(COMPARE_COLUMNS)
    assert [r[0] for r in rows[1:]] == ["rac", "raft"]
    for row in rows[1:]:
        assert row[1] == "4" and row[2] == "0" and row[3] == "0"
        assert float(row[5]) > 0  # throughput
        assert row[8] == "0"  # committed_tampered
    assert "2 rows" in capsys.readouterr().out


def test_compare_default_grid_arithmetic():
    nodes = parse_int_list("5,10,20,30", "nodes")
    seeds = parse_seed_range("1..20")
    assert len(nodes) * len(seeds) * 2 == 160


def test_compare_flags_tampered_raft_commits(tmp_path):
    out = tmp_path / "cmp"
    main([
        "compare", "--nodes", "5", "--byz", "0.4", "--seeds", "0",
        "--algo", "raft", "--out", str(out),
    ])
    rows = read_csv(out / "compare.csv")
    assert len(rows) == 2
    assert int(rows[1][8]) > 0


def test_compare_bad_grid_exits_2(tmp_path, capsys):
    assert main(["compare", "--seeds", "7..2", "--out", str(tmp_path)]) == 2
    assert "invalid grid" in capsys.readouterr().err
    assert main(["compare", "--nodes", "5,x", "--out", str(tmp_path)]) == 2
    assert main(["compare", "--byz", "1.5", "--out", str(tmp_path)]) == 2


def test_byzantine_cast_composition():
    assert byzantine_cast(5, 0.0) == {"tamper_accountant": [], "collude_evaluator": []}
    cast = byzantine_cast(10, 0.2)
    assert cast["collude_evaluator"] == ["alpha-0"]
    assert cast["tamper_accountant"] == ["beta-4"]
    cast = byzantine_cast(4, 0.5)
    assert cast["collude_evaluator"] == []
    assert cast["tamper_accountant"] == ["beta-1", "beta-0"]


# ----------------------------------------------------------- eval-topsis


def test_eval_topsis_reference_ranking(tmp_path, capsys):
    out = tmp_path / "top"
    assert main(["eval-topsis", "--out", str(out)]) == 0
    console = capsys.readouterr().out
    assert "ranking: Tendermint BFT > RAC > HHRAFT > Beh-Raft > CRAFT" in console
    rows = read_csv(out / "topsis.csv")
    assert rows[0] == ["algorithm", "s_plus", "s_minus", "closeness", "rank"]
    by_name = {r[0]: r for r in rows[1:]}
    assert by_name["Tendermint BFT"][4] == "1"
    # the protocol under study does not come out on top of its own rubric
    assert by_name["RAC"][4] == "2"
    for row in rows[1:]:
        assert 0.0 < float(row[3]) < 1.0


def test_eval_topsis_single_row_degenerates(tmp_path, capsys):
    path = tmp_path / "one.csv"
    path.write_text(
        "algorithm,consensus_nodes,selection_method,weighted_nodes,"
        "bft_tolerance,controllability,attack_cost,resource_cost\n"
        "Solo,0,0.5,1,0.7,1,0.6,0.7\n"
    )
    out = tmp_path / "top"
    assert main(["eval-topsis", "--matrix", str(path), "--out", str(out)]) == 0
    assert "ideal solutions coincide" in capsys.readouterr().out
    rows = read_csv(out / "topsis.csv")
    assert float(rows[1][3]) == 0.5


def test_eval_topsis_missing_column_exits_2(tmp_path, capsys):
    path = tmp_path / "short.csv"
    path.write_text("algorithm,consensus_nodes\nSolo,0\n")
    assert main(["eval-topsis", "--matrix", str(path), "--out", str(tmp_path)]) == 2
    assert "invalid matrix" in capsys.readouterr().err


# ------------------------------------------------------------ risk-demo


def test_risk_demo_flags_synthetic_attacker(tmp_path, capsys):
    out = tmp_path / "risk"
    assert main(["risk-demo", "--out", str(out)]) == 0
    console = capsys.readouterr().out
    assert "node-09" in console and "<- flagged" in console
    rows = read_csv(out / "scores.csv")
    flagged = [r[0] for r in rows[1:] if r[2] == "1"]
    assert flagged == ["node-09"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["flagged"] == ["node-09"]


def test_risk_demo_trace_directory(tmp_path, capsys):
    traces = tmp_path / "traces"
    traces.mkdir()
    for i in range(3):
        (traces / f"node_h-{i}.txt").write_text("0 1 2 3 4 5 " * 20)
    (traces / "node_odd-0.txt").write_text("9 8 7 6 9 8 7 6 " * 15)
    out = tmp_path / "risk"
    code = main(["risk-demo", "--traces", str(traces), "--out", str(out)])
    assert code == 0
    rows = read_csv(out / "scores.csv")
    assert [r[0] for r in rows[1:]] == ["h-0", "h-1", "h-2", "odd-0"]


def test_risk_demo_skips_below_minimum(tmp_path, capsys):
    traces = tmp_path / "traces"
    traces.mkdir()
    (traces / "node_a-0.txt").write_text("0 1 2")
    (traces / "node_a-1.txt").write_text("0 1 2")
    out = tmp_path / "risk"
    assert main(["risk-demo", "--traces", str(traces), "--out", str(out)]) == 0
    assert "assessment skipped" in capsys.readouterr().out
    assert not (out / "scores.csv").exists()
    assert json.loads((out / "manifest.json").read_text())["skipped"] is True


# ------------------------------------------------------------- plumbing


def test_out_dir_resolution(tmp_path, monkeypatch):
    monkeypatch.setenv("RACSIM_OUT", str(tmp_path / "from-env"))
    assert resolve_out_dir(None) == tmp_path / "from-env"
    assert (tmp_path / "from-env").is_dir()
    assert resolve_out_dir(str(tmp_path / "flag")) == tmp_path / "flag"


def test_flag_parsers():
    assert parse_seed_range("3..7") == (3, 4, 5, 6, 7)
    assert parse_seed_range("4") == (4,)
    assert parse_int_list("5, 10", "nodes") == (5, 10)
    assert parse_float_list("0,0.2", "byz") == (0.0, 0.2)
    for bad in ("7..2", "x", "1..y"):
        with pytest.raises(ValueError):
            parse_seed_range(bad)
    with pytest.raises(ValueError):
        parse_int_list("0", "nodes")
    with pytest.raises(ValueError):
        parse_float_list("-0.1", "byz")
