import json

from failsafe.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_placement_json(capsys, data_dir):
    code, out, _ = run_cli(capsys, "placement", "--model",
                           str(data_dir / "toy.toml"), "--gpus", "3",
                           "--mode", "cyclic", "--json")
    assert code == 0
    doc = json.loads(out)
    assert doc["world_size"] == 3
    assert doc["layers"][0]["tp_heads"] == {"0": [0, 1], "1": [2], "2": [3]}
    assert doc["layers"][1]["tp_heads"] == {"0": [3], "1": [0, 1], "2": [2]}


def test_placement_text_table(capsys, data_dir):
    code, out, _ = run_cli(capsys, "placement", "--model",
                           str(data_dir / "toy.toml"), "--gpus", "3",
                           "--mode", "naive")
    assert code == 0
    assert "layer   0" in out
    assert "ffn shards: g0:4  g1:4  g2:4" in out


def test_schedule_skewed_backlog_golden(capsys, data_dir):
    scenario = str(data_dir / "scenarios" / "skewed_backlog.json")
    code, out, _ = run_cli(capsys, "schedule", "--budget", "3",
                           "--scenario", scenario, "--scheduler", "load_aware")
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0] == "route request 0 -> rank 0"
    assert lines[3] == "route request 3 -> rank 1"
    assert lines[4].startswith("batch 0: 3 tokens  req0[0:1], req1[0:1], req2[0:1]")

    code, out, _ = run_cli(capsys, "schedule", "--budget", "3",
                           "--scenario", scenario, "--scheduler", "round_robin_fifo")
    assert code == 0
    assert "batch 0: 3 tokens  req0[0:3]" in out


def test_feasibility(capsys, data_dir):
    code, out, _ = run_cli(capsys, "feasibility", "--model",
                           str(data_dir / "llama70b.toml"), "--json")
    assert code == 0
    assert json.loads(out)["min_feasible_gpus"] == 3
    code, out, _ = run_cli(capsys, "feasibility", "--model",
                           str(data_dir / "mixtral8x22b.toml"), "--json")
    assert json.loads(out)["min_feasible_gpus"] == 5


def test_plan_recovery_json(capsys, data_dir):
    code, out, _ = run_cli(capsys, "plan-recovery", "--model",
                           str(data_dir / "llama70b.toml"), "--world", "8",
                           "--fail", "7", "--mode", "full", "--json")
    assert code == 0
    doc = json.loads(out)
    assert doc["latency_s"] > 0
    assert doc["total_pcie_bytes"] > 0
    code2, out2, _ = run_cli(capsys, "plan-recovery", "--model",
                             str(data_dir / "llama70b.toml"), "--world", "8",
                             "--fail", "7", "--mode", "oracle", "--json")
    assert json.loads(out2)["latency_s"] == 0.015


def test_verify_small(capsys):
    code, out, _ = run_cli(capsys, "verify", "--seeds", "3",
                           "--recovery-cases", "3")
    assert code == 0
    assert "checks passed" in out


def test_simulate_and_sweep(capsys, tmp_path, data_dir):
    trace = tmp_path / "trace.csv"
    trace.write_text("arrival_ts_s,input_len,output_len\n0.0,500,5\n0.5,800,3\n")
    out_jsonl = tmp_path / "metrics.jsonl"
    code, out, _ = run_cli(capsys, "simulate", "--model",
                           str(data_dir / "llama70b.toml"), "--requests",
                           str(trace), "--out", str(out_jsonl))
    assert code == 0
    assert json.loads(out)["completed"] == 2
    assert out_jsonl.exists()

    out_csv = tmp_path / "curve.csv"
    code, _, _ = run_cli(capsys, "sweep", "--model",
                         str(data_dir / "llama70b.toml"), "--requests",
                         str(trace), "--factors", "2,1", "--out", str(out_csv))
    assert code == 0
    lines = out_csv.read_text().splitlines()
    assert lines[0].startswith("scale_factor,request_rate")
    assert len(lines) == 3


def test_validation_errors_exit_one(capsys, data_dir, tmp_path):
    code, _, err = run_cli(capsys, "placement", "--model", "missing.toml",
                           "--gpus", "3", "--mode", "naive")
    assert code == 1
    assert "no such file" in err
    code, _, err = run_cli(capsys, "placement", "--model",
                           str(data_dir / "toy.toml"), "--gpus", "9",
                           "--mode", "naive")
    assert code == 1
    code, _, err = run_cli(capsys, "placement", "--model",
                           str(data_dir / "toy.toml"), "--gpus", "3",
                           "--mode", "bogus")
    assert code == 1


def test_bad_factors_exit_one(capsys, tmp_path, data_dir):
    trace = tmp_path / "t.csv"
    trace.write_text("arrival_ts_s,input_len,output_len\n0.0,10,2\n")
    code, _, err = run_cli(capsys, "sweep", "--model",
                           str(data_dir / "llama70b.toml"), "--requests",
                           str(trace), "--factors", "abc",
                           "--out", str(tmp_path / "c.csv"))
    assert code == 1
    assert "factors" in err
