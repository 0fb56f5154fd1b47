import csv
import json
import math

import pytest

from sparsesr.cli import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_PROPOSER,
    ConfigError,
    RunConfig,
    dump_config,
    load_config,
    main,
    validate_trace,
)
from sparsesr.propose import API_KEY_ENV

SMALL = """
seeds = [1]
[data]
generator = "pkpd"
patients = 12
[search]
total_budget = 3
n_successors = 2
[proposer]
oracle_pool = true
"""


def write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_defaults():
    cfg = RunConfig()
    s = cfg.search_config()
    assert (s.total_budget, s.n_successors, s.depth_limit) == (30, 5, 10)
    assert s.exploration == math.sqrt(2) and s.rollout_is_just_node_reward
    assert (s.cycle.terms_per_round, s.cycle.keep_n_terms, s.cycle.first_round_n_candidates) == (5, 6, 10)


@pytest.mark.parametrize("suffix", [".toml", ".json"])
def test_config_round_trip(tmp_path, suffix):
    cfg = RunConfig.from_dict({"cycle": {"keep_n_terms": 0, "tlo": True, "tlo_bounds": [0.0, math.inf]},
                               "search": {"mode": "iterative"}, "seeds": [3, 4]})
    path = tmp_path / f"c{suffix}"
    dump_config(cfg, path)
    back = load_config(path)
    assert back.to_dict() == cfg.to_dict()
    assert back.cycle_config().keep_n_terms is None
    assert back.cycle_config().tlo_bounds == (0.0, None)
    path2 = tmp_path / f"d{suffix}"
    dump_config(back, path2)
    assert path2.read_text() == path.read_text()


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"data": {"source": "csv"}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"cycle": {"nonsense": 1}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"proposer": {"kind": "replay"}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"search": {"total_budget": 0}})
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "seeds = [", "bad.toml"))


def test_run_outputs_and_determinism(tmp_path):
    cfg = write(tmp_path, SMALL)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    for name in ("summary.json", "trace.jsonl", "best_equation.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert "started_at" not in summary and summary["seed"] == 1
    assert "wall_seconds" in json.loads((tmp_path / "a" / "timing.json").read_text())
    eq = (tmp_path / "a" / "best_equation.txt").read_text().splitlines()
    assert eq[0].startswith("dv_dt = ") and eq[1].startswith("dc_dt = ")
    assert validate_trace(tmp_path / "a" / "trace.jsonl") > 0


def test_multiple_seeds_get_subdirectories(tmp_path):
    cfg = write(tmp_path, SMALL.replace("seeds = [1]", "seeds = [1, 2]"))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "seed_1" / "summary.json").exists()
    assert (tmp_path / "o" / "seed_2" / "summary.json").exists()


def test_record_then_replay(tmp_path):
    cfg = write(tmp_path, SMALL)
    assert main(["replay-record", "--config", str(cfg), "--out", str(tmp_path / "rec")]) == 0
    transcript = tmp_path / "rec" / "transcript.jsonl"
    replay = write(tmp_path, SMALL.replace("oracle_pool = true", f'kind = "replay"\ntranscript = "{transcript}"'),
                   "r.toml")
    assert main(["run", "--config", str(replay), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rec" / "trace.jsonl").read_bytes() == (tmp_path / "rep" / "trace.jsonl").read_bytes()


def test_exit_codes(tmp_path, monkeypatch, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.toml")]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as info:
        main(["run", "--config", "x", "--bogus"])
    assert info.value.code == 2
    csv_cfg = write(tmp_path, 'seeds=[0]\n[data]\nsource="csv"\npath="/nonexistent.csv"\ntargets=["y"]\n')
    assert main(["run", "--config", str(csv_cfg), "--out", str(tmp_path / "o")]) == EXIT_DATA
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    llm = write(tmp_path, 'seeds=[0]\n[proposer]\nkind="llm"\n', "llm.toml")
    assert main(["run", "--config", str(llm), "--out", str(tmp_path / "l")]) == EXIT_PROPOSER


def test_help_documents_exit_codes(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    assert "exit codes:" in out and "configuration file" in out


def test_simulate_writes_trajectories(tmp_path):
    assert main(["simulate", "pkpd", "--variant", "chemo_radio", "--patients", "7", "--split", "0.6,0.2,0.2",
                 "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "pkpd_chemo_radio_seed0.csv")))
    assert len(rows) == 7 * 60 and {r["split"] for r in rows} == {"train", "val", "test"}
    manifest = json.loads((tmp_path / "pkpd_chemo_radio_seed0.json").read_text())
    assert manifest["n_rows"] == 420
    assert main(["simulate", "synthetic", "--variant", "3", "--patients", "2", "--out", str(tmp_path)]) == 0
    assert main(["simulate", "pkpd", "--variant", "bogus", "--out", str(tmp_path)]) == EXIT_DATA


def test_stress_writes_table(tmp_path, capsys):
    out = tmp_path / "s.csv"
    assert main(["stress", "collinearity", "--rho", "0.999", "--seeds", "2", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 2 and all(r["group_recall"] == "6" for r in rows)
    assert "6/6 groups" in capsys.readouterr().out


def test_eval(tmp_path, capsys):
    (tmp_path / "t.csv").write_text("y\n1\n2\n3\n")
    (tmp_path / "p.csv").write_text("y\n2\n2\n2\n")
    (tmp_path / "gt.txt").write_text("x\nsin(t)\n")
    (tmp_path / "pt.txt").write_text("0.5*sin(2*t)\n")
    assert main(["eval", "--pred", str(tmp_path / "p.csv"), "--truth", str(tmp_path / "t.csv"), "--targets", "y",
                 "--truth-terms", str(tmp_path / "gt.txt"), "--pred-terms", str(tmp_path / "pt.txt")]) == 0
    out = capsys.readouterr().out
    assert "NMSE = 1" in out and "Acc_0.1 = 0" in out and "term recall = 0.5" in out
