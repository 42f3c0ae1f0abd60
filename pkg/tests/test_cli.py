from __future__ import annotations

import json

import pytest

from mrpaxos.cli import _overrides, build_parser, main

TINY = """
name = "tiny"
duration = 0.4
drain = 0.3
[rings]
groups = [1]
[[nodes]]
id = 1
roles = ["proposer", "acceptor"]
rings = [1]
[[nodes]]
id = 2
roles = ["learner"]
rings = [1]
[[clients]]
id = 9
groups = [1]
mode = "open"
rate = 200
"""


@pytest.fixture
def tiny(tmp_path):
    f = tmp_path / "tiny.toml"
    f.write_text(TINY)
    return str(f)


def test_sim_run_writes_outputs_and_report(tiny, tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["sim", "run", tiny, "--seed", "4", "--out", str(out), "--check"]) == 0
    printed = capsys.readouterr().out
    assert "scenario tiny seed 4" in printed
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 4 and manifest["delivered"]["2"] > 0
    assert main(["report", str(out)]) == 0
    assert capsys.readouterr().out.strip() == printed.strip()


def test_repeated_runs_write_identical_csv(tiny, tmp_path):
    for d in ("a", "b"):
        main(["sim", "run", tiny, "--seed", "2", "--out", str(tmp_path / d)])
    assert (tmp_path / "a" / "throughput.csv").read_bytes() == (tmp_path / "b" / "throughput.csv").read_bytes()


def test_set_overrides(tiny, tmp_path):
    main(["sim", "run", tiny, "--out", str(tmp_path / "o"), "--set", "duration=0.1", "--set", "name='short'"])
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["config"]["duration"] == 0.1
    assert manifest["scenario"] == "short"
    assert _overrides(["pacing.lambda=500", "network.latency=const:1"]) == {
        "pacing": {"lambda": 500}, "network": {"latency": "const:1"}}
    with pytest.raises(SystemExit):
        _overrides(["novalue"])


def test_sim_list(capsys):
    assert main(["sim", "list"]) == 0
    out = capsys.readouterr().out
    assert "recovery-new" in out and "safety-SEED" in out


def test_bad_scenario_exits_with_two(capsys):
    assert main(["sim", "run", "no-such-scenario"]) == 2
    assert "InvalidScenario" in capsys.readouterr().err


def test_parser_covers_tcp_commands():
    p = build_parser()
    a = p.parse_args(["node", "--id", "3", "--rings", "1,2", "--recover", "old"])
    assert (a.id, a.rings, a.recover) == (3, "1,2", "old")
    a = p.parse_args(["client", "--id", "9", "--group", "1,2", "--threads", "4"])
    assert a.threads == 4
    a = p.parse_args(["registry", "--groups", "1"])
    assert a.suspicion_ms == 2000.0


def test_bundled_skew_scenario_produces_csvs(tmp_path):
    out = tmp_path / "skew"
    assert main(["sim", "run", "skew-8rings", "--out", str(out), "--set", "duration=1.0", "--check"]) == 0
    rows = (out / "throughput.csv").read_text().splitlines()
    assert rows[0] == "t_s,ring,msgs,bits"
    assert any(r.split(",")[1] == "1" and int(r.split(",")[2]) > 0 for r in rows[1:])
    cdf = (out / "latency_cdf.csv").read_text().splitlines()
    assert cdf[-1].endswith(",1.000000") or cdf[-1].endswith(",1")
