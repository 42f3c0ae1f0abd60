from __future__ import annotations

import json
from importlib import resources

import pytest

from mrpaxos import harness, scenarios_gen
from mrpaxos.errors import InvalidScenario
from mrpaxos.scenario import load, parse_toml

BUNDLED = sorted(p.name[:-5] for p in resources.files("mrpaxos").joinpath("scenarios").iterdir()
                 if p.name.endswith(".toml"))

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


def test_bundled_names_are_known():
    assert "recovery-new" in BUNDLED and "dc-outage" in BUNDLED


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_file_matches_generator(name):
    text = resources.files("mrpaxos").joinpath("scenarios").joinpath(name + ".toml").read_text()
    generated = json.loads(json.dumps(scenarios_gen.generate(name)))
    assert parse_toml(text) == generated


def test_generated_families():
    assert scenarios_gen.generate("skew-4rings")["rings"]["groups"] == [1, 2, 3, 4]
    big = scenarios_gen.generate("large-ring-9")
    assert sum(1 for n in big["nodes"] if n["roles"] == ["learner"]) == 9
    s1, s2 = scenarios_gen.generate("safety-17"), scenarios_gen.generate("safety-17")
    assert s1 == s2
    assert scenarios_gen.generate("no-such-thing") is None


def test_load_from_text_path_and_overrides(tmp_path):
    sc = load(TINY, overrides={"duration": 0.2, "pacing": {"lambda": 500}})
    assert sc.name == "tiny" and sc.duration == 0.2
    f = tmp_path / "tiny.toml"
    f.write_text(TINY)
    assert load(str(f)).name == "tiny"


@pytest.mark.parametrize("patch, message", [
    ({"bogus": 1}, "unknown scenario keys"),
    ({"rings": {"groups": []}}, "no rings"),
    ({"nodes": [{"id": 0, "roles": ["acceptor"], "rings": [1]}]}, "ids start at 1"),
    ({"nodes": [{"id": 1, "roles": ["learner"], "rings": [1]}]}, "no acceptor"),
    ({"nodes": [{"id": 1, "roles": ["acceptor"], "rings": [5]}]}, "undeclared group"),
    ({"clients": [{"id": 9, "groups": [1], "mode": "bursty"}]}, "mode must be"),
    ({"faults": [{"at": 1.0, "kind": "meteor"}]}, "unknown fault kind"),
    ({"faults": [{"at": 1.0, "kind": "crash", "node": 77}]}, "undeclared node"),
])
def test_invalid_scenarios(patch, message):
    data = parse_toml(TINY)
    data.update(patch)
    with pytest.raises(InvalidScenario, match=message):
        load(data)


def test_unknown_name_and_bad_toml():
    with pytest.raises(InvalidScenario):
        load("not-a-scenario")
    with pytest.raises(InvalidScenario):
        parse_toml("x = = 1")


def test_same_seed_same_trace_different_seed_differs():
    a = harness.run(TINY, 5)
    b = harness.run(TINY, 5)
    c = harness.run(TINY, 6)
    assert a.trace_hash == b.trace_hash
    assert a.trace_hash != c.trace_hash
    assert a.delivered[2] > 50


def test_outputs_are_byte_identical(tmp_path):
    for d in ("a", "b"):
        harness.write_outputs(harness.run(TINY, 1), str(tmp_path / d))
    for f in ("throughput.csv", "latency_cdf.csv", "events.csv", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    text = harness.report(str(tmp_path / "a"))
    assert "scenario tiny seed 1" in text and "p50=" in text
