import json
import re

import pytest

from sead import cli
from sead.catalogue import definition_paths, mutant_paths, root, scenario_path

from . import oracles


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def mutant(stem):
    return next(p for p in mutant_paths() if p.name == f"{stem}.mdl.json")


def test_validate_catalogue(capsys):
    code, _, err = run_cli(capsys, "validate", *definition_paths())
    assert code == cli.EXIT_OK and err == ""


def test_validate_mutant_names_the_rule(capsys):
    code, _, err = run_cli(capsys, "validate", mutant("gapclose_unstable"))
    assert code == cli.EXIT_FINDINGS and "STABILITY_TERMINAL_UNSTABLE" in err


def test_validate_missing_file(capsys, tmp_path):
    code, _, _ = run_cli(capsys, "validate", tmp_path / "absent.json")
    assert code == cli.EXIT_USAGE


def test_validate_syntax_error_is_a_finding(capsys, tmp_path):
    bad = tmp_path / "bad.mdl.json"
    bad.write_text("{not json")
    code, out, _ = run_cli(capsys, "validate", "--json", bad)
    assert code == cli.EXIT_FINDINGS
    assert json.loads(out)[0]["diagnostics"][0]["severity"] == "error"


def test_verify_catalogue(capsys):
    assert run_cli(capsys, "verify")[0] == cli.EXIT_OK


@pytest.mark.parametrize("stem,rule", [
    ("gapclose_no_dn", "DEADLOCK_RISK"),
    ("gapclose_ra2", "UNREACHABLE_RESULT"),
    ("open_two_gaps_overlap", "SIM_PARTICIPANT_OVERLAP"),
])
def test_verify_mutant(capsys, stem, rule):
    code, out, _ = run_cli(capsys, "verify", "--json", mutant(stem))
    assert code == cli.EXIT_FINDINGS
    rules = {d["rule"] for d in json.loads(out)[0]["diagnostics"] if d["severity"] == "error"}
    assert rules == {rule}


def test_verify_enumerate_prints_outcomes(capsys):
    code, out, _ = run_cli(capsys, "verify", "--enumerate", "GAPCLOSE")
    assert code == cli.EXIT_OK
    assert "RS: A=PL B=PF" in out and "RA1: A=PL B=PL" in out


def test_run_twice_gives_identical_traces(capsys, tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for target in (a, b):
        assert run_cli(capsys, "run", scenario_path("join_tail"), "--seed", 42, "--trace", target)[0] == cli.EXIT_OK
    assert a.read_bytes() == b.read_bytes() and a.stat().st_size > 0


def test_total_loss_reports_aborts_and_exits_cleanly(capsys):
    code, out, _ = run_cli(capsys, "run", "join_tail", "--drop", 1.0, "--json")
    assert code == cli.EXIT_OK
    report = json.loads(out)
    assert report["stable"] and [row["result"] for row in report["summary"]] == ["RA1"]


def test_non_quiescent_run_exits_3_with_partial_trace(capsys, tmp_path):
    trace = tmp_path / "t.jsonl"
    code, _, _ = run_cli(capsys, "run", "gapclose", "--t-max", 5, "--trace", trace)
    assert code == cli.EXIT_NON_QUIESCENT
    last = json.loads(trace.read_text().splitlines()[-1])
    assert last["detail"]["reason"] == "NON_QUIESCENT"


def test_dot_for_join_tail_has_three_steps(capsys, tmp_path):
    dot = tmp_path / "g.dot"
    run_cli(capsys, "run", "join_tail", "--dot", dot)
    text = dot.read_text()
    assert text.startswith('digraph "JOIN_TAIL"')
    steps = re.findall(r'^\s*"(\w+)" \[label="\1: ', text, re.M)
    assert len(steps) == oracles.JOIN_TAIL_STEPS
    assert "TERMINATE" in text and '[label="RA1"]' in text


def test_export_dot(capsys, tmp_path):
    out = tmp_path / "gap.dot"
    assert run_cli(capsys, "export-dot", "GAPCLOSE", "-o", out)[0] == cli.EXIT_OK
    assert "cluster" in out.read_text()
    assert run_cli(capsys, "export-dot", "NOPE")[0] == cli.EXIT_USAGE


def test_config_file_and_flags(capsys, tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"drop": 1.0}))
    monkeypatch.setenv(cli.CONFIG_ENV, str(cfg))
    _, out, _ = run_cli(capsys, "run", "gapclose", "--json")
    assert json.loads(out)["summary"][0]["result"] == "RA1"
    # a flag beats the config file
    _, out, _ = run_cli(capsys, "run", "gapclose", "--json", "--drop", 0)
    assert json.loads(out)["summary"][0]["result"] == "RS"


def test_bad_config_is_a_usage_error(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"warp": 9}))
    assert run_cli(capsys, "run", "gapclose", "--config", cfg)[0] == cli.EXIT_USAGE


def test_unknown_scenario_and_bad_flags(capsys):
    assert run_cli(capsys, "run", "no_such_scenario")[0] == cli.EXIT_USAGE
    assert run_cli(capsys, "run", "gapclose", "--drop", "lots")[0] == cli.EXIT_USAGE
    assert run_cli(capsys, "--help")[0] == cli.EXIT_OK


def test_parallel_runs_match_sequential(capsys, tmp_path):
    names = ["gapclose", "join_tail", "split"]
    seq, par = tmp_path / "seq", tmp_path / "par"
    run_cli(capsys, "run", *names, "--seed", 3, "--trace", seq)
    run_cli(capsys, "run", *names, "--seed", 3, "--trace", par, "--jobs", 3)
    for name in names:
        assert (seq / f"{name}.jsonl").read_bytes() == (par / f"{name}.jsonl").read_bytes()


def test_catalogue_root_is_packaged():
    assert (root() / "scenarios").is_dir()
