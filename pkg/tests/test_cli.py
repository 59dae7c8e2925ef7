import json
import subprocess
import sys
from importlib.resources import files
from pathlib import Path

import pytest

from regguard.cli import main
from regguard.sim import MAX_EVIDENCE_KEPT

FIX = files("regguard") / "fixtures"


def fx(name):
    return str(FIX / name)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_lint_fixtures_ok(capsys):
    for name in ("fund.rules", "aml.rules"):
        code, out, _ = run(capsys, "rules-lint", "--rules", fx(name))
        assert code == 0 and out.rstrip().endswith("0 errors")
    code, out, _ = run(capsys, "rules-lint", fx("fund.rules"), "--format", "json")
    doc = json.loads(out)
    assert code == 0 and doc["ok"] and doc["rules"] == 2


def test_lint_errors_and_empty_file(capsys, tmp_path):
    bad = tmp_path / "bad.rules"
    bad.write_text("rule r on transfer(address to, uint256 amount):\n    amount * amount <= 5\n")
    code, out, _ = run(capsys, "rules-lint", str(bad))
    assert code == 1 and "error:2:" in out
    empty = tmp_path / "empty.rules"
    empty.write_text("")
    assert run(capsys, "rules-lint", str(empty))[0] == 0


def test_unreadable_and_missing_arguments_are_usage_errors(capsys, tmp_path):
    assert run(capsys, "rules-lint", str(tmp_path / "nope.rules"))[0] == 2
    assert run(capsys, "rules-lint")[0] == 2
    assert run(capsys, "validate", "--rules", fx("fund.rules"))[0] == 2
    assert run(capsys, "frobnicate")[0] == 2
    assert run(capsys, "simulate", "--config", fx("honest.toml"), "--jobs", "0")[0] == 2


def test_validate_shipped_rule_fixtures(capsys):
    code, out, _ = run(capsys, "validate", "--rules", fx("fund.rules"), "--state", fx("fund_state.json"), "--txs", fx("fund_txs.json"), "--format", "json")
    got = {r["label"]: r["decision"] for r in json.loads(out)["decisions"]}
    assert code == 1
    assert got == {"compliant": "Accept", "whitelist-miss": "Reject{whitelist}", "over-theta-max": "Reject{concentration}"}
    code, out, _ = run(capsys, "validate", "--rules", fx("aml.rules"), "--state", fx("aml_state.json"), "--txs", fx("aml_txs.json"))
    assert code == 1
    lines = dict((ln.split("\t")[0], ln.split("\t")[2]) for ln in out.splitlines())
    assert lines["12000-no-edd"] == "Reject{threshold}" and lines["12000-with-edd"] == "Accept"


def test_validate_all_accept_exits_zero(capsys, tmp_path):
    txs = json.loads(Path(fx("fund_txs.json")).read_text())
    txs["txs"] = [t for t in txs["txs"] if t["label"] == "compliant"]
    p = tmp_path / "txs.json"
    p.write_text(json.dumps(txs))
    assert run(capsys, "validate", "--rules", fx("fund.rules"), "--state", fx("fund_state.json"), "--txs", str(p))[0] == 0


def test_schema_mismatched_state_is_a_usage_error(capsys, tmp_path):
    state = json.loads(Path(fx("fund_state.json")).read_text())
    state["maps"]["Whitelist"] = {"17": 1}  # int key in an address-keyed map
    p = tmp_path / "state.json"
    p.write_text(json.dumps(state))
    code, _, err = run(capsys, "validate", "--rules", fx("fund.rules"), "--state", str(p), "--txs", fx("fund_txs.json"))
    assert code == 2 and "error" in err


def test_invalid_config_is_a_usage_error(capsys, tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("seed = 1\ntps = -4\n")
    assert run(capsys, "simulate", "--config", str(p))[0] == 2
    p.write_text("seed = 1\nunknown_knob = 3\n")
    assert run(capsys, "simulate", "--config", str(p))[0] == 2
    assert run(capsys, "sweep", "--config", fx("honest.toml"))[0] == 2  # no [sweep] table


@pytest.fixture(scope="module")
def mev_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("mev") / "mev.json"
    assert main(["simulate", "--config", fx("mev.toml"), "--out", str(out), "--format", "json"]) == 0
    return out


def test_simulate_writes_report_events_and_evidence(mev_run):
    doc = json.loads(mev_run.read_text())
    assert doc["format"] == "regguard-report/1"
    guarded = doc["runs"]["guarded"]
    assert guarded["slashing"]["events"] > 0 and guarded["slashing"]["silent_deviations"] == 0
    events = mev_run.with_suffix(".events.jsonl").read_text().splitlines()
    assert events and all(json.loads(e)["stage"] for e in events)
    ev = sorted(mev_run.with_suffix(".evidence").glob("evidence_*.json"))
    assert len(ev) == min(MAX_EVIDENCE_KEPT, guarded["slashing"]["events"])


def test_audit_evidence_exit_codes(capsys, mev_run, tmp_path):
    ev = sorted(mev_run.with_suffix(".evidence").glob("evidence_*.json"))[0]
    code, out, _ = run(capsys, "audit-evidence", str(ev))
    assert (code, out.strip()) == (0, "valid")
    d = json.loads(ev.read_text())
    d["comm"] = ("0" if d["comm"][0] != "0" else "1") + d["comm"][1:]
    altered = tmp_path / "altered.json"
    altered.write_text(json.dumps(d))
    code, out, _ = run(capsys, "audit-evidence", str(altered))
    assert (code, out.strip()) == (1, "invalid")
    junk = tmp_path / "junk.json"
    junk.write_text('{"format": "regguard-slashing-evidence/1"}')
    assert run(capsys, "audit-evidence", str(junk))[0] == 2
    junk.write_text("not json")
    assert run(capsys, "audit-evidence", str(junk))[0] == 2


def test_sweep_and_report_bundle(capsys, tmp_path, mev_run):
    cfg = tmp_path / "sw.toml"
    cfg.write_text("seed = 2\nduration_windows = 4\ntps = 10.0\n[sweep]\noracle_delay_blocks = [1, 3]\n")
    sw = tmp_path / "sweep.json"
    assert run(capsys, "sweep", "--config", str(cfg), "--trials", "2", "--out", str(sw), "--format", "json")[0] == 0
    assert len(json.loads(sw.read_text())["rows"]) == 2
    bd = tmp_path / "bound.json"
    args = ("sweep", "--kind", "bound", "--epsilon", "0,0.01", "--eta", "0", "--trials", "20", "--out", str(bd))
    assert run(capsys, *args)[0] == 0
    out = tmp_path / "report"
    code, printed, _ = run(capsys, "report", str(sw), str(bd), str(mev_run), "--out", str(out))
    assert code == 0
    names = {Path(p).name for p in printed.split()}
    assert {"sweep_0.png", "sweep_0.csv", "bound_1.png", "simulate_2.csv", "fairness.png", "complexity.png", "complexity.csv"} <= names
    assert all((out / n).stat().st_size > 0 for n in names)
    bogus = tmp_path / "bogus.json"
    bogus.write_text('{"format": "other"}')
    assert run(capsys, "report", str(bogus), "--out", str(out))[0] == 2


def test_console_script_entry_point():
    r = subprocess.run([sys.executable, "-m", "regguard.cli", "rules-lint", fx("aml.rules")], capture_output=True, text=True)
    assert r.returncode == 0 and "OK: 3 rules" in r.stdout
