import json

import pytest

from madtls.cli import main

MISMATCH = """
name: wrong_expectation
contexts: [a]
entities:
  - {name: s, role: sender}
  - {name: r, role: receiver}
templates: [{id: 0, segments: [[8, a]]}]
traffic:
  - {template: 0, payload: "01", expect: reject-at-receiver}
"""


def test_run_bundled_scenario_writes_report(tmp_path, capsys):
    out = tmp_path / "report.json"
    assert main(["run", "--scenario", "coordinate_translation", "--seed", "3", "--out", str(out)]) == 0
    data = json.loads(out.read_text())
    assert data["ok"] and data["reports"][0]["seed"] == 3
    assert "1/1 scenarios matched" in capsys.readouterr().out


def test_run_mismatch_exits_one(tmp_path):
    path = tmp_path / "s.yaml"
    path.write_text(MISMATCH)
    assert main(["run", "--scenario", str(path)]) == 1


def test_validation_errors_exit_two(tmp_path, capsys):
    path = tmp_path / "s.yaml"
    path.write_text(MISMATCH.replace("[[8, a]]", "[[8, nowhere]]"))
    assert main(["validate", "--scenario", str(path)]) == 2
    assert "nowhere" in capsys.readouterr().err
    assert main(["run", "--scenario", str(tmp_path / "absent.yaml")]) == 2
    assert main(["validate", "--scenario", "modbus_ids"]) == 0


def test_usage_errors_exit_two():
    for argv in (["frobnicate"], [], ["run"], ["bench", "--sizes", "a,b"], ["bench", "--reps", "0"],
                 ["bench", "--contexts", "0"], ["bench", "--contexts", "65"]):
        with pytest.raises(SystemExit) as err:
            code = main(argv)
            raise SystemExit(code)
        assert err.value.code == 2, argv


def test_vectors_round_trip(tmp_path, capsys):
    out = tmp_path / "v.txt"
    assert main(["vectors", "--seed", "9", "--out", str(out)]) == 0
    assert main(["vectors", "--check", str(out)]) == 0
    lines = out.read_text().splitlines()
    idx = next(i for i, line in enumerate(lines) if line.startswith("record.hop2"))
    label, value = lines[idx].split(" = ")
    lines[idx] = f"{label} = {value[:-1]}{'0' if value[-1] != '0' else '1'}"
    out.write_text("\n".join(lines) + "\n")
    assert main(["vectors", "--check", str(out)]) == 1
    assert main(["vectors", "--out", str(tmp_path / "no" / "dir" / "v.txt")]) == 2


def test_bench_small_sweep(tmp_path, capsys):
    out = tmp_path / "bench.json"
    assert main(["bench", "--contexts", "1,2,3", "--sizes", "1,16", "--reps", "2", "--out", str(out)]) == 0
    rows = json.loads(out.read_text())["rows"]
    assert len(rows) == 3 * 2 * 2
    assert "write/read ratio 2" in capsys.readouterr().out
