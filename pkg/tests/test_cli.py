from __future__ import annotations

import csv
import json

import yaml
from click.testing import CliRunner

from cctestbed.cli import (COLUMNS, EXIT_CONFIG, EXIT_OK, EXIT_RUN_ERROR, EXIT_VIOLATION, build_spec, main,
                           parse_range, parse_schemes, run_experiment)
from cctestbed.errors import ConfigError

import pytest

TINY = ["--rows", "4096", "--batch", "128"]


def _run(tmp_path, *args, name="out"):
    out = tmp_path / name
    res = CliRunner().invoke(main, [*TINY, "--out", str(out), "--quiet", *args])
    return res, out


def _rows(out):
    with open(out / "results.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def test_single_point_one_row(tmp_path):
    res, out = _run(tmp_path, "--preset", "MC", "--scheme", "tictoc", "--wd", "0", "--bs", "32")
    assert res.exit_code == EXIT_OK, res.output
    rows = _rows(out)
    assert len(rows) == 1 and list(rows[0]) == list(COLUMNS)
    r = rows[0]
    assert (r["scheme"], r["status"], r["commits"]) == ("tictoc", "ok", "128")
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["spec"]["schemes"] == ["tictoc"] and "version" in manifest


def test_grid_gives_36_rows(tmp_path):
    res, out = _run(tmp_path, "--preset", "RO", "--scheme", "gputx", "--wd", "0-5", "--bs", "1,2,4,8,16,32")
    assert res.exit_code == EXIT_OK, res.output
    rows = _rows(out)
    assert len(rows) == 36
    cells = {(r["wd"], r["bs"]) for r in rows}
    assert len(cells) == 36 and sorted(p.name for p in out.iterdir()) == ["manifest.json", "results.csv"]


def test_cells_multiply_out(tmp_path):
    res, out = _run(tmp_path, "--scheme", "tpl_nw,to", "--wd", "0,1", "--bs", "4", "--reps", "3")
    assert res.exit_code == EXIT_OK
    rows = _rows(out)
    assert len(rows) == 2 * 2 * 3
    assert len({(r["scheme"], r["wd"], r["rep"]) for r in rows}) == 12
    assert {r["seed"] for r in rows} == {"0", "1", "2"}


def test_broken_scheme_is_reported(tmp_path):
    res, out = _run(tmp_path, "--preset", "HC", "--scheme", "broken", "--verify",
                    "--rows", "256", "--wd", "2", "--bs", "4")
    assert res.exit_code == EXIT_VIOLATION
    assert "VIOLATION" in res.output
    assert _rows(out)[0]["status"] == "violation"


def test_json_report(tmp_path):
    res, out = _run(tmp_path, "--scheme", "silo", "--format", "json", "--verify")
    assert res.exit_code == EXIT_OK
    data = json.loads((out / "results.json").read_text())
    assert isinstance(data, list) and data[0]["serializable"] in (True, "True", 1)
    assert set(COLUMNS) <= set(data[0])


def test_simt_csv_is_byte_identical(tmp_path):
    args = ["--scheme", "tictoc,mvcc", "--wd", "0,2", "--bs", "4", "--verify", "--keep-logs", "--backoff", "8"]
    _run(tmp_path, *args, name="a")
    _run(tmp_path, *args, name="b")
    a, b = tmp_path / "a" / "logs", tmp_path / "b" / "logs"
    assert (a.parent / "results.csv").read_bytes() == (b.parent / "results.csv").read_bytes()
    logs = sorted(p.name for p in a.iterdir() if p.suffix == ".jsonl")
    assert logs and all((a / n).read_bytes() == (b / n).read_bytes() for n in logs)


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump({"scheme": "to", "preset": "HC", "wd": "1", "bs": "2",
                                   "rows": 4096, "batch": 64}))
    out = tmp_path / "o"
    res = CliRunner().invoke(main, ["--config", str(cfg), "--scheme", "mvcc", "--out", str(out), "--quiet"])
    assert res.exit_code == EXIT_OK, res.output
    (row,) = _rows(out)
    assert (row["scheme"], row["wd"], row["bs"], row["benchmark"]) == ("mvcc", "1", "2", "ycsb-HC")


@pytest.mark.parametrize("args", [["--wd", "6"], ["--bs", "0-40"], ["--scheme", "nope"],
                                  ["--theta", "1.5"], ["--wd", "a-b"]])
def test_bad_config_exit_code(tmp_path, args):
    res, _ = _run(tmp_path, *args)
    assert res.exit_code == EXIT_CONFIG
    assert "config error" in res.output


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("colour: blue\n")
    res = CliRunner().invoke(main, ["--config", str(cfg)])
    assert res.exit_code == EXIT_CONFIG


def test_run_error_is_per_cell(tmp_path, monkeypatch):
    from cctestbed.errors import WatchdogTimeout
    from cctestbed import cli

    calls = []
    real = cli.execute_batch

    def flaky(batch, scheme, *a, **kw):
        calls.append(scheme)
        if scheme == "to":
            raise WatchdogTimeout("stuck")
        return real(batch, scheme, *a, **kw)

    monkeypatch.setattr(cli, "execute_batch", flaky)
    spec = build_spec({"scheme": "to,silo", "rows": 4096, "batch": 64, "out": str(tmp_path / "o")})
    result = run_experiment(spec)
    assert result.exit_code == EXIT_RUN_ERROR
    assert [r["status"] for r in result.rows] == ["WatchdogTimeout", "ok"]


def test_parsers():
    assert list(parse_range("3")) == [3]
    assert list(parse_range("0-5")) == [0, 1, 2, 3, 4, 5]
    assert list(parse_range("1,2,4")) == [1, 2, 4]
    assert parse_schemes("all")[0] == "tpl_nw" and len(parse_schemes("all")) == 8
    with pytest.raises(ConfigError):
        parse_range("5-1")
