import csv
import json
import subprocess
import sys

import pytest

from mdhdg.cli import (ConfigError, StudyConfig, Table, emit_tables, main, make_config, read_table,
                       worker_count)


def _run(*args):
    return main(list(args))


def test_verify_subcommand(tmp_path):
    assert _run("verify", "--out", str(tmp_path), "--family", "RT", "--k", "1") == 0
    files = list(tmp_path.glob("*.csv"))
    assert files
    rows = list(csv.DictReader(files[0].open()))
    assert rows


def test_constants_subcommand(tmp_path):
    assert _run("constants", "--out", str(tmp_path), "--family", "HDGQ", "--k", "1", "--format", "json") == 0
    t = read_table(next(tmp_path.glob("*.json")))
    assert t.ok and t.rows


def test_diffusion_subcommand_orders(tmp_path):
    assert _run("diffusion", "--family", "RT", "--k", "1", "--levels", "4,8", "--out", str(tmp_path),
                "--format", "json") == 0
    t = read_table(next(tmp_path.glob("*.json")))
    assert len(t.rows) == 2 and len(t.orders) == 1
    assert abs(t.orders[0]["err_u"] - 2.0) < 0.3


@pytest.mark.parametrize("cmd", ["ns", "stokes"])
def test_flow_subcommands(tmp_path, cmd):
    assert _run(cmd, "--k", "1", "--levels", "2,4", "--out", str(tmp_path), "--format", "markdown") == 0
    text = next(tmp_path.glob("*.md")).read_text()
    assert text.startswith("## ") and "order_err_u" in text


def test_deterministic_output(tmp_path, monkeypatch):
    a, b = tmp_path / "a", tmp_path / "b"
    monkeypatch.setenv("HDG_THREADS", "1")
    assert _run("ns", "--levels", "2,4", "--out", str(a)) == 0
    monkeypatch.setenv("HDG_THREADS", "4")
    assert _run("ns", "--levels", "2,4", "--out", str(b)) == 0
    fa, fb = sorted(a.iterdir()), sorted(b.iterdir())
    assert [p.name for p in fa] == [p.name for p in fb]
    for x, y in zip(fa, fb):
        assert x.read_bytes() == y.read_bytes()


def test_report_round_trip(tmp_path):
    t = Table("demo", ["n", "err"], [{"n": 4, "err": 0.5}, {"n": 8, "err": 0.125}], ["err"], [{"err": 2.0}],
              {"family": "RT"})
    (p,) = emit_tables([t], "json", tmp_path)
    back = read_table(p)
    assert back.to_dict() == t.to_dict()
    assert _run("report", str(p), "--format", "csv", "--out", str(tmp_path / "r")) == 0
    rows = list(csv.reader((tmp_path / "r" / "demo.csv").open()))
    assert rows[0] == ["n", "err", "order_err"]
    assert rows[1][2] == "" and float(rows[2][2]) == 2.0


def test_emit_edge_cases(tmp_path):
    empty = Table("empty", ["n", "err"], [], ["err"])
    single = Table("single", ["n", "err"], [{"n": 4, "err": 0.5}], ["err"])
    rows = [{"n": 2**i, "err": 4.0**-i} for i in range(4)]
    four = Table("four", ["n", "err"], rows, ["err"], [{"err": 2.0}] * 3)
    for fmt in ("csv", "json", "markdown"):
        paths = emit_tables([empty, single, four], fmt, tmp_path / fmt)
        assert len(paths) == 3
    lines = (tmp_path / "csv" / "empty.csv").read_text().splitlines()
    assert lines == ["n,err"]
    lines = (tmp_path / "csv" / "single.csv").read_text().splitlines()
    assert lines[0] == "n,err" and len(lines) == 2
    assert len((tmp_path / "csv" / "four.csv").read_text().splitlines()) == 5
    with pytest.raises(ConfigError):
        emit_tables([empty], "xml", tmp_path)


def test_numpy_scalars_serialize_plainly(tmp_path):
    import numpy as np
    t = Table("np", ["x"], [{"x": np.float64(0.25)}])
    (p,) = emit_tables([t], "csv", tmp_path)
    assert p.read_text().splitlines()[1] == "0.25"


def test_malformed_config_reports_position(tmp_path, caplog):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{\n  "family": "RT",\n  "k": ,\n}\n')
    assert _run("verify", "--config", str(cfg)) == 2
    assert "bad.json:3:" in caplog.text


def test_missing_nu_in_flow_config(tmp_path, caplog):
    cfg = tmp_path / "ns.json"
    cfg.write_text(json.dumps({"family": "HDG", "k": 1}))
    assert _run("ns", "--config", str(cfg)) == 2
    assert "field 'nu'" in caplog.text


@pytest.mark.parametrize("data,field", [({"k": 9}, "k"), ({"levels": [8, 4]}, "levels"), ({"omega": 0}, "omega"),
                                        ({"family": "XYZ"}, "family"), ({"family": "RT", "shape": "square"}, "shape"),
                                        ({"alpha_mode": "big"}, "alpha_mode"), ({"bogus": 1}, "bogus")])
def test_config_validation(tmp_path, data, field):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(data))
    with pytest.raises(ConfigError, match=field):
        make_config("verify-spaces", p)


def test_config_overrides():
    cfg = make_config("navier-stokes", None, {"nu": 0.5, "levels": [2, 4]})
    assert isinstance(cfg, StudyConfig) and cfg.nu == 0.5 and cfg.levels == [2, 4]


def test_worker_count(monkeypatch):
    monkeypatch.setenv("HDG_THREADS", "1")
    assert worker_count() == 1
    monkeypatch.setenv("HDG_THREADS", "zero")
    with pytest.raises(ConfigError):
        worker_count()
    monkeypatch.delenv("HDG_THREADS")
    assert worker_count() >= 1


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "mdhdg", "verify", "--family", "BDM", "--k", "1", "--out",
                        str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    r = subprocess.run([sys.executable, "-m", "mdhdg", "ns", "--levels", "4,2"], capture_output=True, text=True)
    assert r.returncode == 2 and "levels" in r.stderr
