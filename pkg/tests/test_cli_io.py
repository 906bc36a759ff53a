import json
import math
import re

import numpy as np
import pytest

from oscillab import cli
from oscillab import io as oio
from oscillab.errors import SchemaError
from oscillab.pipeline import SWEEP_COLUMNS
from oscillab.wigner import PhaseGrid, WignerField, wigner_checks, wigner_kernel_ground

SMALL_GRID = {"n1": 48, "n2": 48, "u1_max": 8.0, "u2_min": 0.01, "u2_max": 30.0}


def write_cfg(tmp_path, body, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(body, indent=2))
    return p


def run(tmp_path, mode, body, *extra):
    cfg = write_cfg(tmp_path, dict(body, mode=mode))
    return cli.main([mode, "--config", str(cfg), *extra])


def test_defaults_filled():
    cfg = oio.config_from_dict({"mode": "sde", "lambda": [1.0]})
    g = cfg.numerics["grid"]
    assert (g["n1"], g["n2"]) == (256, 256)
    assert cfg.system["n_traj"] == 100_000
    assert cfg.system["seed"] == 42
    assert cfg.threads == 1


def test_negative_lambda_names_field():
    with pytest.raises(SchemaError) as ei:
        oio.config_from_dict({"mode": "sde", "lambda": [1.0, -2.0]})
    assert ei.value.field == "lambda.1"


def test_unknown_key_has_line(tmp_path):
    text = '{\n  "mode": "fpe",\n  "lambda": [1.0],\n  "numerics": {\n    "gird": {}\n  }\n}\n'
    p = tmp_path / "bad.json"
    p.write_text(text)
    with pytest.raises(SchemaError) as ei:
        oio.parse_config(p, echo=False)
    assert ei.value.field == "numerics.gird"
    assert ei.value.line == 5


def test_malformed_json_and_missing_file(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"mode": "sde",\n "lambda": [1.0,]}')
    with pytest.raises(SchemaError) as ei:
        oio.parse_config(p, echo=False)
    assert ei.value.line == 2
    with pytest.raises(SchemaError):
        oio.parse_config(tmp_path / "nope.json", echo=False)


def test_cross_field_rules():
    with pytest.raises(SchemaError):
        oio.config_from_dict({"mode": "fpe", "lambda": [1.0],
                              "numerics": {"grid": {"u2_min": 50.0}}})
    with pytest.raises(SchemaError):
        oio.config_from_dict({"mode": "sde", "lambda": [1.0],
                              "system": {"t_end": 2.0, "save_times": [3.0]}})
    with pytest.raises(SchemaError):
        oio.config_from_dict({"mode": "sde"})


def test_lambda_from_physical_parameters():
    cfg = oio.config_from_dict({"mode": "sde", "system": {"omega0": 2.0, "epsilon": 8.0}})
    assert cfg.lambdas == (pytest.approx(1.0),)


def test_sweep_ranges():
    cfg = oio.config_from_dict({"mode": "sweep",
                                "sweep": {"start": 1.0, "stop": 100.0, "num": 3, "log": True}})
    assert cfg.lambdas == pytest.approx((1.0, 10.0, 100.0))
    with pytest.raises(SchemaError):
        oio.config_from_dict({"mode": "sweep", "sweep": {"start": 1.0}})


def test_config_round_trip(tmp_path):
    cfg = oio.config_from_dict({"mode": "observables", "lambda": [0.5, 2.0],
                                "numerics": {"levels": [0, 3]}})
    path = oio.emit_config(cfg, tmp_path / "eff.json")
    back = oio.parse_config(path, echo=False)
    assert back == cfg
    assert back.hash == cfg.hash


def test_hash_ignores_threads_and_output():
    cfg = oio.config_from_dict({"mode": "sde", "lambda": [1.0]})
    assert cfg.with_overrides(threads=8, output_dir="elsewhere").hash == cfg.hash
    other = oio.config_from_dict({"mode": "sde", "lambda": [1.0], "system": {"seed": 7}})
    assert other.hash != cfg.hash


def test_csv_header_and_reader(tmp_path):
    text = oio.csv_text(("a", "b"), [(1.5, None), (True, "x")], "abc", "demo")
    p = oio.write_text_atomic(tmp_path / "t.csv", text)
    meta, header, rows = oio.read_csv(p)
    assert meta == {"kind": "demo", "config_sha256": "abc", "version": "v1"}
    assert header == ["a", "b"]
    assert rows == [["1.5", ""], ["1", "x"]]


def test_atomic_write_leaves_no_temp(tmp_path):
    oio.write_text_atomic(tmp_path / "d" / "f.txt", "one")
    oio.write_text_atomic(tmp_path / "d" / "f.txt", "two")
    assert [p.name for p in (tmp_path / "d").iterdir()] == ["f.txt"]
    assert (tmp_path / "d" / "f.txt").read_text() == "two"


def test_heatmap_two_by_two():
    svg = oio.heatmap_svg(np.array([[0.0, 1.0], [2.0, 3.0]]), [0, 1, 2], [0, 1, 2],
                          "x", "y", "t", "h")
    cells = re.search(r'<g id="cells"[^>]*>(.*?)</g>', svg, re.S).group(1)
    assert cells.count("<rect") == 4
    assert oio.svg_legend(svg) == (0.0, 3.0)
    assert "config_sha256=h" in svg


def test_heatmap_constant_field():
    svg = oio.heatmap_svg(np.full((3, 3), 2.5), np.arange(4.0), np.arange(4.0), "x", "y", "t",
                          "h")
    assert oio.svg_legend(svg) == (2.5, 3.5)


def test_heatmap_block_averages_large_fields():
    v = np.arange(300 * 10, dtype=float).reshape(300, 10)
    svg = oio.heatmap_svg(v, np.arange(301.0), np.arange(11.0), "x", "y", "t", "h",
                          max_cells=100)
    cells = re.search(r'<g id="cells"[^>]*>(.*?)</g>', svg, re.S).group(1)
    assert cells.count("<rect") == 100 * 10
    with pytest.raises(Exception):
        oio.heatmap_svg(np.array([[np.nan]]), [0, 1], [0, 1], "x", "y", "t", "h")


def test_wigner_sidecar_matches_checks(tmp_path):
    g = PhaseGrid.uniform(5.0, 5.0, 41, 41)
    X, P = g.mesh()
    W = WignerField(g, wigner_kernel_ground(X, P, 0.3, 1.2), 0.0, "test")
    oio.emit_heatmap(W, tmp_path / "w.svg", "h")
    meta, header, rows = oio.read_csv(tmp_path / "w.marginals.csv")
    rep = wigner_checks(W)
    assert header == ["x", "x_marginal", "p", "p_marginal"]
    assert float(meta["normalization"]) == pytest.approx(rep.normalization, rel=1e-15)
    np.testing.assert_allclose([float(r[1]) for r in rows], rep.x_marginal, rtol=1e-15)
    np.testing.assert_allclose([float(r[3]) for r in rows], rep.p_marginal, rtol=1e-15)


def test_cli_sde_threads_give_identical_csv(tmp_path):
    body = {"lambda": [1.0], "system": {"t_end": 2.0, "n_traj": 64, "save_times": [1.0, 2.0]},
            "formats": ["csv", "json"]}
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(tmp_path, "sde", body, "--threads", "1", "--out", str(a)) == 0
    assert run(tmp_path, "sde", body, "--threads", "8", "--out", str(b)) == 0
    for name in ("sde_lambda=1.csv", "sde_summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    man = json.loads((a / "manifest.json").read_text())
    assert man["rejections"] == {"lambda=1": 0}
    assert set(man["outputs"]) == {"sde_lambda=1.csv", "sde_summary.json"}
    meta, header, rows = oio.read_csv(a / "sde_lambda=1.csv")
    assert meta["config_sha256"] == man["config_sha256"]
    assert len(rows) == 64 * 2


def test_cli_duplicate_lambda_rows(tmp_path):
    body = {"sweep": {"lambda": [1.0, 1.0]},
            "numerics": {"grid": SMALL_GRID, "tol": 1e-5, "t_max": 30.0,
                         "auto_enlarge": False},
            "formats": ["csv"], "output_dir": str(tmp_path / "o")}
    assert run(tmp_path, "sweep", body) == 0
    _, header, rows = oio.read_csv(tmp_path / "o" / "sweep.csv")
    assert tuple(header) == SWEEP_COLUMNS
    assert len(rows) == 2 and rows[0] == rows[1]
    assert rows[0][header.index("status")] == "ok"


def test_cli_fpe_writes_fields_and_heatmap(tmp_path):
    body = {"lambda": [1.0], "numerics": {"grid": SMALL_GRID, "tol": 1e-4, "t_max": 10.0,
                                          "auto_enlarge": False},
            "output_dir": str(tmp_path / "o")}
    assert run(tmp_path, "fpe", body) == 0
    out = tmp_path / "o"
    meta, header, rows = oio.read_csv(out / "fpe_Q_lambda=1.csv")
    assert header == ["u1", "u2", "value"] and len(rows) == 48 * 48
    assert meta["kind"] == "field-Q"
    assert "<svg" in (out / "fpe_Q_lambda=1.svg").read_text()
    summary = json.loads((out / "fpe_summary.json").read_text())
    assert "t_star" in summary["data"]["lambda=1"]
    assert not list(out.glob(".*.tmp"))


def test_cli_wigner_mc_source(tmp_path):
    body = {"lambda": [1.0], "system": {"t_end": 1.0, "n_traj": 500, "save_times": [1.0]},
            "wigner": {"t": 1.0, "n_grid": 33, "source": "mc"},
            "output_dir": str(tmp_path / "o")}
    assert run(tmp_path, "wigner", body) == 0
    rep = json.loads((tmp_path / "o" / "wigner_checks.json").read_text())["data"]["lambda=1"]
    assert rep["provenance"] == "MC-averaged"
    assert abs(rep["normalization"] - 1.0) < 0.05
    assert (tmp_path / "o" / "wigner_lambda=1.marginals.csv").exists()


def test_cli_physical_units(tmp_path):
    body = {"system": {"omega0": 2.0, "epsilon": 8.0},
            "numerics": {"grid": SMALL_GRID, "tol": 1e-4, "t_max": 10.0, "auto_enlarge": False},
            "formats": ["json"]}
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(tmp_path, "observables", body, "--out", str(a)) == 0
    assert run(tmp_path, "observables", body, "--physical", "--out", str(b)) == 0
    sa = json.loads((a / "observables.json").read_text())["data"][0]
    sb = json.loads((b / "observables.json").read_text())["data"][0]
    assert sb["delta_x"] == pytest.approx(sa["delta_x"] * 8.0 ** (-1 / 6), rel=1e-12)
    assert sb["k_factor"] == sa["k_factor"]


def test_cli_physical_needs_epsilon(tmp_path, capsys):
    assert run(tmp_path, "sde", {"lambda": [1.0]}, "--physical",
               "--out", str(tmp_path / "o")) == cli.EXIT_SCHEMA
    assert "epsilon" in capsys.readouterr().err


def test_cli_schema_error_exit(tmp_path, capsys):
    code = run(tmp_path, "sde", {"lambda": [-1.0]}, "--out", str(tmp_path / "o"))
    assert code == cli.EXIT_SCHEMA
    assert "lambda.0" in capsys.readouterr().err


def test_cli_validate_corrupted_grid(tmp_path):
    out = tmp_path / "o"
    code = run(tmp_path, "validate", {"numerics": {"grid": {"n1": 4}}}, "--out", str(out))
    assert code == cli.EXIT_SCHEMA
    rep = json.loads((out / "validate_report.json").read_text())
    assert rep["passed"] is False
    assert rep["error"]["type"] == "SchemaError"
    assert rep["error"]["field"] == "numerics.grid.n1"


def test_cli_validate_noiseless_checks_pass(tmp_path):
    out = tmp_path / "o"
    assert run(tmp_path, "validate", {"validate": {"checks": [1, 9]}}, "--out", str(out)) == 0
    rep = json.loads((out / "validate_report.json").read_text())["data"]
    assert rep["passed"] is True
    assert [c["number"] for c in rep["checks"]] == [1, 9]
    man = json.loads((out / "manifest.json").read_text())
    assert man["tolerance_outcomes"] == {"check 1": True, "check 9": True}
    _, header, rows = oio.read_csv(out / "validate_checks.csv")
    assert [r[:3] for r in rows] == [["1", "noiseless exactness", "1"],
                                     ["9", "level equidistance", "1"]]


def test_cli_numerical_failure_exit(tmp_path, capsys):
    body = {"lambda": [1.0], "system": {"t_end": 20.0, "dt": 1e-2, "n_traj": 200,
                                        "save_times": [20.0], "scheme": "euler-reject"}}
    code = run(tmp_path, "sde", body, "--out", str(tmp_path / "o"))
    assert code == cli.EXIT_NUMERIC
    assert "numerical failure" in capsys.readouterr().err
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["errors"]


def test_cli_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code = run(tmp_path, "sde", {"lambda": [1.0], "system": {"t_end": 1.0, "n_traj": 2,
                                                              "save_times": [1.0]}},
               "--out", str(blocker / "sub"))
    assert code == cli.EXIT_IO


def test_cli_rejects_unknown_mode(tmp_path):
    with pytest.raises(SystemExit):
        cli.main(["bogus", "--config", str(write_cfg(tmp_path, {"mode": "sde"}))])


def test_nonfinite_values_in_json():
    text = oio.json_text({"a": math.nan, "b": [1.0, math.inf]}, "h")
    body = json.loads(text)
    assert body["data"] == {"a": "nan", "b": [1.0, "inf"]}
    assert body["config_sha256"] == "h"


def test_cli_sweep_weak_noise_trend(tmp_path):
    # MC puts K(100) near 0.35, so only the direction is checked here
    body = {"sweep": {"lambda": [1.0, 100.0]},
            "numerics": {"grid": SMALL_GRID, "tol": 1e-5, "t_max": 40.0},
            "formats": ["csv"], "output_dir": str(tmp_path / "o")}
    assert run(tmp_path, "sweep", body) == 0
    _, header, rows = oio.read_csv(tmp_path / "o" / "sweep.csv")
    col = {name: i for i, name in enumerate(header)}
    k = {float(r[0]): float(r[col["k_factor"]]) for r in rows}
    prod = {float(r[0]): float(r[col["uncertainty_product"]]) for r in rows}
    assert 0.0 < k[100.0] < k[1.0]
    assert 0.5 <= prod[100.0] < prod[1.0]
