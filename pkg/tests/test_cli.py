import json

import numpy as np
import pytest

from relax2d import cli
from relax2d.energy import q_biot_unconstrained, q_dist_unconstrained, q_glp, w_biot, w_dist
from relax2d.io import format_cell, read_csv, write_csv


def run(tmp_path, command, config=None, *extra):
    args = [command, "--out", str(tmp_path / "out")]
    if config is not None:
        path = tmp_path / f"{command}.json"
        path.write_text(json.dumps(config))
        args += ["--config", str(path)]
    return cli.main(args + list(extra))


def assert_roundtrip(path, tmp_path):
    header, rows = read_csv(path)
    copy = tmp_path / "copy.csv"
    write_csv(copy, header, rows)
    assert copy.read_bytes() == path.read_bytes()


def test_format_cell():
    assert format_cell(0.1 + 0.2) == "0.30000000000000004"
    assert format_cell(3) == "3" and format_cell(True) == "True"
    assert cli.fmt(0.6807439258889) == "0.680744"


def test_envelope(tmp_path, capsys):
    cfg = {"f0_list": [[0.4, 0, 0, 0.4], [1, 0, 0, 1], [1, 0, 0, -1]]}
    assert run(tmp_path, "envelope", cfg) == cli.EXIT_OK
    header, rows = read_csv(tmp_path / "out" / "envelope.csv")
    col = {h: i for i, h in enumerate(header)}
    r = rows[0]
    assert r[col["w_dist"]] == pytest.approx(0.72, abs=1e-12)
    assert r[col["q_biot_unconstrained"]] == 0
    assert r[col["q_dist_unconstrained"]] == pytest.approx(0.68, abs=1e-12)
    assert r[col["q_glp"]] == pytest.approx(0.68, abs=1e-12)
    assert r[col["q_biot_pipkin_oracle"]] == 0
    assert all(v == 0 for v in rows[1][4:])
    assert rows[2][col["w_dist"]] == pytest.approx(4.0) and rows[2][col["w_biot"]] == pytest.approx(0.0)
    assert rows[2][col["q_glp"]] == "domain error"
    assert "domain error" in capsys.readouterr().out
    assert_roundtrip(tmp_path / "out" / "envelope.csv", tmp_path)


def test_plotdata(tmp_path):
    assert run(tmp_path, "plotdata") == cli.EXIT_OK
    out = tmp_path / "out"
    for name in ("one_d", "volumetric", "shear", "diag", "valanis_landel"):
        assert_roundtrip(out / f"plot_{name}.csv", tmp_path)
    h, rows = read_csv(out / "plot_volumetric.csv")
    a = np.array([r[0] for r in rows])
    q = np.array([r[2] for r in rows])
    assert q[np.argmin(np.abs(a))] == pytest.approx(1.0)
    small = np.abs(a) <= 0.5
    np.testing.assert_allclose(q[small], 1 - 2 * a[small] ** 2, atol=1e-12)
    h, rows = read_csv(out / "plot_shear.csv")
    rows = np.array(rows)
    np.testing.assert_allclose(rows[:, 1], rows[:, 2], atol=1e-12)
    h, rows = read_csv(out / "plot_diag.csv")
    rows = np.array(rows)
    sel = (rows[:, 1] == 0) & (np.abs(rows[:, 0]) <= 1)
    np.testing.assert_allclose(rows[sel, 3], 1.0, atol=1e-12)
    h, rows = read_csv(out / "plot_valanis_landel.csv")
    rows = np.array(rows)
    np.testing.assert_allclose(rows[:, 3], np.maximum(np.abs(rows[:, 0]) - 1, 0) ** 2, atol=1e-9)


def test_roc_command(tmp_path, capsys):
    cfg = {"energy": "biot", "box": "compression", "delta": 0.1, "frequency": 3, "resolution": 21}
    assert run(tmp_path, "roc", cfg) == cli.EXIT_OK
    out = tmp_path / "out"
    for f in ("roc_grid.bin", "roc_grid_header.csv", "roc_trace.csv", "laminate_tree.json",
              "microstructure.csv", "microstructure.vtk", "roc_summary.csv"):
        assert (out / f).exists()
    header, rows = read_csv(out / "roc_summary.csv")
    s = dict(zip(header, rows[0]))
    assert s["roc_value"] == pytest.approx(0.68, abs=1e-9)
    assert s["analytic"] == pytest.approx(0.68, abs=1e-12)
    assert s["self_intersecting"] == "False"
    for f in ("roc_summary.csv", "roc_trace.csv", "roc_grid_header.csv", "microstructure.csv"):
        assert_roundtrip(out / f, tmp_path)
    assert "0.68" in capsys.readouterr().out


def test_roc_dist_flags_self_intersection(tmp_path):
    cfg = {"energy": "dist", "delta": 0.1, "radius": 1.0, "frequency": 2, "resolution": 11}
    assert run(tmp_path, "roc", cfg) == cli.EXIT_OK
    header, rows = read_csv(tmp_path / "out" / "roc_summary.csv")
    s = dict(zip(header, rows[0]))
    assert s["roc_value"] == pytest.approx(0.68, abs=1e-9)
    assert s["self_intersecting"] == "True"


def test_fem_command(tmp_path):
    cfg = {"energy": "biot", "n_per_side": 6}
    assert run(tmp_path, "fem", cfg, "--seed", "5") == cli.EXIT_OK
    out = tmp_path / "out"
    header, rows = read_csv(out / "fem_report.csv")
    s = dict(zip(header, rows[0]))
    assert s["energy_per_area"] < 0.72
    assert json.loads((out / "fem_config.json").read_text())["seed"] == 5
    for f in ("fem_report.csv", "fem_mesh.csv", "fem_history.csv"):
        assert_roundtrip(out / f, tmp_path)
    assert (out / "fem_mesh.vtk").read_text().startswith("# vtk DataFile")


def test_fem_nonconvergence_exit_code(tmp_path):
    cfg = {"energy": "dist", "n_per_side": 6, "max_iters": 1}
    assert run(tmp_path, "fem", cfg) == cli.EXIT_NUMERICAL
    assert (tmp_path / "out" / "fem_mesh.csv").exists()


def test_compare(tmp_path, capsys):
    cfg = {"roc": {"delta": 0.2, "radius": 1.0}, "fem": {"n_per_side": 4}}
    code = run(tmp_path, "compare", cfg)
    text = capsys.readouterr().out
    assert "PINN and HROC columns are omitted" in text
    header, rows = read_csv(tmp_path / "out" / "compare.csv")
    table = {(r[0], r[1], r[2]): r[3] for r in rows}
    F0 = 0.4 * np.eye(2)
    assert table[("analytic_Q", "Biot", "R2x2")] == q_biot_unconstrained(F0)
    assert table[("analytic_Q", "dist", "R2x2")] == q_dist_unconstrained(F0)
    assert table[("analytic_Q", "Biot", "GLp")] == q_glp(F0)
    assert table[("raw_W", "Biot", "R2x2")] == w_biot(F0)
    assert table[("raw_W", "dist", "R2x2")] == w_dist(F0)
    assert table[("ROC", "Biot", "R2x2")] == pytest.approx(0.0, abs=1e-9)
    assert table[("ROC", "Biot", "GLp")] == pytest.approx(0.68, abs=1e-9)
    assert code in (cli.EXIT_OK, cli.EXIT_NUMERICAL)
    if code == cli.EXIT_NUMERICAL:
        assert "FAILED" in [r[3] for r in rows]
    assert_roundtrip(tmp_path / "out" / "compare.csv", tmp_path)


@pytest.mark.parametrize(
    "config",
    [
        {"energy": "neo_hooke"},
        {"f0": [1, 2, 3]},
        {"f0": [1, 0, 0, "x"]},
        {"penalty": {"k": -1}, "energy": "biot"},
    ],
)
def test_config_errors(tmp_path, config):
    assert run(tmp_path, "fem", config) == cli.EXIT_CONFIG


def test_unreadable_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["envelope", "--config", str(bad), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["envelope", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG


def test_resource_limit(tmp_path):
    cfg = {"energy": "biot", "delta": 0.1, "radius": 2.0, "memory_budget": 1000}
    assert run(tmp_path, "roc", cfg) == cli.EXIT_RESOURCE


def test_off_lattice_f0_is_a_config_error(tmp_path):
    cfg = {"energy": "biot", "delta": 0.5, "radius": 1.0, "f0": [0.4, 0, 0, 0.4]}
    assert run(tmp_path, "roc", cfg) == cli.EXIT_CONFIG


def test_unknown_command():
    with pytest.raises(SystemExit):
        cli.main(["bogus"])
