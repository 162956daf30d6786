import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from covgof.cli import _parse_cell, _parse_grid, main
from covgof.dataset import to_csv
from covgof.simulate import generate, scenario1_spec, univariate_sparse_spec


@pytest.fixture(scope="module")
def uni_csv(tmp_path_factory):
    data = generate(univariate_sparse_spec(n_subjects=50, error_var=1.0,
                                           seed=42), rep=0)
    path = tmp_path_factory.mktemp("data") / "uni.csv"
    to_csv(data, path)
    return path


@pytest.fixture(scope="module")
def mv_csv(tmp_path_factory):
    data = generate(scenario1_spec(n_subjects=50, n_visits=5, seed=43),
                    rep=0)
    path = tmp_path_factory.mktemp("data") / "mv.csv"
    to_csv(data, path)
    return path


class TestParsers:
    def test_grid_fourteen_points(self):
        grid = _parse_grid("0.2:1.5:0.1")
        assert len(grid) == 14
        assert grid[0] == 0.2
        assert grid[-1] == pytest.approx(1.5)

    def test_grid_single_point(self):
        assert _parse_grid("1.0:1.0:0.5") == [1.0]

    def test_grid_malformed(self):
        from covgof.errors import DataError
        with pytest.raises(DataError):
            _parse_grid("1:2")
        with pytest.raises(DataError):
            _parse_grid("2:1:0.5")

    def test_cell(self):
        assert _parse_cell("N=100,J=5") == {"N": 100.0, "J": 5.0}
        assert _parse_cell(None) == {}


class TestCmdTest:
    def test_univariate_report_files(self, uni_csv, tmp_path):
        out = tmp_path / "res"
        code = main(["test", "--input", str(uni_csv), "--out", str(out),
                     "--seed", "7", "--B", "25"])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["test"] == "univariate"
        assert 0.0 <= report["p_value"] <= 1.0
        assert report["config"]["seed"] == 7
        assert (out / "draws.csv").exists()
        surface = (out / "cov_surface_1.csv").read_text().splitlines()
        assert len(surface) == 61 * 61 + 1

    def test_deterministic_reports(self, uni_csv, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for o in (a, b):
            assert main(["test", "--input", str(uni_csv), "--out", str(o),
                         "--seed", "3", "--B", "20"]) == 0
        assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
        assert (a / "draws.csv").read_bytes() == (b / "draws.csv").read_bytes()

    def test_multivariate_routes_to_mgfc(self, mv_csv, tmp_path):
        out = tmp_path / "mv"
        code = main(["test", "--input", str(mv_csv), "--out", str(out),
                     "--seed", "1", "--B", "12"])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["test"] == "mgfc"
        assert report["n_outcomes"] == 3
        for k in (1, 2, 3):
            assert (out / f"cov_surface_{k}.csv").exists()

    def test_statistic_filter(self, mv_csv, tmp_path):
        out = tmp_path / "filt"
        main(["test", "--input", str(mv_csv), "--out", str(out),
              "--seed", "1", "--B", "8", "--statistic", "l2"])
        report = json.loads((out / "report.json").read_text())
        assert "statistic_l2" in report
        assert "statistic_inf" not in report

    def test_malformed_csv_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("subject,outcome,time,value\na,1,zero,1.0\n")
        assert main(["test", "--input", str(bad), "--out",
                     str(tmp_path)]) == 2
        assert "line 2" in capsys.readouterr().err

    def test_missing_file_exit_2(self, tmp_path):
        assert main(["test", "--input", str(tmp_path / "nope.csv"),
                     "--out", str(tmp_path)]) == 2

    def test_env_seed_fallback(self, uni_csv, tmp_path, monkeypatch):
        monkeypatch.setenv("COVGOF_SEED", "99")
        out = tmp_path / "env"
        main(["test", "--input", str(uni_csv), "--out", str(out),
              "--B", "10"])
        report = json.loads((out / "report.json").read_text())
        assert report["config"]["seed"] == 99

    def test_config_file_overrides(self, uni_csv, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"test": {"n_boot": 15, "alpha": 0.2}}))
        out = tmp_path / "cfgout"
        main(["test", "--input", str(uni_csv), "--config", str(cfg),
              "--out", str(out), "--seed", "1"])
        report = json.loads((out / "report.json").read_text())
        assert report["n_boot"] == 15
        assert report["config"]["alpha"] == 0.2


class TestCmdSimulate:
    def test_tiny_preset_run(self, tmp_path, capsys):
        out = tmp_path / "sim"
        code = main(["simulate", "--preset", "table1",
                     "--cell", "sigma2=1,N=25,J=4", "--R", "4",
                     "--B", "10", "--seed", "5", "--out", str(out)])
        assert code == 0
        report = json.loads((out / "simulate_report.json").read_text())
        assert len(report["cells"]) == 1
        csv_text = (out / "simulate_report.csv").read_text()
        assert "univariate" in csv_text
        assert "table1" in capsys.readouterr().out

    def test_unknown_preset_exit_2(self, tmp_path):
        # argparse rejects the preset choice with its own exit code 2
        with pytest.raises(SystemExit) as ex:
            main(["simulate", "--preset", "table9", "--out", str(tmp_path)])
        assert ex.value.code == 2


class TestCmdPower:
    def test_power_outputs_with_svg(self, tmp_path):
        out = tmp_path / "pw"
        code = main(["power", "--preset", "scenario1a",
                     "--cell", "N=16,J=5", "--R", "3", "--B", "8",
                     "--grid", "0.5:1.0:0.5", "--seed", "2",
                     "--out", str(out)])
        assert code == 0
        for deviation in ("quadratic", "trigonometric"):
            svg_path = out / f"power_{deviation}.svg"
            root = ET.parse(svg_path).getroot()  # well-formed XML
            assert root.tag.endswith("svg")
            text = svg_path.read_text()
            for series in ("T_linf", "T_l2", "T_bonferroni"):
                assert series in text
            curve = (out / f"power_curve_{deviation}.csv").read_text()
            assert "l_inf" in curve and "bonferroni" in curve

    def test_report_command_summarizes(self, uni_csv, tmp_path, capsys):
        out = tmp_path / "rep"
        main(["test", "--input", str(uni_csv), "--out", str(out),
              "--seed", "3", "--B", "10"])
        capsys.readouterr()
        assert main(["report", "--input", str(out / "report.json")]) == 0
        text = capsys.readouterr().out
        assert "univariate" in text
        assert "p =" in text
