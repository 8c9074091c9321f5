import csv
import json

import numpy as np
import pytest

from solitonq import cli, core, me


def small_gaussian(**kw):
    cfg = {"nbar": 25.0, "method": "gaussian-lsm", "n_lsm": 3, "t_max_in_T0": 0.2, "dt_in_T0": 0.1,
           "grid": {"L_scaled": 80.0, "Nz": 512}}
    cfg.update(kw)
    return cfg


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestValidation:
    def test_valid_config(self):
        assert cli.validate_config(small_gaussian()) == []

    def test_gssf_needs_grid(self):
        issues = cli.validate_config({"nbar": 100.0, "method": "gssf"})
        assert issues[0]["level"] == "error" and issues[0]["field"] == "grid"

    def test_unknown_keys(self):
        with pytest.raises(cli.ConfigError) as err:
            cli.parse_config(small_gaussian(colour="red"))
        assert err.value.field == "colour"
        with pytest.raises(cli.ConfigError) as err:
            cli.parse_config(small_gaussian(toggles={"v3": False}))
        assert err.value.field == "toggles.v3"

    @pytest.mark.parametrize("patch, field", [
        ({"method": "mps"}, "method"),
        ({"nbar": -1.0}, "nbar"),
        ({"n_lsm": "3"}, "n_lsm"),
        ({"grid": {"L_scaled": 80.0, "Nz": 1000}}, "grid.Nz"),
        ({"beta3": 2.0}, "beta3"),
        ({"window": {"k0_auto": False}}, "window.k0_scaled"),
    ])
    def test_field_errors(self, patch, field):
        with pytest.raises(cli.ConfigError) as err:
            cli.parse_config(small_gaussian(**patch))
        assert err.value.field == field

    def test_method_requirements(self):
        with pytest.raises(cli.ConfigError) as err:
            cli.parse_config({"nbar": 5.0, "method": "fock-lsm", "n_lsm": 3})
        assert err.value.field == "per_mode_cutoff"
        with pytest.raises(cli.ConfigError) as err:
            cli.parse_config({"nbar": 5.0, "method": "me-full", "per_mode_cutoff": 6})
        assert err.value.field == "per_mode_cutoff"

    def test_warnings_and_notes(self):
        issues = cli.validate_config({"nbar": 5.0, "method": "fock-lsm", "n_lsm": 1, "per_mode_cutoff": 4})
        messages = {i["message"] for i in issues}
        assert "truncation below mean photon number" in messages
        assert "evolution reduces to the single-mode H_0" in messages
        assert all(i["level"] != "error" for i in issues)

    def test_describe_methods(self, capsys):
        assert cli.main(["describe-methods"]) == 0
        out = capsys.readouterr().out
        for m in cli.METHODS:
            assert m in out


class TestRun:
    def test_me_heff_is_exact_solution(self, tmp_path):
        nbar = 5000.0
        code, manifest = cli.run({"nbar": nbar, "method": "me-heff", "t_max_in_T0": 3.0, "dt_in_T0": 0.25},
                                 tmp_path)
        assert code == 0 and manifest["status"] == "ok"
        rows = read_csv(tmp_path / "series.csv")
        assert rows[0] == ["t", "t_over_T0", "re_a0", "im_a0", "n0", "purity0"]
        a = np.array([complex(float(r[2]), float(r[3])) for r in rows[1:]])
        T0 = core.soliton_period(nbar)
        t = np.arange(13) * 0.25 * T0
        h = me.heff_diag(nbar, me.coherent_cutoff(nbar) + 1)
        exact = me.exact_diagonal_evolution(h, np.sqrt(nbar), t)["a"] * np.exp(-1j * nbar**2 * t / 8)
        np.testing.assert_allclose(np.abs(a), np.abs(exact), rtol=1e-12)

    def test_fock_v2_toggle(self, tmp_path):
        base = {"nbar": 5.0, "method": "fock-lsm", "n_lsm": 3, "per_mode_cutoff": 14,
                "t_max_in_T0": 1.0, "dt_in_T0": 0.5, "grid": {"L_scaled": 80.0, "Nz": 512}}
        _, on = cli.run(base, tmp_path / "on")
        _, off = cli.run({**base, "toggles": {"v2": False}}, tmp_path / "off")
        assert off["result"]["final_n0"] > on["result"]["final_n0"]
        assert on["diagnostics"]["initial_tail_mass"] < 1e-3

    def test_me_full_outputs(self, tmp_path):
        cfg = {"nbar": 5.0, "method": "me-full", "per_mode_cutoff": 20, "t_max_in_T0": 0.5, "dt_in_T0": 0.25,
               "outputs": {"series": True, "wigner": True, "histogram": True}}
        code, manifest = cli.run(cfg, tmp_path)
        assert code == 0
        assert manifest["diagnostics"]["trace_drift"] < 1e-7
        assert read_csv(tmp_path / "wigner.csv")[0] == ["x", "p", "W"]
        assert read_csv(tmp_path / "histogram.csv")[0] == ["n", "P_t", "P_0"]

    def test_gssf_series_and_spectrum(self, tmp_path):
        cfg = {"nbar": 25.0, "method": "gssf", "t_max_in_T0": 0.02, "dt_in_T0": 0.01, "beta3": 0.3,
               "grid": {"L_scaled": 80.0, "Nz": 128}, "outputs": {"series": True, "spectrum": True}}
        code, manifest = cli.run(cfg, tmp_path)
        assert code == 0
        rows = read_csv(tmp_path / "series.csv")
        assert rows[0] == ["t_over_T0", "re_a0", "im_a0", "n0", "sq1_db", "sq2_db", "dn3"]
        assert np.isfinite(float(rows[-1][6]))
        assert read_csv(tmp_path / "spectrum.csv")[0] == ["pi_k_over_nbar", "ckdag_ck"]

    def test_byte_identical_rerun(self, tmp_path):
        cfg = small_gaussian(outputs={"series": True, "spectrum": True})
        cli.run(cfg, tmp_path / "a")
        cli.run(cfg, tmp_path / "b")
        for name in ("series.csv", "spectrum.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_validation_exit_code(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"nbar": 100.0, "method": "gssf"}))
        assert cli.main(["validate", "--config", str(path)]) == 2
        assert cli.main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert manifest["status"] == "validation-error"
        assert manifest["error"]["field"] == "grid"

    def test_tolerance_exit_code(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"nbar": 5.0, "method": "fock-lsm", "n_lsm": 2, "per_mode_cutoff": 6}))
        assert cli.main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 3
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert manifest["status"] == "tolerance-failure" and manifest["exit_code"] == 3
        assert "wall_time_s" in manifest and manifest["code_version"]

    def test_env_output_root(self, tmp_path, monkeypatch):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"nbar": 100.0, "method": "me-heff", "t_max_in_T0": 0.1}))
        monkeypatch.setenv("SOLITONQ_OUT_DIR", str(tmp_path / "env"))
        assert cli.main(["run", "--config", str(path)]) == 0
        assert (tmp_path / "env" / "manifest.json").exists()


class TestSweep:
    def test_empty_values(self, tmp_path):
        assert cli.sweep(small_gaussian(), "nbar", [], tmp_path) == 0
        assert read_csv(tmp_path / "summary.csv") == [["nbar", "final_n0", "delta_n", "delta_n3", "exit_code"]]

    def test_parallel_invariance(self, tmp_path):
        values = [50.0, 25.0, 100.0]
        cli.sweep(small_gaussian(), "nbar", values, tmp_path / "serial", jobs=1)
        cli.sweep(small_gaussian(), "nbar", values, tmp_path / "pool", jobs=3)
        a = (tmp_path / "serial" / "summary.csv").read_bytes()
        assert a == (tmp_path / "pool" / "summary.csv").read_bytes()
        rows = read_csv(tmp_path / "serial" / "summary.csv")
        assert [float(r[0]) for r in rows[1:]] == values
        for v in values:
            name = f"nbar={v}"
            assert (tmp_path / "serial" / name / "series.csv").read_bytes() == \
                (tmp_path / "pool" / name / "series.csv").read_bytes()

    def test_cli_sweep_nested_axis(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"nbar": 100.0, "method": "me-heff", "t_max_in_T0": 0.5, "dt_in_T0": 0.25}))
        code = cli.main(["sweep", "--config", str(path), "--out", str(tmp_path / "s"),
                         "--axis", "toggles.omega_nbar", "--values", ""])
        assert code == 0
        code = cli.main(["sweep", "--config", str(path), "--out", str(tmp_path / "b"),
                         "--axis", "beta3", "--values", "0.1,0.2"])
        assert code == 0
        rows = read_csv(tmp_path / "b" / "summary.csv")
        assert len(rows) == 3 and all(float(r[3]) > 0 for r in rows[1:])
