import csv
import json

import pytest

from analog_dam import cli
from analog_dam.et import load_checkpoint, save_checkpoint, zero_model


def run(tmp_path, *argv, name="out"):
    out = tmp_path / name
    code = cli.main(["--out", str(out), *argv])
    return code, out


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestXor:
    def test_single_case(self, tmp_path):
        code, out = run(tmp_path, "xor", "--x1", "1", "--x2", "0")
        assert code == cli.EXIT_OK
        assert rows(out / "results.csv")[0]["predicted"] == "1"
        assert (out / "trajectory_10.csv").exists()

    def test_zero_zero(self, tmp_path):
        code, out = run(tmp_path, "xor", "--x1", "0", "--x2", "0")
        assert code == 0 and rows(out / "results.csv")[0]["predicted"] == "0"

    def test_all(self, tmp_path):
        code, out = run(tmp_path, "xor", "--all", "--tau-h", "0")
        r = rows(out / "results.csv")
        assert code == 0 and len(r) == 4
        assert all(x["predicted"] == x["target"] for x in r)

    @pytest.mark.parametrize("argv", [["xor", "--x1", "2", "--x2", "0"], ["xor", "--x1", "1"], ["xor", "--all", "--dt", "0.5"],
                                      ["bogus"], ["xor", "--all", "--beta", "-1"]])
    def test_usage_errors(self, tmp_path, argv):
        assert run(tmp_path, *argv)[0] == cli.EXIT_USAGE

    def test_non_convergence_exit_code(self, tmp_path):
        code, out = run(tmp_path, "xor", "--all", "--t-max", "0.05")
        assert code == cli.EXIT_FAIL
        assert json.loads((out / "manifest.json").read_text())["exit_code"] == cli.EXIT_FAIL

    def test_byte_identical_reruns(self, tmp_path):
        _, a = run(tmp_path, "xor", "--all", name="a")
        _, b = run(tmp_path, "xor", "--all", name="b")
        for f in ("results.csv", "trajectory_01.csv", "trajectory_11.csv"):
            assert (a / f).read_bytes() == (b / f).read_bytes()


class TestHamming:
    def test_single_word(self, tmp_path):
        code, out = run(tmp_path, "hamming", "--word", "0001011")
        assert code == 0
        assert rows(out / "results.csv")[0]["decoded"] == "0001111"

    def test_clean_word(self, tmp_path):
        code, out = run(tmp_path, "hamming", "--word", "0000000")
        assert code == 0 and rows(out / "results.csv")[0]["decoded"] == "0000000"

    def test_exhaustive(self, tmp_path):
        code, out = run(tmp_path, "hamming", "--exhaustive")
        r = rows(out / "results.csv")
        assert code == 0 and len(r) == 128 and all(x["correct"] == "1" for x in r)

    def test_wrong_length(self, tmp_path):
        assert run(tmp_path, "hamming", "--word", "0101")[0] == cli.EXIT_USAGE


class TestConfigAndManifest:
    def test_manifest_contents(self, tmp_path):
        code, out = run(tmp_path, "xor", "--x1", "0", "--x2", "1", "--beta", "6")
        doc = json.loads((out / "manifest.json").read_text())
        assert doc["command"] == "xor" and doc["exit_code"] == 0
        assert doc["config"]["beta"] == 6.0 and doc["config"]["x1"] == 0
        assert "Philox" in doc["rng"]
        assert doc["backend"] in ("python", "cython")
        assert set(doc["outputs"]) == {"trajectory_01.csv", "results.csv"}

    def test_precedence(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"xor": {"beta": 5.0, "tau_h": 0.0}}))
        code, out = run(tmp_path, "--config", str(cfg), "xor", "--all", "--beta", "7")
        doc = json.loads((out / "manifest.json").read_text())
        assert code == 0
        assert doc["config"]["beta"] == 7.0 and doc["config"]["tau_h"] == 0.0

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"gamma": 1}))
        assert run(tmp_path, "--config", str(cfg), "xor", "--all")[0] == cli.EXIT_USAGE

    def test_missing_config_file(self, tmp_path):
        assert run(tmp_path, "--config", str(tmp_path / "none.json"), "xor", "--all")[0] == cli.EXIT_IO


class TestEt:
    def test_infer_reference(self, tmp_path, capsys):
        code, out = run(tmp_path, "et", "infer", "--context", "10110100")
        assert code == 0
        assert rows(out / "result.csv")[0]["token"] == "0"
        assert "token=0" in capsys.readouterr().out

    def test_generate_window_keeps_length(self, tmp_path):
        code, out = run(tmp_path, "et", "generate", "--prompt", "10110100", "--steps", "3", "--mode", "window")
        doc = json.loads((out / "manifest.json").read_text())
        assert code == 0
        assert doc["result"]["context_rows"] == [8, 8, 8]

    def test_generate_grow(self, tmp_path):
        code, out = run(tmp_path, "et", "generate", "--prompt", "1011", "--steps", "2", "--mode", "grow")
        assert code == 0
        assert [r["context_rows"] for r in rows(out / "generate.csv")] == ["5", "6"]

    def test_missing_checkpoint(self, tmp_path):
        code, _ = run(tmp_path, "et", "infer", "--checkpoint", str(tmp_path / "nope.json"), "--context", "0101")
        assert code == cli.EXIT_IO

    def test_corrupt_checkpoint(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{}")
        assert run(tmp_path, "et", "infer", "--checkpoint", str(bad), "--context", "0101")[0] == cli.EXIT_IO

    def test_custom_checkpoint(self, tmp_path):
        path = tmp_path / "zero.json"
        save_checkpoint(zero_model(D=4, L=3, M=2).replace(decode_bias=[1.0, 0.0]), path)
        code, out = run(tmp_path, "et", "infer", "--checkpoint", str(path), "--context", "011")
        assert code == 0 and rows(out / "result.csv")[0]["token"] == "0"

    def test_train_short(self, tmp_path):
        code, out = run(tmp_path, "et", "train", "--epochs", "1", "--dt-train", "0.01")
        assert code == 0
        assert len(rows(out / "train_log.csv")) == 2
        load_checkpoint(out / "checkpoint.json")


class TestAnalysisCommands:
    def test_hwbounds_builtin(self, tmp_path, capsys):
        code, out = run(tmp_path, "hwbounds", "--builtin")
        assert code == 0
        first = rows(out / "tau_bounds.csv")[0]
        assert (first["gbw_mhz"], first["tau_gbw_ns"], first["t_conv_ns"]) == ("321.50", "0.50", "118.34")
        assert len(rows(out / "tau_bounds.csv")) == 5

    def test_hwbounds_spec_file(self, tmp_path):
        spec = tmp_path / "amps.json"
        spec.write_text(json.dumps([{"name": "mine", "sr": 202.0, "gbw": 10.7}]))
        code, out = run(tmp_path, "hwbounds", "--spec", str(spec))
        assert code == 0 and rows(out / "tau_bounds.csv")[0]["t_conv_ns"] == "148.74"

    def test_hwbounds_bad_spec(self, tmp_path):
        spec = tmp_path / "amps.json"
        spec.write_text(json.dumps([{"name": "x", "sr": -1, "gbw": 1}]))
        assert run(tmp_path, "hwbounds", "--spec", str(spec))[0] == cli.EXIT_USAGE

    def test_circuit_check(self, tmp_path):
        code, out = run(tmp_path, "circuit-check")
        assert code == 0
        assert all(r["passed"] == "1" for r in rows(out / "circuit_check.csv"))

    def test_scale_needs_three_sizes(self, tmp_path):
        assert run(tmp_path, "scale", "--sizes", "8")[0] == cli.EXIT_USAGE
        assert run(tmp_path, "scale", "--sizes", "8,16")[0] == cli.EXIT_USAGE
        assert run(tmp_path, "scale", "--sizes", "16,8,32")[0] == cli.EXIT_USAGE

    def test_scale_small(self, tmp_path):
        code, out = run(tmp_path, "scale", "--sizes", "8,16,32", "--seeds", "2")
        assert code == 0
        assert len(rows(out / "scaling.csv")) == 3
        assert "slope" in (out / "summary.txt").read_text()
        _, again = run(tmp_path, "scale", "--sizes", "8,16,32", "--seeds", "2", name="again")
        assert (out / "scaling.csv").read_bytes() == (again / "scaling.csv").read_bytes()
