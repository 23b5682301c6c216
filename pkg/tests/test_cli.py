import json
import struct
import subprocess
import sys

import pytest

from pglight.cli import main

PLAN = '{"keep_channels": 6, "heads_per_group": 1, "keep_ffn": 12, "layer_action": ["keep", "keep"]}'


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def toy(tmp_path):
    assert _run("init-toy", "--out", tmp_path, "--seed", 3) == 0
    return tmp_path / "toy.pgl"


def _artifacts(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


class TestPipeline:
    def test_identity_is_byte_identical(self, toy, tmp_path):
        out = tmp_path / "run"
        assert _run("pipeline", "--checkpoint", toy, "--out", out) == 0
        assert (out / "student.pgl").read_bytes() == toy.read_bytes()

    def test_deterministic(self, toy, tmp_path):
        for name in ("a", "b"):
            argv = ("pipeline", "--checkpoint", toy, "--plan", PLAN, "--sites", "all", "--out", tmp_path / name)
            assert _run(*argv) == 0
        assert _artifacts(tmp_path / "a") == _artifacts(tmp_path / "b")

    def test_reports_written(self, toy, tmp_path):
        out = tmp_path / "r"
        assert _run("pipeline", "--checkpoint", toy, "--plan", PLAN, "--sites", "attn", "--out", out) == 0
        names = {p.name for p in out.iterdir()}
        assert {"stats.json", "scores.json", "surgery.json", "absorption.json", "eval.json", "student.pgl"} <= names
        ev = json.loads((out / "eval.json").read_text())
        assert ev["kd_loss"] >= 0


class TestCommands:
    def test_prune_then_verify(self, toy, tmp_path):
        out = tmp_path / "p"
        assert _run("prune", "--checkpoint", toy, "--plan", PLAN, "--out", out) == 0
        rc = _run("verify", "--checkpoint", out / "student.pgl", "--report", out / "surgery.json", "--out", out)
        assert rc == 0
        assert json.loads((out / "verify.json").read_text())["report"] == "ok"

    def test_verify_rejects_mismatched_report(self, toy, tmp_path, capsys):
        out = tmp_path / "p"
        assert _run("prune", "--checkpoint", toy, "--plan", PLAN, "--out", out) == 0
        assert _run("verify", "--checkpoint", toy, "--report", out / "surgery.json", "--out", out) == 3
        assert "final_config" in json.loads(capsys.readouterr().err)["message"]

    def test_plan_file(self, toy, tmp_path):
        plan = tmp_path / "plan.json"
        plan.write_text(PLAN)
        assert _run("prune", "--checkpoint", toy, "--plan", plan, "--out", tmp_path / "q") == 0

    def test_absorb_and_eval(self, toy, tmp_path):
        out = tmp_path / "x"
        assert _run("absorb", "--checkpoint", toy, "--sites", "all", "--out", out) == 0
        rep = json.loads((out / "absorption.json").read_text())
        assert len(rep["sites"]) == 4 and rep["max_rel_logit_deviation"] >= 0
        assert _run("eval", "--checkpoint", out / "absorbed.pgl", "--teacher", toy, "--out", out) == 0

    def test_calibrate_score_estimate(self, toy, tmp_path):
        for cmd in ("calibrate", "score", "estimate"):
            assert _run(cmd, "--checkpoint", toy, "--out", tmp_path) == 0
        assert json.loads((tmp_path / "cost.json").read_text())["relative_speed"] == 1.0

    def test_calib_file(self, toy, tmp_path):
        f = tmp_path / "c.txt"
        f.write_text("1 2 3 4\n5 6 7\n")
        assert _run("calibrate", "--checkpoint", toy, "--calib", f, "--out", tmp_path) == 0
        assert json.loads((tmp_path / "stats.json").read_text())["token_count"] == 7


class TestErrors:
    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            main(["shrink"])
        assert exc.value.code == 2

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert _run("verify", "--checkpoint", tmp_path / "nope.pgl") == 3
        err = json.loads(capsys.readouterr().err)
        assert err["exit_code"] == 3 and "error" in err

    def test_no_checkpoint_flag(self, capsys):
        assert _run("prune") == 3

    def test_bad_plan(self, toy, tmp_path, capsys):
        assert _run("prune", "--checkpoint", toy, "--plan", '{"heads_per_group": 9}', "--out", tmp_path) == 3
        assert json.loads(capsys.readouterr().err)["error"] == "PlanError"

    def test_corrupt_checkpoint(self, toy, tmp_path):
        bad = tmp_path / "bad.pgl"
        bad.write_bytes(toy.read_bytes()[:-4])
        assert _run("verify", "--checkpoint", bad) == 3

    def test_nan_weights_exit_numeric(self, toy, tmp_path):
        raw = toy.read_bytes()
        bad = tmp_path / "nan.pgl"
        bad.write_bytes(raw[:-4] + struct.pack("<f", float("nan")))
        assert _run("verify", "--checkpoint", bad) == 4


def test_module_entry_point(toy):
    r = subprocess.run([sys.executable, "-m", "pglight", "verify", "--checkpoint", str(toy), "--out", str(toy.parent)],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "ok" in r.stdout
