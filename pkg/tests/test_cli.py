import json
import subprocess
import sys

import pytest

from agvrnd.cli import main
from agvrnd.scenefile import load_scene, make_scene


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def _error(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


class TestTrain:
    def test_train_and_eval(self, tmp_path, capsys):
        out_dir = tmp_path / "run"
        code, out, _ = _run(capsys, "train", "--scene", "simple_static", "--rnd", "on", "--steps", "2048",
                            "--seed", "1", "--out", str(out_dir))
        assert code == 0
        summary = json.loads(out)
        assert summary["env_steps"] == 2048
        assert (out_dir / "metrics.csv").exists()

        code, out, _ = _run(capsys, "eval", "--checkpoint", str(out_dir / "checkpoint.bin"), "--scene",
                            "simple_static", "--episodes", "2", "--deterministic")
        assert code == 0
        result = json.loads(out)
        assert result["n_episodes"] == 2 and len(result["per_spawn_success"]) == 1

    def test_config_file_and_override_precedence(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"scene = simple_dynamic\nrnd_enabled = off\ntotal_env_steps = 4096\n"
                       f"epochs = 1\nout_dir = {tmp_path / 'from_file'}\n")
        code, _, _ = _run(capsys, "train", "--config", str(cfg), "--steps", "2048", "--epochs", "2")
        assert code == 0
        text = (tmp_path / "from_file" / "config.txt").read_text()
        assert "total_env_steps=2048" in text and "epochs=2" in text and "rnd_enabled=off" in text

    def test_missing_output_dir(self, capsys):
        code, _, err = _run(capsys, "train", "--scene", "simple_static", "--steps", "2048")
        assert code == 1 and _error(err)["error"] == "config"

    def test_bad_override(self, tmp_path, capsys):
        code, _, err = _run(capsys, "train", "--out", str(tmp_path), "--learning-rate", "fast")
        assert code == 1 and _error(err)["error"] == "config"

    def test_bad_scene_file_reports_line(self, tmp_path, capsys):
        bad = tmp_path / "bad.scene"
        bad.write_text("half_extent = 10\nwobble = 3\n")
        code, _, err = _run(capsys, "train", "--scene", str(bad), "--out", str(tmp_path / "o"))
        e = _error(err)
        assert code == 1 and e["error"] == "scene_file" and "bad.scene:2:" in e["message"]

    def test_unknown_scene(self, tmp_path, capsys):
        code, _, err = _run(capsys, "train", "--scene", "nowhere", "--out", str(tmp_path))
        assert code == 1 and _error(err)["error"] in ("not_found", "invalid")


class TestEval:
    def test_missing_checkpoint(self, tmp_path, capsys):
        code, _, err = _run(capsys, "eval", "--checkpoint", str(tmp_path / "x.bin"), "--scene", "simple_static",
                            "--episodes", "1")
        assert code == 1 and _error(err)["error"] == "not_found"

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        path = tmp_path / "x.bin"
        path.write_bytes(b"garbage")
        code, _, err = _run(capsys, "eval", "--checkpoint", str(path), "--scene", "simple_static", "--episodes", "1")
        assert code == 1 and _error(err)["error"] == "checkpoint"


class TestExportScene:
    def test_export(self, tmp_path, capsys):
        out = tmp_path / "s.scene"
        code, _, _ = _run(capsys, "export-scene", "--preset", "complex_dynamic", "--out", str(out))
        assert code == 0
        assert load_scene(out) == make_scene("complex_dynamic")


class TestUsage:
    def test_no_command(self, capsys):
        code, _, err = _run(capsys)
        assert code == 2 and _error(err)["error"] == "usage"

    def test_bad_choice(self, capsys):
        code, _, err = _run(capsys, "train", "--rnd", "maybe")
        assert code == 2 and _error(err)["error"] == "usage"


def test_module_entry_point(tmp_path):
    out = tmp_path / "s.scene"
    proc = subprocess.run([sys.executable, "-m", "agvrnd", "export-scene", "--preset", "simple_static",
                           "--out", str(out)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert out.exists()
