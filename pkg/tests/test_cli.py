import json
import subprocess
import sys
from pathlib import Path

import pytest
import tomli_w

from biaslab.cli import COMMANDS, main
from biaslab.formats import read_dataset

SMALL = {
    "data": {"n_per_class": 20, "side": 16},
    "train": {"epochs": 1},
    "gebi": {"knn_k": 5, "cluster_k": 2},
    "tda": {"ps": [0.0, 0.5]},
    "feedback": {"epochs": 1},
    "stda": {"pairs": 2, "iterations": 2},
}


def write_config(tmp_path, doc=SMALL, name="small.toml"):
    path = tmp_path / name
    path.write_text(tomli_w.dumps(doc))
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, Path(out.out.strip()) if code == 0 else None, out.err


def tree(path: Path) -> dict:
    """Relative path -> bytes for every file except the echoed config."""
    return {str(p.relative_to(path)): p.read_bytes() for p in sorted(path.rglob("*"))
            if p.is_file() and p.name != "config.toml"}


EXPECTED = {
    "gen-data": ["dataset/manifest.csv", "stats_report.json"],
    "train": ["model.bin", "train_report.json"],
    "audit-gebi": ["gebi_report.json"],
    "audit-cbi": ["cbi_report.json", "cbi_frame.csv", "cbi_circle.csv"],
    "sweep-tda": ["tda_sweep.csv"],
    "finetune-attr": ["attr_finetune.json", "model_finetuned.bin"],
    "stda": ["stda/manifest.csv", "stda/provenance.csv"],
    "stats": ["stats_report.json"],
}


class TestCommands:
    @pytest.mark.parametrize("command", sorted(EXPECTED))
    def test_outputs_and_rerun(self, tmp_path, capsys, command):
        code, first, err = run(capsys, command, "--config", write_config(tmp_path), "--out", tmp_path / "runs")
        assert code == 0, err
        assert first.name.startswith(command + "-")
        for name in EXPECTED[command] + ["config.toml"]:
            assert (first / name).exists(), name
        code, second, err = run(capsys, command, "--config", first / "config.toml", "--out", tmp_path / "again")
        assert code == 0, err
        assert (second / "config.toml").read_bytes() == (first / "config.toml").read_bytes()
        assert tree(second) == tree(first)

    def test_gen_data_empty(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"data": {"n_per_class": 0}})
        code, out, _ = run(capsys, "gen-data", "--config", cfg, "--out", tmp_path)
        assert code == 0
        assert len(read_dataset(out / "dataset")) == 0

    def test_identity_cbi_is_zero(self, tmp_path, capsys):
        doc = dict(SMALL, cbi={"transforms": ["identity"]})
        code, out, _ = run(capsys, "audit-cbi", "--config", write_config(tmp_path, doc), "--out", tmp_path)
        assert code == 0
        rep = json.loads((out / "cbi_report.json").read_text())["identity"]
        assert rep["switched_total"] == 0 and rep["mean_change"] == 0.0

    def test_seed_override_echoed(self, tmp_path, capsys):
        code, out, _ = run(capsys, "stats", "--config", write_config(tmp_path), "--seed", 5, "--out", tmp_path)
        assert code == 0
        assert "seed = 5" in (out / "config.toml").read_text()

    def test_model_reuse(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        _, trained, _ = run(capsys, "train", "--config", cfg, "--out", tmp_path)
        doc = dict(SMALL, io={"model": str(trained / "model.bin")})
        code, out, err = run(capsys, "audit-cbi", "--config", write_config(tmp_path, doc, "reuse.toml"), "--out", tmp_path)
        assert code == 0, err
        assert not (out / "model.bin").exists()

    def test_data_dir_reuse(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        _, gen, _ = run(capsys, "gen-data", "--config", cfg, "--out", tmp_path)
        doc = dict(SMALL, io={"data_dir": str(gen / "dataset")})
        code, out, _ = run(capsys, "stats", "--config", write_config(tmp_path, doc, "reuse.toml"), "--out", tmp_path)
        assert code == 0
        assert (out / "stats_report.json").read_bytes() == (gen / "stats_report.json").read_bytes()


class TestExitCodes:
    def test_unknown_key(self, tmp_path, capsys):
        code, _, err = run(capsys, "stats", "--config", write_config(tmp_path, {"train": {"momentum": 1.0}}))
        assert code == 2 and "momentum" in err

    def test_bad_toml(self, tmp_path, capsys):
        path = tmp_path / "bad.toml"
        path.write_text("[data\n")
        assert run(capsys, "stats", "--config", path)[0] == 2

    def test_bad_threads(self, tmp_path, capsys):
        assert run(capsys, "stats", "--threads", 0, "--out", tmp_path)[0] == 2

    def test_missing_manifest(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"io": {"data_dir": str(tmp_path / "none")}})
        code, _, err = run(capsys, "stats", "--config", cfg, "--out", tmp_path)
        assert code == 3 and "manifest" in err

    def test_corrupt_pgm(self, tmp_path, capsys):
        _, gen, _ = run(capsys, "gen-data", "--config", write_config(tmp_path), "--out", tmp_path)
        (gen / "dataset/images/img000003.pgm").write_bytes(b"P5\n16 16\n255\n" + bytes(10))
        cfg = write_config(tmp_path, {"io": {"data_dir": str(gen / "dataset")}}, "reuse.toml")
        code, _, err = run(capsys, "stats", "--config", cfg, "--out", tmp_path)
        assert code == 3 and "img000003" in err and "byte" in err

    def test_missing_checkpoint(self, tmp_path, capsys):
        doc = dict(SMALL, io={"model": str(tmp_path / "none.bin")})
        assert run(capsys, "audit-cbi", "--config", write_config(tmp_path, doc), "--out", tmp_path)[0] == 3

    def test_numeric_failure(self, tmp_path, capsys):
        # one batch per epoch: the first update blows up, the second epoch reports it
        doc = dict(SMALL, train={"epochs": 2, "learning_rate": 1e300, "batch_size": 64})
        code, _, err = run(capsys, "train", "--config", write_config(tmp_path, doc), "--out", tmp_path)
        assert code == 4 and "epoch 1, batch 0" in err

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            main(["explode"])


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "biaslab.cli", "stats", "--config", str(write_config(tmp_path)),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert Path(proc.stdout.strip(), "stats_report.json").exists()


def test_command_list():
    assert set(COMMANDS) == set(EXPECTED) | {"repro"}
