import json
import subprocess
import sys

import numpy as np
import pytest

from renas.cli import main
from renas.discretize import validate_arch_doc

TINY = {
    "seed": 0,
    "M": 1,
    "N": 3,
    "K": 2,
    "C0": 4,
    "classes": 4,
    "image_size": 8,
    "batch_size": 16,
    "total_steps": 3,
    "val_size": 32,
    "op_set": ["dwsep3", "conv3", "conv5"],
    "dataset": {"kind": "synthetic", "samples_per_class": 40},
}


def write_config(path, **overrides):
    doc = dict(TINY, **overrides)
    path.write_text(json.dumps(doc, indent=2))
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def searched(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", checkpoint_every=1)
    code, out, _ = run(capsys, "search", "--config", cfg, "--out", str(tmp_path / "run"))
    assert code == 0
    return tmp_path / "run", json.loads(out)


class TestSpaceSize:
    @pytest.mark.parametrize("args,expected", [(("1", "3", "6"), "1728"), (("1", "1", "1"), "1")])
    def test_small(self, capsys, args, expected):
        code, out, _ = run(capsys, "space-size", "--dags", args[0], "--nodes", args[1], "--ops", args[2])
        assert code == 0
        assert out.splitlines()[0] == expected

    def test_big_integer_and_log10(self, capsys):
        code, out, _ = run(capsys, "space-size", "--dags", "2", "--nodes", "8", "--ops", "6")
        lines = out.splitlines()
        assert lines[0] == str(2 * 6**8 * 2**28) == "901736973729792"
        assert lines[1] == "log10 14.955"

    def test_non_integer_rejected(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["space-size", "--dags", "2.5", "--nodes", "3", "--ops", "6"])
        assert exc.value.code == 2
        with pytest.raises(SystemExit):
            main(["space-size", "--dags", "0", "--nodes", "3", "--ops", "6"])


class TestSearchCommand:
    def test_outputs(self, searched):
        out_dir, summary = searched
        assert (out_dir / "final.bin").is_file()
        assert sorted(p.name for p in out_dir.glob("ckpt_*.bin")) == [f"ckpt_000000{i}.bin" for i in (1, 2, 3)]
        rows = [json.loads(line) for line in (out_dir / "metrics.jsonl").read_text().splitlines()]
        assert [r["step"] for r in rows] == [0, 1, 2]
        assert set(rows[0]) == {"step", "train_loss", "val_loss", "lr"}
        assert summary["steps"] == 3

    def test_repeat_gives_identical_metrics(self, tmp_path, capsys, searched):
        out_dir, _ = searched
        cfg = write_config(tmp_path / "again.json", checkpoint_every=1)
        assert run(capsys, "search", "--config", cfg, "--out", str(tmp_path / "again"))[0] == 0
        assert (tmp_path / "again" / "metrics.jsonl").read_bytes() == (out_dir / "metrics.jsonl").read_bytes()
        assert (tmp_path / "again" / "final.bin").read_bytes() == (out_dir / "final.bin").read_bytes()

    def test_k_not_dividing_c0(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "bad.json", K=3, C0=16)
        code, _, err = run(capsys, "search", "--config", cfg, "--out", str(tmp_path / "x"))
        assert code == 2
        assert "K=3" in err and "C0=16" in err
        assert not (tmp_path / "x").exists()

    def test_unknown_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "bad.json", learning_rate=0.1)
        code, _, err = run(capsys, "search", "--config", cfg, "--out", str(tmp_path / "x"))
        assert code == 2 and "learning_rate" in err

    def test_wrong_type_names_field(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "bad.json", batch_size="big")
        code, _, err = run(capsys, "search", "--config", cfg, "--out", str(tmp_path / "x"))
        assert code == 2 and "batch_size" in err

    def test_malformed_json_reports_line(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text('{\n  "seed": 0,\n  "M": ,\n}')
        code, _, err = run(capsys, "search", "--config", str(p), "--out", str(tmp_path / "x"))
        assert code == 2 and "line 3" in err

    def test_missing_dataset(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", dataset={"kind": "cifar10", "path": str(tmp_path / "nope")})
        code, _, err = run(capsys, "search", "--config", cfg, "--out", str(tmp_path / "x"))
        assert code == 2 and "nope" in err
        assert not (tmp_path / "x").exists()

    def test_seed_override(self, tmp_path, capsys, monkeypatch, caplog):
        cfg = write_config(tmp_path / "c.json", total_steps=1)
        run(capsys, "search", "--config", cfg, "--out", str(tmp_path / "a"))
        monkeypatch.setenv("RENAS_SEED", "9")
        code, _, _ = run(capsys, "search", "--config", cfg, "--out", str(tmp_path / "b"))
        assert code == 0 and "RENAS_SEED=9" in caplog.text
        assert (tmp_path / "a" / "final.bin").read_bytes() != (tmp_path / "b" / "final.bin").read_bytes()


class TestDeriveCommand:
    def test_json_and_dot(self, searched, tmp_path, capsys):
        out_dir, _ = searched
        arch, dot = tmp_path / "arch.json", tmp_path / "arch.dot"
        code, out, _ = run(capsys, "derive", "--checkpoint", str(out_dir / "final.bin"), "--out", str(arch), "--dot", str(dot))
        assert code == 0
        report = json.loads(out)
        doc = json.loads(arch.read_text())
        validate_arch_doc(doc)
        assert 0.5 <= report["retained_fraction"] <= 0.6
        assert report["param_count"] == doc["param_count"]
        n_in = sum(len(node["in"]) for dag in doc["dags"] for node in dag["nodes"])
        assert dot.read_text().count("->") == n_in

    def test_diff_against_earlier_checkpoint(self, searched, tmp_path, capsys):
        out_dir, _ = searched
        code, out, err = run(
            capsys, "derive", "--checkpoint", str(out_dir / "final.bin"), "--out", str(tmp_path / "a.json"),
            "--against", str(out_dir / "ckpt_0000001.bin"),
        )
        assert code == 0
        report = json.loads(out)
        assert f"{len(report['op_changes'])} node(s) changed" in err
        for line in report["op_changes"]:
            assert line in err

    def test_corrupt_checkpoint(self, searched, tmp_path, capsys):
        out_dir, _ = searched
        raw = bytearray((out_dir / "final.bin").read_bytes())
        raw[-1] ^= 1
        bad = tmp_path / "bad.bin"
        bad.write_bytes(bytes(raw))
        code, _, err = run(capsys, "derive", "--checkpoint", str(bad), "--out", str(tmp_path / "a.json"))
        assert code == 1 and "hash" in err
        assert not (tmp_path / "a.json").exists()


class TestEvalCommand:
    def _derive(self, searched, tmp_path, capsys):
        out_dir, _ = searched
        arch = tmp_path / "arch.json"
        assert run(capsys, "derive", "--checkpoint", str(out_dir / "final.bin"), "--out", str(arch))[0] == 0
        return str(arch)

    def test_report_is_deterministic(self, searched, tmp_path, capsys):
        arch = self._derive(searched, tmp_path, capsys)
        data = json.dumps({"kind": "synthetic", "samples_per_class": 40})
        code, first, _ = run(capsys, "eval", "--arch", arch, "--data", data)
        assert code == 0
        report = json.loads(first)
        assert set(report) == {"accuracy", "loss", "param_count", "retrain_steps", "test_samples"}
        assert run(capsys, "eval", "--arch", arch, "--data", data)[1] == first

    def test_retrain_flag(self, searched, tmp_path, capsys):
        arch = self._derive(searched, tmp_path, capsys)
        data = json.dumps({"kind": "synthetic", "samples_per_class": 40})
        code, out, _ = run(capsys, "eval", "--arch", arch, "--data", data, "--retrain", "2")
        assert code == 0 and json.loads(out)["retrain_steps"] == 2

    def test_class_mismatch(self, searched, tmp_path, capsys):
        arch = self._derive(searched, tmp_path, capsys)
        code, _, err = run(capsys, "eval", "--arch", arch, "--data", json.dumps({"kind": "synthetic", "classes": 10}))
        assert code == 2 and "classes" in err

    def test_untrained_arch_is_at_chance(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", classes=10, total_steps=0, seed=3)
        assert run(capsys, "search", "--config", cfg, "--out", str(tmp_path / "run"))[0] == 0
        arch = tmp_path / "arch.json"
        assert run(capsys, "derive", "--checkpoint", str(tmp_path / "run" / "final.bin"), "--out", str(arch))[0] == 0
        # fresh weights carry no label information, so accuracy should sit at 1/classes
        data = json.dumps({"kind": "synthetic", "classes": 10, "samples_per_class": 500, "noise_sigma": 0.3})
        code, out, _ = run(capsys, "eval", "--arch", str(arch), "--data", data, "--fresh")
        report = json.loads(out)
        n = report["test_samples"]
        assert code == 0 and n >= 1000
        assert abs(report["accuracy"] - 0.1) < 3 * np.sqrt(0.09 / n)


def test_module_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "renas", "space-size", "--dags", "1", "--nodes", "3", "--ops", "6"],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0
    assert proc.stdout.splitlines() == ["1728", "log10 3.238"]
