import json
import subprocess
import sys

import numpy as np
import pytest

from dgconv import gates as G
from dgconv.checkpoint import read_container, save_checkpoint
from dgconv.cli import main
from dgconv.model import ModelConfig, build_model

CONFIG = """\
[model]
widths = 8, 16
blocks = 1
stem_width = 8
image_size = 16

[train]
epochs = {epochs}
batch_size = 16
lr = {lr}
augment = false

[budget]
b = 2

[data]
kind = synthetic
subset = 48
test_subset = 16
"""


def write_config(tmp_path, epochs=1, lr=0.05, name="run.ini"):
    path = tmp_path / name
    path.write_text(CONFIG.format(epochs=epochs, lr=lr))
    return path


def test_train_writes_outputs(tmp_path, capsys):
    cfg = write_config(tmp_path, epochs=2)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    out = tmp_path / "a"
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,epoch,lr,task_loss,total_loss,zeta,o,multiplier,G_layer_0,G_layer_1,train_acc"
    assert len(lines) == 1 + 2 * 3
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary) >= {"test_accuracy", "zeta", "o", "groups", "satisfied"}
    assert list(summary["groups"]) == ["block0.mid", "block1.mid"]
    header, _ = read_container(out / "checkpoint.dgcv")
    assert header["step"] == 6 and header["meta"]["epoch"] == 1 and header["has_optimizer"]
    assert (out / "gates.csv").read_text().startswith("step,layer,k,tilde_g,g,task_grad,penalty_grad\n")


def test_rerun_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path)
    for d in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / d)]) == 0
    for name in ("metrics.csv", "gates.csv", "checkpoint.dgcv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_invalid_config_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text(CONFIG.format(epochs=1, lr=0.1).replace("stem_width = 8", "stem_widht = 8"))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "line 4, column 1" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3(tmp_path, capsys):
    cfg = write_config(tmp_path, epochs=3, lr=1e30)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    err = capsys.readouterr().err
    assert "diverged" in err and '"step"' in err


def hand_built_checkpoint(path, gates):
    model = build_model(ModelConfig(widths=(8, 16), blocks=1, stem_width=8, input_shape=(3, 16, 16)))
    for layer, g in zip(model.dgconv_layers(), gates):
        layer.gates.data = np.where(np.array(g) == 1, 0.5, -0.5)
    save_checkpoint(path, model, budget={"b": 2.0, "alpha": -0.02, "o": 160.0})
    return path


def test_analyze_reports_groups(tmp_path, capsys):
    ckpt = hand_built_checkpoint(tmp_path / "h.dgcv", ([0, 1, 0], [1, 1, 1, 1]))
    assert main(["analyze", "--ckpt", str(ckpt)]) == 0
    report = json.loads((tmp_path / "analysis.json").read_text())
    first, second = report["layers"]
    assert (first["in_channels"], first["groups"], first["zeta"]) == (8, 4, 16)
    assert (second["groups"], second["zeta"]) == (1, 256)
    assert report["zeta"] == first["zeta"] + second["zeta"]
    assert report["o"] == 160.0 and report["satisfied"] is False
    assert "G=4" in capsys.readouterr().out
    assert main(["analyze", "--ckpt", str(ckpt), "--b", "1", "--out", str(tmp_path / "x.json")]) == 0
    assert json.loads((tmp_path / "x.json").read_text())["satisfied"] is True


def test_analyze_all_positive_gates(tmp_path):
    ckpt = hand_built_checkpoint(tmp_path / "h.dgcv", ([1, 1, 1], [1, 1, 1, 1]))
    assert main(["analyze", "--ckpt", str(ckpt)]) == 0
    report = json.loads((tmp_path / "analysis.json").read_text())
    assert [l["groups"] for l in report["layers"]] == [1, 1]


def test_export_dense_ratio_and_eval(tmp_path, capsys):
    ckpt = hand_built_checkpoint(tmp_path / "h.dgcv", ([1, 1, 1], [1, 1, 1, 1]))
    assert main(["export", "--ckpt", str(ckpt), "--out", str(tmp_path / "m.dgcv")]) == 0
    header, _ = read_container(tmp_path / "m.dgcv")
    assert header["savings"]["total"]["ratio_vs_dense"] == 1.0
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(tmp_path / "m.dgcv"), "--data", "synthetic:8"]) == 0
    assert json.loads(capsys.readouterr().out)["n"] == 8


def test_export_smaller_when_any_gate_is_zero(tmp_path):
    ckpt = hand_built_checkpoint(tmp_path / "h.dgcv", ([1, 1, 0], [1, 1, 1, 1]))
    assert main(["export", "--ckpt", str(ckpt), "--out", str(tmp_path / "m.dgcv")]) == 0
    assert (tmp_path / "m.dgcv").stat().st_size < ckpt.stat().st_size


def test_export_unsupported_layer_exit_2(tmp_path, monkeypatch, capsys):
    ckpt = hand_built_checkpoint(tmp_path / "h.dgcv", ([1, 0, 1], [1, 1, 1, 1]))
    monkeypatch.setattr(G, "is_block_diagonal", lambda *a, **k: False)
    assert main(["export", "--ckpt", str(ckpt), "--out", str(tmp_path / "m.dgcv")]) == 2
    assert "block0.mid" in capsys.readouterr().err


def test_corrupt_checkpoint_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.dgcv"
    bad.write_bytes(b"not a checkpoint at all")
    for cmd in (["analyze", "--ckpt", str(bad)], ["eval", "--ckpt", str(bad), "--data", "synthetic"],
                ["export", "--ckpt", str(bad), "--out", str(tmp_path / "m")]):
        assert main(cmd) == 2
    assert "bad magic" in capsys.readouterr().err


def test_bad_data_spec_exit_2(tmp_path):
    ckpt = hand_built_checkpoint(tmp_path / "h.dgcv", ([1, 1, 1], [1, 1, 1, 1]))
    assert main(["eval", "--ckpt", str(ckpt), "--data", "mnist:/x"]) == 2
    assert main(["eval", "--ckpt", str(ckpt), "--data", f"cifar10:{tmp_path}"]) == 2


def test_verify_passes(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "PASS binarize_sign_convention" in out and "FAIL" not in out


def test_verify_catches_flipped_sign_convention(monkeypatch, capsys):
    monkeypatch.setattr(G, "binarize", lambda t: (np.asarray(t, dtype=np.float64) < 0).astype(np.uint8))
    assert main(["verify"]) == 1
    out = capsys.readouterr().out
    failed = out.strip().splitlines()[-1]
    assert failed.startswith("failed checks:")
    assert "binarize_sign_convention" in failed and "binarize_zero_gate_layer_is_dense" in failed


def test_thread_env_and_module_entry(tmp_path):
    env = {"DGCONV_NUM_THREADS": "1", "PATH": "/usr/bin:/bin"}
    proc = subprocess.run([sys.executable, "-m", "dgconv", "verify", "--check", "gate_parameter_count"],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    assert "PASS gate_parameter_count" in proc.stdout


def test_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == 2
