import numpy as np
import pytest

from dgconv.checkpoint import (
    MAGIC,
    encode_checkpoint,
    load_any,
    load_checkpoint,
    load_compiled,
    read_container,
    save_checkpoint,
    save_compiled,
)
from dgconv.compiler import compile_model
from dgconv.errors import CheckpointError
from dgconv.model import ModelConfig, build_model
from dgconv.trainer import SGD

CFG = ModelConfig(widths=(8, 16), blocks=1, stem_width=8, input_shape=(3, 8, 8))


def test_round_trip_is_byte_identical(tmp_path):
    model = build_model(CFG, seed=5)
    opt = SGD(model.named_parameters())
    for v in opt.velocity.values():
        v += 0.25
    path = tmp_path / "a.dgcv"
    save_checkpoint(path, model, step=7, optimizer=opt, budget={"b": 2.0, "o": 160.0}, meta={"epoch": 1})
    ckpt = load_checkpoint(path)
    assert ckpt.step == 7 and ckpt.budget["o"] == 160.0
    opt2 = SGD(ckpt.model.named_parameters())
    opt2.velocity = ckpt.velocity
    again = encode_checkpoint(ckpt.model, 7, opt2, ckpt.budget, ckpt.meta)
    assert again == path.read_bytes()


def test_gates_stored_continuous_f64(tmp_path):
    model = build_model(CFG)
    model.dgconv_layers()[0].gates.data = np.array([0.123456789012345, -3e-9, 2e-8])
    path = tmp_path / "a.dgcv"
    save_checkpoint(path, model)
    header, tensors = read_container(path)
    assert path.read_bytes()[:5] == MAGIC
    entry = next(e for e in header["tensors"] if e["name"] == "block0.mid.gates")
    assert entry["dtype"] == "f64"
    assert tensors["block0.mid.gates"][0] == 0.123456789012345
    assert not any("binary" in e["name"] for e in header["tensors"])
    assert all(e["dtype"] == "f32" for e in header["tensors"] if not e["name"].endswith(".gates"))


def test_loaded_model_reproduces_logits(tmp_path):
    model = build_model(CFG, seed=1)
    x = np.random.default_rng(0).normal(size=(2, 3, 8, 8)).astype(np.float32)
    save_checkpoint(tmp_path / "a.dgcv", model)
    assert np.array_equal(load_checkpoint(tmp_path / "a.dgcv").model.forward(x), model.forward(x))


@pytest.mark.parametrize("damage", ["magic", "body", "truncate", "header"])
def test_corruption_is_detected(tmp_path, damage):
    path = tmp_path / "a.dgcv"
    save_checkpoint(path, build_model(CFG))
    raw = bytearray(path.read_bytes())
    if damage == "magic":
        raw[0:5] = b"XXXXX"
    elif damage == "body":
        raw[-10] ^= 0xFF
    elif damage == "truncate":
        raw = raw[:-100]
    else:
        raw[20] = 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_compiled_export_round_trip_and_size(tmp_path):
    model = build_model(CFG, seed=3)
    model.dgconv_layers()[1].gates.data = np.array([-1e-8, 1e-8, -1e-8, 1e-8])
    save_checkpoint(tmp_path / "a.dgcv", model)
    compiled = compile_model(model)
    save_compiled(tmp_path / "m.dgcv", compiled, {"total": {}})
    loaded, header = load_compiled(tmp_path / "m.dgcv")
    x = np.random.default_rng(0).normal(size=(2, 3, 8, 8)).astype(np.float32)
    assert np.array_equal(loaded.forward(x), compiled.forward(x))
    assert header["kind"] == "compiled"
    assert (tmp_path / "m.dgcv").stat().st_size < (tmp_path / "a.dgcv").stat().st_size
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.dgcv")
    with pytest.raises(CheckpointError):
        load_compiled(tmp_path / "a.dgcv")
    assert load_any(tmp_path / "m.dgcv")[1]["kind"] == "compiled"


def test_saving_uncompiled_as_export_fails(tmp_path):
    with pytest.raises(CheckpointError):
        save_compiled(tmp_path / "m.dgcv", build_model(CFG))
