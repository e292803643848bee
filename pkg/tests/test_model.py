import numpy as np
import pytest

from dgconv.errors import ConfigurationError
from dgconv.gradcheck import rel_error
from dgconv.layer import DGConv2d
from dgconv.model import (
    GroupableNet,
    ModelConfig,
    analytic_parameter_count,
    build_model,
    parse_mode,
    resnext50_preset,
)
from dgconv.nn import Conv2d, GroupConv2d
from dgconv.tensor import softmax_xent


def test_parse_mode():
    assert parse_mode("dense") == ("dense", None)
    assert parse_mode("dgconv") == ("dgconv", None)
    assert parse_mode("group:4") == ("group", 4)
    for bad in ("group:x", "group:0", "sparse"):
        with pytest.raises(ConfigurationError):
            parse_mode(bad)


def test_default_desk_model_shape():
    model = build_model()
    assert len(model.dgconv_layers()) == 6
    assert [l.in_channels for l in model.dgconv_layers()] == [16, 16, 32, 32, 64, 64]
    assert model.gate_parameter_count() == 30
    assert model.parameter_count() == analytic_parameter_count(model.config)
    y = model.forward(np.zeros((2, 3, 32, 32), np.float32))
    assert y.shape == (2, 10)


@pytest.mark.parametrize("mode", ["dense", "group:4", ["dgconv", "dense", "group:2"]])
def test_parameter_count_closed_form(mode):
    cfg = ModelConfig(widths=(8, 16, 32), blocks=1, mode=mode)
    net = GroupableNet(cfg)
    assert net.parameter_count() == analytic_parameter_count(cfg)


def test_mid_layer_types():
    net = GroupableNet(ModelConfig(widths=(8, 16, 32), blocks=1, mode=["dgconv", "dense", "group:2"]))
    kinds = [type(m) for m in net.mid_layers()]
    assert kinds == [DGConv2d, Conv2d, GroupConv2d]


def test_invalid_configs():
    with pytest.raises(ConfigurationError):
        ModelConfig(widths=(12,), blocks=1)  # DGConv needs a power of two
    with pytest.raises(ConfigurationError):
        ModelConfig(widths=(8, 16), blocks=(1,))
    with pytest.raises(ConfigurationError):
        ModelConfig(widths=(8,), blocks=1, mode="group:3")


def test_config_round_trip():
    cfg = ModelConfig(widths=(8, 16), blocks=(1, 2), mode=["dgconv", "dense", "group:2"])
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_resnext50_preset_topology():
    cfg = resnext50_preset()
    assert cfg.num_blocks == 16
    assert analytic_parameter_count(cfg) > 20_000_000


def test_network_gradient_finite_difference():
    rng = np.random.default_rng(0)
    cfg = ModelConfig(widths=(4, 8), blocks=1, stem_width=4, input_shape=(3, 6, 6), num_classes=3)
    net = build_model(cfg, seed=1, dtype=np.float64)
    x = rng.normal(size=(4, 3, 6, 6))
    y = np.array([0, 1, 2, 1])

    def loss():
        return softmax_xent(net.forward(x, train=True), y)[0]

    logits = net.forward(x, train=True)
    _, d = softmax_xent(logits, y)
    net.backward(d)
    for name, p in net.named_parameters():
        if name.endswith(".gates"):
            continue
        idx = tuple(rng.integers(0, s) for s in p.shape)
        old = p.data[idx]
        p.data[idx] = old + 1e-6
        fp = loss()
        p.data[idx] = old - 1e-6
        fm = loss()
        p.data[idx] = old
        fd = (fp - fm) / 2e-6
        assert rel_error(p.grad[idx], fd) <= 1e-4 or abs(p.grad[idx] - fd) <= 1e-8, name


def test_build_model_is_deterministic():
    a, b = build_model(seed=3), build_model(seed=3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    gates = np.concatenate([l.gates.data for l in a.dgconv_layers()])
    assert set(np.abs(gates).tolist()) == {1e-8}


def test_one_block_per_stage_gate_total():
    net = GroupableNet(ModelConfig(widths=(16, 32, 64), blocks=1))
    assert net.gate_parameter_count() == 4 + 5 + 6


def test_all_positive_gates_equal_dense_mode():
    cfg = ModelConfig(widths=(8, 16), blocks=1, stem_width=8, input_shape=(3, 8, 8))
    dg = build_model(cfg, seed=0)
    for l in dg.dgconv_layers():
        l.gates.data[:] = 0.3
    dense = GroupableNet(ModelConfig(**{**cfg.to_dict(), "mode": "dense"}))
    state = {k: v for k, v in dg.state_dict().items() if not k.endswith(".gates")}
    dense.load_state_dict(state)
    x = np.random.default_rng(0).normal(size=(2, 3, 8, 8)).astype(np.float32)
    assert rel_error(dense.forward(x), dg.forward(x)) <= 1e-5
