import math

import numpy as np
import pytest

from conftest import make_layer
from dgconv import complexity as Z
from dgconv import gates as G
from dgconv.errors import ConfigurationError


def test_budget_from_b():
    assert Z.budget_from_b(2, [8, 16]) == (64 + 256) / 2
    assert Z.budget_from_b(1, [(4, 8)]) == 32
    with pytest.raises(ConfigurationError):
        Z.budget_from_b(0, [8])
    with pytest.raises(ConfigurationError):
        Z.ComplexityBudget(2, [8], alpha=0.1)


def test_network_complexity_sums_layers(rng):
    layers = [make_layer([0, 1, 0], rng), make_layer([1, 1], rng)]
    state = Z.network_complexity(layers, o=100.0)
    assert state.layer_zetas == [16, 16]
    assert state.zeta == 32 and state.satisfied and state.multiplier == 1.0


@pytest.mark.parametrize("zeta,o", [(150, 100.0), (400, 100.0), (101, 100.0)])
def test_multiplier_above_budget(zeta, o):
    state = Z.ComplexityState([zeta], [np.ones(2, np.uint8)], o=o)
    assert state.exponent == Z.DEFAULT_ALPHA
    assert state.multiplier == pytest.approx((o / zeta) ** -0.02, rel=1e-12)
    assert not state.satisfied


def test_penalty_gradient_matches_log_derivative():
    # d total / d g_k = total * (-a) * zeta_l / (zeta * (1 + g_k)), checked by perturbing zeta
    gates = [np.array([1, 0, 1], np.uint8), np.array([1, 1], np.uint8)]
    zetas = [8 * 4, 4 * 4]
    state = Z.ComplexityState(zetas, gates, o=20.0)
    total, mult, grads = Z.penalized_loss(2.0, state)
    assert total == pytest.approx(2.0 * mult)
    zeta = sum(zetas)
    for l, (g, zl) in enumerate(zip(gates, zetas)):
        for k in range(g.size):
            expected = total * 0.02 * zl / (zeta * (1 + g[k]))
            assert grads[l][k] == pytest.approx(expected, rel=1e-12)
    # analytic derivative of total w.r.t. zeta, times d zeta / d g (relaxed)
    dtotal_dzeta = 2.0 * 0.02 * mult / zeta
    assert grads[0][1] == pytest.approx(dtotal_dzeta * zetas[0] / 1, rel=1e-12)


def test_no_penalty_gradient_within_budget():
    state = Z.ComplexityState([16], [np.array([1, 1], np.uint8)], o=math.inf)
    total, mult, grads = Z.penalized_loss(1.5, state)
    assert total == 1.5 and mult == 1.0
    assert not np.any(grads[0])


def test_two_depthwise_layers(rng):
    layers = [make_layer([0, 0, 0], rng), make_layer([0, 0, 0], rng)]
    assert Z.network_complexity(layers).zeta == 16


def test_complexity_monotone_in_every_gate():
    for bits in range(1 << 4):
        g = np.array([(bits >> i) & 1 for i in range(4)], np.uint8)
        for k in np.flatnonzero(g == 0):
            up = g.copy()
            up[k] = 1
            assert G.layer_complexity(up, 16) == 2 * G.layer_complexity(g, 16)
