"""Connection-count complexity and the weighted-product budget penalty.

The training objective is ``task_loss * (o / zeta) ** a`` where ``zeta`` is
the number of active connections over all DGConv layers, ``o`` the budget and
``a`` is 0 while ``zeta <= o`` and ``alpha`` (negative) otherwise. ``a`` is
picked from the current step's ``zeta`` and treated as a constant.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import gates as G
from .errors import ConfigurationError

DEFAULT_ALPHA = -0.02


def budget_from_b(b, channels):
    """Target complexity ``o = sum(C_l ** 2) / b``.

    ``channels`` holds ints for square layers or ``(C_in, C_out)`` pairs.
    """
    if not b > 0:
        raise ConfigurationError(f"complexity scale b must be positive, got {b}")
    return sum(_dense_connections(c) for c in channels) / b


def _dense_connections(c):
    if isinstance(c, tuple):
        return c[0] * c[1]
    return c * c


@dataclass
class ComplexityBudget:
    b: float
    channels: list
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not self.alpha < 0:
            raise ConfigurationError(f"penalty exponent alpha must be negative, got {self.alpha}")
        if not self.b > 0:
            raise ConfigurationError(f"complexity scale b must be positive, got {self.b}")

    @property
    def o(self):
        return budget_from_b(self.b, self.channels)

    @property
    def dense_connections(self):
        return sum(_dense_connections(c) for c in self.channels)

    @classmethod
    def for_layers(cls, layers, b, alpha=DEFAULT_ALPHA):
        return cls(b=b, channels=[layer_channels(l) for l in layers], alpha=alpha)


def layer_channels(layer):
    if layer.in_channels == layer.out_channels:
        return layer.in_channels
    return (layer.in_channels, layer.out_channels)


@dataclass
class ComplexityState:
    layer_zetas: list
    gates: list = field(repr=False)
    o: float = math.inf
    alpha: float = DEFAULT_ALPHA

    @property
    def zeta(self):
        return sum(self.layer_zetas)

    @property
    def exponent(self):
        return 0.0 if self.zeta <= self.o else self.alpha

    @property
    def satisfied(self):
        return self.zeta <= self.o

    @property
    def multiplier(self):
        a = self.exponent
        if a == 0.0:
            return 1.0
        return math.exp(a * (math.log(self.o) - math.log(self.zeta)))


def network_complexity(layers, o=math.inf, alpha=DEFAULT_ALPHA):
    """Per-layer and total complexity of a list of DGConv layers."""
    gates = [l.binary_gates() for l in layers]
    zetas = [G.layer_complexity(g, l.in_channels, l.out_channels) for g, l in zip(gates, layers)]
    return ComplexityState(layer_zetas=zetas, gates=gates, o=o, alpha=alpha)


def penalized_loss(task_loss, state):
    """Return ``(total, d_total/d_task, penalty_grads)``.

    ``penalty_grads[l][k]`` is the derivative of ``total`` w.r.t. the binary
    gate ``g_k`` of layer ``l`` through ``zeta`` with the exponent held fixed:
    ``total * (-a) * zeta_l / (zeta * (1 + g_k))``. Under the straight-through
    estimator it is also the gradient w.r.t. the continuous gate.
    """
    zeta = state.zeta
    if zeta <= 0:
        raise ValueError("network complexity must be positive")
    mult = state.multiplier
    total = task_loss * mult
    a = state.exponent
    grads = []
    for zl, g in zip(state.layer_zetas, state.gates):
        if a == 0.0 or total == 0.0:
            grads.append(np.zeros(len(g)))
            continue
        # d log(total) / d g_k = -a * d log(zeta) / d g_k
        dlog = -a * math.exp(math.log(zl) - math.log(zeta)) / (1.0 + np.asarray(g, dtype=np.float64))
        grads.append(total * dlog)
    return total, mult, grads
