"""Lower trained DGConv layers to permute -> group convolution -> unpermute."""

import copy
from dataclasses import dataclass

import numpy as np

from . import gates as G
from . import tensor as T
from .errors import UnsupportedLayerError
from .layer import DGConv2d, effective_kernel
from .nn import Module


@dataclass(frozen=True, eq=False)
class CompiledLayer:
    """Immutable lowered layer.

    ``perm_in[j]`` is the original input channel fed to grouped input ``j``;
    ``perm_out[j]`` is the original output channel produced by grouped output ``j``.
    """

    perm_in: np.ndarray
    perm_out: np.ndarray
    kernels: np.ndarray  # (G, k, k, C_in/G, C_out/G)
    groups: int
    connections: int
    stride: int
    padding: int

    @property
    def in_channels(self):
        return self.perm_in.size

    @property
    def out_channels(self):
        return self.perm_out.size

    @property
    def spec(self):
        return T.GroupSpec(self.groups, self.in_channels, self.out_channels)

    @property
    def inverse_out(self):
        return np.argsort(self.perm_out)

    def parameter_count(self):
        return self.kernels.size

    def forward(self, x):
        y = T.group_conv_forward(x[:, self.perm_in], self.kernels, self.spec, self.stride, self.padding)
        return y[:, self.inverse_out]


def compile_layer(layer):
    if not isinstance(layer, DGConv2d):
        raise UnsupportedLayerError(f"cannot compile {type(layer).__name__}; only DGConv layers are lowered")
    g = layer.binary_gates()
    cin, cout = layer.in_channels, layer.out_channels
    perm_in, perm_out = G.expanded_permutations(g, cin, cout)
    groups = G.group_count(g)
    u = layer.relationship.mask[np.ix_(perm_in, perm_out)]
    if not G.is_block_diagonal(u, groups):
        raise UnsupportedLayerError(f"permuted relationship matrix of {cin}x{cout} layer is not block diagonal")
    w = effective_kernel(layer)[:, :, perm_in][:, :, :, perm_out]
    kernels = T.group_kernels(w, T.GroupSpec(groups, cin, cout))
    return CompiledLayer(
        perm_in=perm_in,
        perm_out=perm_out,
        kernels=np.ascontiguousarray(kernels),
        groups=groups,
        connections=G.layer_complexity(g, cin, cout),
        stride=layer.stride,
        padding=layer.padding,
    )


class CompiledConv2d(Module):
    """Inference-only network module wrapping a :class:`CompiledLayer`."""

    def __init__(self, compiled):
        super().__init__()
        self.compiled = compiled
        self.in_channels = compiled.in_channels
        self.out_channels = compiled.out_channels

    def forward(self, x, train=False):
        if train:
            raise UnsupportedLayerError("compiled layers are inference-only")
        return self.compiled.forward(x)

    def backward(self, dout):
        raise UnsupportedLayerError("compiled layers are inference-only")

    def group_count(self):
        return self.compiled.groups

    def complexity(self):
        return self.compiled.connections


def compile_model(model):
    """Copy of ``model`` with every DGConv middle layer replaced by its lowered form."""
    compiled = copy.deepcopy(model)
    for i, mid in enumerate(compiled.mid_layers()):
        if isinstance(mid, DGConv2d):
            try:
                lowered = compile_layer(mid)
            except UnsupportedLayerError as e:
                raise UnsupportedLayerError(f"block{i}.mid: {e}") from None
            compiled.replace_mid(i, CompiledConv2d(lowered))
    return compiled


def grouped_layers(model):
    """``(name, layer)`` for every DGConv or compiled middle layer, in network order."""
    return [
        (f"block{i}.mid", m)
        for i, m in enumerate(model.mid_layers())
        if isinstance(m, (DGConv2d, CompiledConv2d))
    ]


def savings_report(model, baseline_groups=32):
    """Connection counts and relative cost vs dense and vs a uniform-``G`` baseline."""
    layers = []
    for name, m in grouped_layers(model):
        cin, cout = m.in_channels, m.out_channels
        dense = cin * cout
        gb = min(baseline_groups, cin, cout)
        zeta = int(m.complexity())
        layers.append({
            "name": name,
            "in_channels": cin,
            "out_channels": cout,
            "groups": int(m.group_count()),
            "connections": zeta,
            "dense_connections": dense,
            "baseline_groups": gb,
            "baseline_connections": dense // gb,
            "ratio_vs_dense": zeta / dense,
            "ratio_vs_baseline": zeta / (dense // gb),
        })
    zeta = sum(l["connections"] for l in layers)
    dense = sum(l["dense_connections"] for l in layers)
    base = sum(l["baseline_connections"] for l in layers)
    return {
        "layers": layers,
        "total": {
            "connections": zeta,
            "dense_connections": dense,
            "baseline_connections": base,
            "ratio_vs_dense": zeta / dense if dense else 1.0,
            "ratio_vs_baseline": zeta / base if base else 1.0,
        },
    }
