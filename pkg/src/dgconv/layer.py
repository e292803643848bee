"""Dynamic grouping convolution: a convolution whose kernel is masked by ``U(g)``.

The binary gates come from the continuous gates by sign; their gradient is
passed straight through (``d g / d tilde_g := 1``). The task gradient for
gate ``k`` is obtained by differentiating the relaxed construction
``U(g) = kron_k (g_k J + (1 - g_k) I)`` at the current binary point.
"""

from dataclasses import dataclass

import numpy as np

from . import gates as G
from . import tensor as T
from .errors import DimensionError
from .nn import Module, Parameter


@dataclass
class GateGradient:
    """Gradient w.r.t. the continuous gates, split by origin for logging."""

    task: np.ndarray
    penalty: np.ndarray

    @property
    def total(self):
        return self.task + self.penalty


class DGConv2d(Module):
    """A DGConv layer: kernel ``(k, k, C_in, C_out)`` plus ``log2(min(C_in, C_out))`` gates."""

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=None, dtype=np.float32):
        super().__init__()
        k = G.gate_count(in_channels, out_channels)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride = kernel_size, stride
        self.padding = T.resolve_padding(kernel_size, padding)
        shape = (kernel_size, kernel_size, in_channels, out_channels)
        self.params["weight"] = Parameter(np.zeros(shape, dtype=dtype))
        self.params["gates"] = Parameter(np.zeros(k, dtype=np.float64), decay=False)
        self.gate_grad = None
        self._u = None
        self._cache = None

    @property
    def weight(self):
        return self.params["weight"]

    @property
    def gates(self):
        return self.params["gates"]

    @property
    def num_gates(self):
        return self.gates.data.size

    def fan_in(self):
        return self.kernel_size * self.kernel_size * self.in_channels

    def binary_gates(self):
        return G.binarize(self.gates.data)

    @property
    def relationship(self):
        """Cached ``U``; rebuilt only when some gate changed sign."""
        g = self.binary_gates()
        if self._u is None or self._u.gates != tuple(int(b) for b in g):
            self._u = G.build_relationship_matrix(g, self.in_channels, self.out_channels)
        return self._u

    def group_count(self):
        return G.group_count(self.binary_gates())

    def complexity(self):
        return G.layer_complexity(self.binary_gates(), self.in_channels, self.out_channels)

    def forward(self, x, train=False):
        if not train:
            return dgconv_forward(self, x)
        out, cols = dgconv_forward(self, x, return_cols=True)
        self._cache = (x, cols)
        return out

    def backward(self, dout):
        x, cols = self._cache
        self._cache = None
        dx, dw, gate_grad = dgconv_backward(self, x, dout, cols=cols)
        self.weight.grad = dw
        self.gate_grad = gate_grad
        self.gates.grad = gate_grad.task.copy()
        return dx


def effective_kernel(layer):
    """``U * w`` applied to every spatial tap."""
    mask = layer.relationship.mask
    return np.where(mask, layer.weight.data, 0).astype(layer.weight.data.dtype)


def dgconv_forward(layer, x, return_cols=False):
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise DimensionError(f"input shape {x.shape} does not match {layer.in_channels} input channels")
    return T.conv2d_forward(x, effective_kernel(layer), layer.stride, layer.padding, return_cols=return_cols)


def dgconv_backward(layer, x, upstream, cols=None):
    """Returns ``(grad_input, grad_kernel, GateGradient)``.

    The gate gradient holds only the task part; the complexity penalty is
    added by the objective.
    """
    mask = layer.relationship.mask
    w = layer.weight.data
    w_eff = np.where(mask, w, 0).astype(w.dtype)
    grad_input, grad_plain = T.conv2d_backward(x, w_eff, upstream, layer.stride, layer.padding, cols=cols)
    grad_kernel = np.where(mask, grad_plain, 0).astype(grad_plain.dtype)
    # dL/dU_ij = sum over taps of dL/d(U*w)_ij * w_ij
    du = np.einsum("mnij,mnij->ij", grad_plain.astype(np.float64), w.astype(np.float64))
    g = layer.binary_gates()
    task = np.array(
        [np.vdot(du, G.du_dgk(g, k, layer.in_channels, layer.out_channels)) for k in range(g.size)],
        dtype=np.float64,
    )
    return grad_input, grad_kernel, GateGradient(task=task, penalty=np.zeros_like(task))
