"""Stateful layer wrappers around the functional primitives in :mod:`dgconv.tensor`.

Each layer caches what its backward pass needs during a training-mode
forward call; ``backward`` consumes the cache, stores parameter gradients on
the :class:`Parameter` objects and returns the gradient w.r.t. its input.
"""

import numpy as np

from . import tensor as T


class Parameter:
    """A trainable array plus its latest gradient.

    ``decay`` controls whether the optimizer applies weight decay to it.
    """

    def __init__(self, data, decay=True):
        self.data = data
        self.grad = None
        self.decay = decay

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Parameter(shape={self.data.shape}, dtype={self.data.dtype}, decay={self.decay})"


class Module:
    def __init__(self):
        self.params = {}
        self.buffers = {}
        self.children = {}

    def add(self, name, module):
        self.children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, p in self.params.items():
            yield prefix + name, p
        for name, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for name, b in self.buffers.items():
            yield prefix + name, b
        for name, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for child in self.children.values():
            yield from child.modules()

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.data.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.data.shape}")
            p.data = value.astype(p.data.dtype).copy()
        for name, b in bufs.items():
            b[...] = state[name]

    def __call__(self, x, train=False):
        return self.forward(x, train)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=None, dtype=np.float32):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride = kernel_size, stride
        self.padding = T.resolve_padding(kernel_size, padding)
        shape = (kernel_size, kernel_size, in_channels, out_channels)
        self.params["weight"] = Parameter(np.zeros(shape, dtype=dtype))
        self._cache = None

    @property
    def weight(self):
        return self.params["weight"]

    def fan_in(self):
        return self.kernel_size * self.kernel_size * self.in_channels

    def forward(self, x, train=False):
        if not train:
            return T.conv2d_forward(x, self.weight.data, self.stride, self.padding)
        out, cols = T.conv2d_forward(x, self.weight.data, self.stride, self.padding, return_cols=True)
        self._cache = (x, cols)
        return out

    def backward(self, dout):
        x, cols = self._cache
        self._cache = None
        dx, dw = T.conv2d_backward(x, self.weight.data, dout, self.stride, self.padding, cols=cols)
        self.weight.grad = dw
        return dx


class GroupConv2d(Module):
    """Fixed group convolution with contiguous groups; weight is ``(G, k, k, C_in/G, C_out/G)``."""

    def __init__(self, in_channels, out_channels, groups, kernel_size=3, stride=1, padding=None, dtype=np.float32):
        super().__init__()
        self.spec = T.GroupSpec(groups, in_channels, out_channels)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride = kernel_size, stride
        self.padding = T.resolve_padding(kernel_size, padding)
        shape = (groups, kernel_size, kernel_size, self.spec.in_per_group, self.spec.out_per_group)
        self.params["weight"] = Parameter(np.zeros(shape, dtype=dtype))
        self._cache = None

    @property
    def weight(self):
        return self.params["weight"]

    def fan_in(self):
        return self.kernel_size * self.kernel_size * self.spec.in_per_group

    def forward(self, x, train=False):
        w = self.weight.data
        if not train:
            return T.group_conv_forward(x, w, self.spec, self.stride, self.padding)
        out, cols = T.group_conv_forward(x, w, self.spec, self.stride, self.padding, return_cols=True)
        self._cache = (x, cols)
        return out

    def backward(self, dout):
        x, cols = self._cache
        self._cache = None
        dx, dw = T.group_conv_backward(x, self.weight.data, dout, self.spec, self.stride, self.padding, cols=cols)
        self.weight.grad = dw
        return dx


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = Parameter(np.ones(channels, dtype=dtype))
        self.params["beta"] = Parameter(np.zeros(channels, dtype=dtype), decay=False)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self._cache = None

    def forward(self, x, train=False):
        out, cache = T.batchnorm_forward(
            x,
            self.params["gamma"].data,
            self.params["beta"].data,
            self.buffers["running_mean"],
            self.buffers["running_var"],
            train=train,
            momentum=self.momentum,
            eps=self.eps,
        )
        if train:
            self._cache = cache
        return out

    def backward(self, dout):
        dx, dgamma, dbeta = T.batchnorm_backward(dout, self._cache)
        self._cache = None
        self.params["gamma"].grad = dgamma
        self.params["beta"].grad = dbeta
        return dx


class ReLU(Module):
    def forward(self, x, train=False):
        out, cache = T.relu_forward(x)
        if train:
            self._cache = cache
        return out

    def backward(self, dout):
        return T.relu_backward(dout, self._cache)


class MaxPool2d(Module):
    def __init__(self, kernel_size=3, stride=2, padding=1):
        super().__init__()
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding

    def forward(self, x, train=False):
        out, cache = T.maxpool_forward(x, self.kernel_size, self.stride, self.padding)
        if train:
            self._cache = cache
        return out

    def backward(self, dout):
        return T.maxpool_backward(dout, self._cache)


class GlobalAvgPool(Module):
    def forward(self, x, train=False):
        out, cache = T.avgpool_forward(x)
        if train:
            self._cache = cache
        return out

    def backward(self, dout):
        return T.avgpool_backward(dout, self._cache)


class Linear(Module):
    def __init__(self, in_features, out_features, dtype=np.float32):
        super().__init__()
        self.params["weight"] = Parameter(np.zeros((in_features, out_features), dtype=dtype))
        self.params["bias"] = Parameter(np.zeros(out_features, dtype=dtype), decay=False)

    def forward(self, x, train=False):
        out, cache = T.linear_forward(x, self.params["weight"].data, self.params["bias"].data)
        if train:
            self._cache = cache
        return out

    def backward(self, dout):
        dx, dw, db = T.linear_backward(dout, self._cache)
        self.params["weight"].grad = dw
        self.params["bias"].grad = db
        return dx
