"""Groupable ResNeXt-style networks built from bottleneck blocks.

Each bottleneck is ``1x1 -> 3x3 (mode) -> 1x1`` with batch norm and ReLU
after every convolution and a residual shortcut. Only the 3x3 middle layer
is grouped; it is a dense convolution, a fixed group convolution or a DGConv
layer depending on the block's mode.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import gates as G
from .errors import ConfigurationError
from .layer import DGConv2d
from .nn import BatchNorm2d, Conv2d, GlobalAvgPool, GroupConv2d, Linear, MaxPool2d, Module, ReLU


def parse_mode(mode):
    """``"dense"``, ``"dgconv"`` or ``"group:G"`` -> ``(kind, groups)``."""
    if mode in ("dense", "dgconv"):
        return mode, None
    if isinstance(mode, str) and mode.startswith("group:"):
        try:
            groups = int(mode.split(":", 1)[1])
        except ValueError:
            raise ConfigurationError(f"bad group count in mode {mode!r}") from None
        if groups < 1:
            raise ConfigurationError(f"group count must be positive in mode {mode!r}")
        return "group", groups
    raise ConfigurationError(f"unknown convolution mode {mode!r}")


@dataclass
class ModelConfig:
    widths: tuple = (16, 32, 64)
    blocks: tuple = (2, 2, 2)
    expansion: int = 2
    stem_width: int = 16
    stem_kernel: int = 3
    stem_stride: int = 1
    stem_pool: bool = False
    input_shape: tuple = (3, 32, 32)
    num_classes: int = 10
    # one mode for every block, or a list with one entry per block
    mode: object = "dgconv"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if isinstance(self.blocks, int):
            self.blocks = (self.blocks,) * len(self.widths)
        self.blocks = tuple(int(b) for b in self.blocks)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if not isinstance(self.mode, str):
            self.mode = list(self.mode)
        self.validate()

    @property
    def num_blocks(self):
        return sum(self.blocks)

    def block_modes(self):
        if isinstance(self.mode, str):
            return [self.mode] * self.num_blocks
        return list(self.mode)

    def validate(self):
        if len(self.blocks) != len(self.widths) or not self.widths:
            raise ConfigurationError("widths and blocks must have one entry per stage")
        if any(b < 1 for b in self.blocks) or any(w < 1 for w in self.widths):
            raise ConfigurationError("widths and blocks must be positive")
        modes = self.block_modes()
        if len(modes) != self.num_blocks:
            raise ConfigurationError(f"expected {self.num_blocks} block modes, got {len(modes)}")
        for (_, width), mode in zip(self.block_widths(), modes):
            kind, groups = parse_mode(mode)
            if kind == "dgconv" and not G.is_power_of_two(width):
                raise ConfigurationError(f"DGConv width must be a power of two, got {width}")
            if kind == "group" and width % groups:
                raise ConfigurationError(f"{groups} groups do not divide width {width}")

    def block_widths(self):
        """``(stage, width)`` for every block in network order."""
        return [(s, w) for s, (w, n) in enumerate(zip(self.widths, self.blocks)) for _ in range(n)]

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["blocks"] = list(self.blocks)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def resnext50_preset(mode="dgconv", num_classes=1000):
    """Full-size 224x224 Groupable-ResNeXt50 topology (construction only)."""
    return ModelConfig(
        widths=(128, 256, 512, 1024),
        blocks=(3, 4, 6, 3),
        expansion=2,
        stem_width=64,
        stem_kernel=7,
        stem_stride=2,
        stem_pool=True,
        input_shape=(3, 224, 224),
        num_classes=num_classes,
        mode=mode,
    )


def make_mid_layer(mode, width, stride, dtype):
    kind, groups = parse_mode(mode)
    if kind == "dense":
        return Conv2d(width, width, 3, stride, dtype=dtype)
    if kind == "group":
        return GroupConv2d(width, width, groups, 3, stride, dtype=dtype)
    return DGConv2d(width, width, 3, stride, dtype=dtype)


class Bottleneck(Module):
    def __init__(self, in_channels, width, out_channels, stride, mode, dtype=np.float32):
        super().__init__()
        self.conv1 = self.add("conv1", Conv2d(in_channels, width, 1, padding=0, dtype=dtype))
        self.bn1 = self.add("bn1", BatchNorm2d(width, dtype=dtype))
        self.relu1 = ReLU()
        self.mid = self.add("mid", make_mid_layer(mode, width, stride, dtype))
        self.bn2 = self.add("bn2", BatchNorm2d(width, dtype=dtype))
        self.relu2 = ReLU()
        self.conv3 = self.add("conv3", Conv2d(width, out_channels, 1, padding=0, dtype=dtype))
        self.bn3 = self.add("bn3", BatchNorm2d(out_channels, dtype=dtype))
        self.relu_out = ReLU()
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = self.add("shortcut", Conv2d(in_channels, out_channels, 1, stride, 0, dtype=dtype))
            self.shortcut_bn = self.add("shortcut_bn", BatchNorm2d(out_channels, dtype=dtype))
        self._main = [self.conv1, self.bn1, self.relu1, self.mid, self.bn2, self.relu2, self.conv3, self.bn3]

    def forward(self, x, train=False):
        h = x
        for m in self._main:
            h = m.forward(h, train)
        s = x
        if self.shortcut is not None:
            s = self.shortcut_bn.forward(self.shortcut.forward(x, train), train)
        return self.relu_out.forward(h + s, train)

    def backward(self, dout):
        d = self.relu_out.backward(dout)
        dh = d
        for m in reversed(self._main):
            dh = m.backward(dh)
        ds = d
        if self.shortcut is not None:
            ds = self.shortcut.backward(self.shortcut_bn.backward(d))
        return dh + ds


class GroupableNet(Module):
    def __init__(self, config, dtype=np.float32):
        super().__init__()
        self.config = config
        self.dtype = np.dtype(dtype)
        c = config
        self.stem = self.add("stem", Conv2d(c.input_shape[0], c.stem_width, c.stem_kernel, c.stem_stride, dtype=dtype))
        self.stem_bn = self.add("stem_bn", BatchNorm2d(c.stem_width, dtype=dtype))
        layers = [self.stem, self.stem_bn, ReLU()]
        if c.stem_pool:
            layers.append(MaxPool2d(3, 2, 1))
        self.blocks = []
        in_ch = c.stem_width
        modes = c.block_modes()
        for i, (stage, width) in enumerate(c.block_widths()):
            first_in_stage = i == 0 or c.block_widths()[i - 1][0] != stage
            stride = 2 if first_in_stage and stage > 0 else 1
            out_ch = width * c.expansion
            block = self.add(f"block{i}", Bottleneck(in_ch, width, out_ch, stride, modes[i], dtype))
            self.blocks.append(block)
            layers.append(block)
            in_ch = out_ch
        layers.append(GlobalAvgPool())
        self.fc = self.add("fc", Linear(in_ch, c.num_classes, dtype=dtype))
        layers.append(self.fc)
        self._sequence = layers

    def forward(self, x, train=False):
        h = x.astype(self.dtype, copy=False)
        for m in self._sequence:
            h = m.forward(h, train)
        return h

    def backward(self, dlogits):
        d = dlogits.astype(self.dtype, copy=False)
        for m in reversed(self._sequence):
            d = m.backward(d)
        return d

    def mid_layers(self):
        return [b.mid for b in self.blocks]

    def dgconv_layers(self):
        return [m for m in self.mid_layers() if isinstance(m, DGConv2d)]

    def dgconv_names(self):
        return [f"block{i}.mid" for i, b in enumerate(self.blocks) if isinstance(b.mid, DGConv2d)]

    def replace_mid(self, index, layer):
        block = self.blocks[index]
        block.mid = layer
        block.children["mid"] = layer
        block._main[3] = layer

    def parameter_count(self, include_gates=True):
        return sum(
            p.data.size for name, p in self.named_parameters() if include_gates or not name.endswith(".gates")
        )

    def gate_parameter_count(self):
        return sum(l.num_gates for l in self.dgconv_layers())


def analytic_parameter_count(config):
    """Parameter total implied by ``config`` (gates included), from closed forms."""
    c = config
    total = c.stem_kernel**2 * c.input_shape[0] * c.stem_width + 2 * c.stem_width
    in_ch = c.stem_width
    prev_stage = None
    for (stage, w), mode in zip(c.block_widths(), c.block_modes()):
        out = w * c.expansion
        stride = 2 if stage != prev_stage and stage > 0 else 1
        prev_stage = stage
        kind, groups = parse_mode(mode)
        mid = 9 * w * w
        if kind == "group":
            mid //= groups
        elif kind == "dgconv":
            mid += w.bit_length() - 1
        total += in_ch * w + 2 * w + mid + 2 * w + w * out + 2 * out
        if stride != 1 or in_ch != out:
            total += in_ch * out + 2 * out
        in_ch = out
    return total + in_ch * c.num_classes + c.num_classes


def build_model(config=None, seed=0, dtype=np.float32):
    """Construct and initialize a network (He-normal kernels, gates at +-1e-8)."""
    from .trainer import init_gates, init_weights

    config = config or ModelConfig()
    net = GroupableNet(config, dtype=dtype)
    init_weights(net, seed)
    init_gates(net.dgconv_layers(), seed)
    return net
