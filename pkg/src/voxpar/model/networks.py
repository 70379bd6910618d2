"""Network definitions: the scaled CosmoFlow family and a mini 3D U-Net.

A network is an ordered list of LayerSpec entries plus a loss. Layouts
(which ranks hold what, where redistribution happens) are *not* part of the
network: they are chosen per process grid by voxpar.model.engine.make_plan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from ..errors import UnsupportedWidth
from ..layers import ConvParams, chain_shapes

COSMOFLOW_WIDTHS = (32, 64, 128, 256, 512)
UNET_WIDTHS = (16, 32, 64)


@dataclass(frozen=True)
class LayerSpec:
    """One layer; unused fields stay at their zero values."""

    name: str
    kind: str  # conv|deconv|pool|bn|leaky|dropout|flatten|fc|concat
    params: ConvParams = None
    cin: int = 0
    cout: int = 0
    pool_kind: str = ""
    channels: int = 0
    slope: float = 0.0
    keep: float = 0.0
    fin: int = 0
    fout: int = 0
    skip: str = None  # concat: name of the layer whose output joins in


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    in_channels: int
    layers: tuple
    loss: str  # "mse" | "xent"
    out_dim: int  # mse: regression targets per sample; xent: classes

    def layer_index(self, name: str) -> int:
        for i, l in enumerate(self.layers):
            if l.name == name:
                return i
        raise KeyError(f"no layer named {name!r}")

    def validate(self, w_i: int):
        """Shape-chain check; raises if any layer cannot follow its input."""
        return chain_shapes(self, (1, self.in_channels, w_i, w_i, w_i))


def _conv_block(layers, name, cin, cout, stride, with_bn, slope):
    layers.append(LayerSpec(f"{name}", "conv",
                            params=ConvParams(cin, cout, (3, 3, 3), (stride,) * 3)))
    if with_bn:
        layers.append(LayerSpec(f"{name}_bn", "bn", channels=cout))
    layers.append(LayerSpec(f"{name}_act", "leaky", slope=slope))


def build_cosmoflow(w_i: int, with_bn: bool = False, pool: str = "average",
                    slope: float = 0.3) -> NetworkSpec:
    """Scaled CosmoFlow: 7 conv blocks (stride 2 at the 4th), pooling while
    the extent allows, fc 2048/256/4 with dropout, MSE head.

    Widths below 128 truncate the conv ladder once the extent reaches 2^3;
    128 and up keep all seven convs.
    """
    if w_i not in COSMOFLOW_WIDTHS:
        raise UnsupportedWidth(f"CosmoFlow width {w_i} not in {COSMOFLOW_WIDTHS}")
    chans = (16, 32, 64, 128, 256, 256, 256)
    layers = []
    e, cin = w_i, 4
    for i, cout in enumerate(chans):
        stride = 2 if i == 3 else 1
        _conv_block(layers, f"c{i + 1}", cin, cout, stride, with_bn, slope)
        e = -(-e // stride)
        if e >= 4:
            layers.append(LayerSpec(f"p{i + 1}", "pool", pool_kind=pool))
            e //= 2
        cin = cout
        if w_i < 128 and e <= 2:
            break
    flat = cin * e ** 3
    layers.append(LayerSpec("flatten", "flatten"))
    layers.append(LayerSpec("fc1", "fc", fin=flat, fout=2048))
    layers.append(LayerSpec("fc1_act", "leaky", slope=slope))
    layers.append(LayerSpec("fc1_drop", "dropout", keep=0.8))
    layers.append(LayerSpec("fc2", "fc", fin=2048, fout=256))
    layers.append(LayerSpec("fc2_act", "leaky", slope=slope))
    layers.append(LayerSpec("fc2_drop", "dropout", keep=0.8))
    layers.append(LayerSpec("fc3", "fc", fin=256, fout=4))
    layers.append(LayerSpec("fc3_drop", "dropout", keep=0.8))
    return NetworkSpec(f"cosmoflow{w_i}", 4, tuple(layers), "mse", 4)


def build_unet_mini(w_i: int, base: int = 8, pool: str = "max",
                    slope: float = 0.3) -> NetworkSpec:
    """Mini 3D U-Net: two down blocks, bottleneck, two up blocks with
    stride-2 deconvs and channel-concat skips, 2-class per-voxel head."""
    if w_i not in UNET_WIDTHS:
        raise UnsupportedWidth(f"U-Net width {w_i} not in {UNET_WIDTHS}")
    f = base
    layers = []

    def block(name, cin, cout):
        _conv_block(layers, name, cin, cout, 1, True, slope)

    block("e1c1", 1, f)
    block("e1c2", f, f)  # skip source: e1c2_act
    layers.append(LayerSpec("p1", "pool", pool_kind=pool))
    block("e2c1", f, 2 * f)
    block("e2c2", 2 * f, 2 * f)  # skip source: e2c2_act
    layers.append(LayerSpec("p2", "pool", pool_kind=pool))
    block("bc1", 2 * f, 4 * f)
    block("bc2", 4 * f, 4 * f)
    layers.append(LayerSpec("u2d", "deconv", cin=4 * f, cout=2 * f))
    layers.append(LayerSpec("u2cat", "concat", skip="e2c2_act"))
    block("u2c1", 4 * f, 2 * f)
    block("u2c2", 2 * f, 2 * f)
    layers.append(LayerSpec("u1d", "deconv", cin=2 * f, cout=f))
    layers.append(LayerSpec("u1cat", "concat", skip="e1c2_act"))
    block("u1c1", 2 * f, f)
    block("u1c2", f, f)
    layers.append(LayerSpec("head", "conv", params=ConvParams(f, 2, (1, 1, 1))))
    return NetworkSpec(f"unet{w_i}", 1, tuple(layers), "xent", 2)


def param_entries(net: NetworkSpec):
    """Ordered (name, shape, fan_in) for every trainable tensor.

    fan_in of 0 means "initialize to the kind's fixed value" (bn gamma one,
    bn beta and fc bias zero).
    """
    out = []
    for l in net.layers:
        if l.kind == "conv":
            p = l.params
            shape = (p.cout, p.cin) + tuple(p.kernel)
            out.append((f"{l.name}.w", shape, p.cin * math.prod(p.kernel)))
        elif l.kind == "deconv":
            out.append((f"{l.name}.w", (l.cin, l.cout, 2, 2, 2), l.cin * 8))
        elif l.kind == "bn":
            out.append((f"{l.name}.gamma", (l.channels,), 0))
            out.append((f"{l.name}.beta", (l.channels,), 0))
        elif l.kind == "fc":
            out.append((f"{l.name}.w", (l.fin, l.fout), l.fin))
            out.append((f"{l.name}.b", (l.fout,), 0))
    return out


def total_params(net: NetworkSpec) -> int:
    return sum(math.prod(shape) for _, shape, _ in param_entries(net))
