"""Shape propagation, flop counting, and activation-memory estimates.

Layer objects are duck-typed: anything with a ``kind`` attribute and the
per-kind fields used below (see voxpar.model.networks.LayerSpec) works.
Shapes are plain tuples: (n, c, d, h, w) for voxel tensors, (n, f) after
flatten.
"""

from __future__ import annotations

import math

from ..errors import NonDivisible, ShapeMismatch

# layer outputs that stay resident for the backward pass; dropout
# and flatten reuse their input buffer and are not charged
_COUNTED = {"conv", "deconv", "pool", "bn", "leaky", "fc", "concat"}


def out_shape(layer, in_shape, skip_shape=None):
    """Output shape of one layer given its input shape(s)."""
    kind = layer.kind
    if kind == "conv":
        n, c, d, h, w = in_shape
        p = layer.params
        if c != p.cin:
            raise ShapeMismatch(f"{layer.name}: input channels {c} != cin {p.cin}")
        sd, sh, sw = p.stride
        return (n, p.cout, -(-d // sd), -(-h // sh), -(-w // sw))
    if kind == "deconv":
        n, c, d, h, w = in_shape
        if c != layer.cin:
            raise ShapeMismatch(f"{layer.name}: input channels {c} != cin {layer.cin}")
        return (n, layer.cout, 2 * d, 2 * h, 2 * w)
    if kind == "pool":
        n, c, d, h, w = in_shape
        if d % 2 or h % 2 or w % 2:
            raise NonDivisible(f"{layer.name}: pool needs even extents, got {(d, h, w)}")
        return (n, c, d // 2, h // 2, w // 2)
    if kind in ("bn", "leaky", "dropout"):
        return in_shape
    if kind == "flatten":
        n = in_shape[0]
        return (n, math.prod(in_shape[1:]))
    if kind == "fc":
        n, f = in_shape
        if f != layer.fin:
            raise ShapeMismatch(f"{layer.name}: input features {f} != fin {layer.fin}")
        return (n, layer.fout)
    if kind == "concat":
        if skip_shape is None:
            raise ShapeMismatch(f"{layer.name}: concat needs a skip shape")
        if in_shape[0] != skip_shape[0] or in_shape[2:] != skip_shape[2:]:
            raise ShapeMismatch(f"{layer.name}: concat {in_shape} vs {skip_shape}")
        return (in_shape[0], in_shape[1] + skip_shape[1]) + tuple(in_shape[2:])
    raise ShapeMismatch(f"unknown layer kind {kind!r}")


def param_count(layer) -> int:
    kind = layer.kind
    if kind == "conv":
        p = layer.params
        return p.cout * p.cin * math.prod(p.kernel)
    if kind == "deconv":
        return layer.cin * layer.cout * 8
    if kind == "bn":
        return 2 * layer.channels
    if kind == "fc":
        return layer.fin * layer.fout + layer.fout
    return 0


def flop_count(layer, in_shape) -> int:
    """Forward arithmetic operations for one layer on the given input.

    Convolution counts 2 (multiply + add) per kernel tap per output value;
    backward-data and backward-filter each cost the same again, so total
    conv ops are 3x this number.
    """
    kind = layer.kind
    if kind in ("conv", "deconv", "fc", "pool"):
        shape = out_shape(layer, in_shape)
    if kind == "conv":
        p = layer.params
        return 2 * math.prod(p.kernel) * p.cin * p.cout * math.prod(shape[2:]) * shape[0]
    if kind == "deconv":
        # kernel equals stride: one tap per output value
        return 2 * layer.cin * layer.cout * math.prod(shape[2:]) * shape[0]
    if kind == "fc":
        return 2 * layer.fin * layer.fout * shape[0]
    if kind == "pool":
        return 8 * math.prod(shape)
    if kind == "bn":
        return 4 * math.prod(in_shape)
    if kind in ("leaky", "dropout"):
        return math.prod(in_shape)
    return 0


def walk_shapes(net, in_shape):
    """Yields (layer, in_shape, out_shape) through the graph in order."""
    shapes = {None: tuple(in_shape)}
    cur = tuple(in_shape)
    for layer in net.layers:
        skip = shapes.get(layer.skip) if layer.kind == "concat" else None
        if layer.kind == "concat" and skip is None:
            raise ShapeMismatch(f"{layer.name}: unknown skip source {layer.skip!r}")
        nxt = out_shape(layer, cur, skip_shape=skip)
        yield layer, cur, nxt
        shapes[layer.name] = nxt
        cur = nxt


def chain_shapes(net, in_shape):
    """Maps layer name -> output shape, validating the whole chain."""
    return {layer.name: o for layer, _, o in walk_shapes(net, in_shape)}


def network_flops(net, in_shape):
    """Per-layer and aggregate forward flops.

    Returns (per_layer: dict name->flops, conv_forward_total, conv_total_ops)
    where conv_total_ops counts forward + backward-data + backward-filter
    for conv layers only.
    """
    per = {}
    conv_fwd = 0
    for layer, src, _ in walk_shapes(net, in_shape):
        f = flop_count(layer, src)
        per[layer.name] = f
        if layer.kind == "conv":
            conv_fwd += f
    return per, conv_fwd, 3 * conv_fwd


def memory_estimate(net, w_i: int) -> int:
    """Activation bytes per sample: fp32 value + same-size gradient buffer.

    Charges the input tensor and every counted layer output (conv, deconv,
    pool, bn, activation, fc, concat) at 8 bytes per element.
    """
    in_shape = (1, net.in_channels, w_i, w_i, w_i)
    elements = math.prod(in_shape)
    for layer, _, shape in walk_shapes(net, in_shape):
        if layer.kind in _COUNTED:
            elements += math.prod(shape)
    return elements * 8
