"""Serial (single-process) network execution: the training oracle.

This path never touches DistTensor or the fabric; it exists so distributed
runs have an independent target to match. Dropout masks are keyed by
(seed, epoch, iteration, sample id, layer index), the same policy the
distributed engine uses, so fp64 trajectories are directly comparable.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch
from ..layers import reference as ref
from .networks import NetworkSpec
from .optim import OptimizerState, optimizer_step


def make_bn_states(net: NetworkSpec, params: dict, dtype=np.float64) -> dict:
    """BNState per bn layer, gamma/beta aliased to the optimizer's arrays."""
    states = {}
    for l in net.layers:
        if l.kind == "bn":
            states[l.name] = ref.BNState(
                gamma=params[f"{l.name}.gamma"],
                beta=params[f"{l.name}.beta"],
                running_mean=np.zeros(l.channels, dtype=dtype),
                running_var=np.ones(l.channels, dtype=dtype),
            )
    return states


def _mask_rows(layer_idx: int, step_key, sample_ids, features: int, keep: float):
    seed, epoch, it = step_key
    rows = [
        ref.dropout_mask([seed, epoch, it, int(sid), layer_idx], features, keep)
        for sid in sample_ids
    ]
    return np.stack(rows) if rows else np.zeros((0, features), dtype=bool)


def forward(net: NetworkSpec, params: dict, states: dict, x: np.ndarray,
            mode: str, step_key=(0, 0, 0), sample_ids=(), trace: dict = None):
    """Runs the network; returns (pred, stash) where stash feeds backward.

    A trace dict, when given, receives ("fwd", layer name) -> layer output.
    """
    cur = x
    outputs = {}
    stash = []
    for idx, l in enumerate(net.layers):
        if l.kind == "conv":
            stash.append(cur)
            cur = ref.conv3d_ref(cur, params[f"{l.name}.w"], l.params)
        elif l.kind == "deconv":
            stash.append(cur)
            cur = ref.deconv3d_ref(cur, params[f"{l.name}.w"])
        elif l.kind == "pool":
            stash.append(cur)
            cur = ref.pool3d_ref(cur, l.pool_kind)
        elif l.kind == "bn":
            cur, cache = ref.batchnorm_fwd_ref(cur, states[l.name], mode)
            stash.append(cache)
        elif l.kind == "leaky":
            stash.append(cur)
            cur = ref.leaky_relu(cur, l.slope)
        elif l.kind == "dropout":
            if mode == "train":
                masks = _mask_rows(idx, step_key, sample_ids, cur.shape[1], l.keep)
                cur = ref.dropout_apply(cur, masks, l.keep)
                stash.append(masks)
            else:
                stash.append(None)
        elif l.kind == "flatten":
            stash.append(cur.shape)
            cur = cur.reshape(cur.shape[0], -1)
        elif l.kind == "fc":
            stash.append(cur)
            cur = ref.fully_connected(cur, params[f"{l.name}.w"], params[f"{l.name}.b"])
        elif l.kind == "concat":
            skip = outputs[l.skip]
            stash.append((cur.shape[1], skip.shape[1]))
            cur = ref.concat_channels(cur, skip)
        else:
            raise ShapeMismatch(f"unknown layer kind {l.kind!r}")
        outputs[l.name] = cur
        if trace is not None:
            trace[("fwd", l.name)] = cur
    return cur, stash


def loss_and_grad(net: NetworkSpec, pred: np.ndarray, target: np.ndarray):
    if net.loss == "mse":
        return ref.mse_loss(pred, target)
    if net.loss == "xent":
        return ref.cross_entropy_ref(pred, target)
    raise ShapeMismatch(f"unknown loss {net.loss!r}")


def backward(net: NetworkSpec, params: dict, states: dict, stash: list,
             dpred: np.ndarray, trace: dict = None) -> dict:
    """Gradients of the batch-mean loss for every parameter.

    A trace dict, when given, receives ("bwd", layer name) -> the gradient
    w.r.t. that layer's input.
    """
    grads = {}
    u = dpred
    extra = {}  # layer name -> pending output gradient from a skip consumer
    for idx in range(len(net.layers) - 1, -1, -1):
        l = net.layers[idx]
        if l.name in extra:
            u = u + extra.pop(l.name)
        kept = stash[idx]
        if l.kind == "conv":
            w = params[f"{l.name}.w"]
            grads[f"{l.name}.w"] = ref.conv3d_bwd_filter_ref(kept, u, l.params)
            u = ref.conv3d_bwd_data_ref(u, w, l.params, kept.shape[2:])
        elif l.kind == "deconv":
            w = params[f"{l.name}.w"]
            grads[f"{l.name}.w"] = ref.deconv3d_bwd_filter_ref(kept, u)
            u = ref.deconv3d_bwd_data_ref(u, w)
        elif l.kind == "pool":
            u = ref.pool3d_bwd_ref(kept, u, l.pool_kind)
        elif l.kind == "bn":
            u, dgamma, dbeta = ref.batchnorm_bwd_ref(u, states[l.name], kept)
            grads[f"{l.name}.gamma"] = dgamma
            grads[f"{l.name}.beta"] = dbeta
        elif l.kind == "leaky":
            u = ref.leaky_relu_bwd(kept, u, l.slope)
        elif l.kind == "dropout":
            if kept is not None:
                u = ref.dropout_apply(u, kept, l.keep)
        elif l.kind == "flatten":
            u = u.reshape(kept)
        elif l.kind == "fc":
            w = params[f"{l.name}.w"]
            u, dw, db = ref.fully_connected_bwd(kept, w, u)
            grads[f"{l.name}.w"] = dw
            grads[f"{l.name}.b"] = db
        elif l.kind == "concat":
            c_main, _ = kept
            g_skip = u[:, c_main:]
            extra[l.skip] = extra.get(l.skip, 0) + g_skip
            u = u[:, :c_main]
        if trace is not None:
            trace[("bwd", l.name)] = u
    if extra:
        raise ShapeMismatch(f"unconsumed skip gradients: {sorted(extra)}")
    return grads


def train_step(net: NetworkSpec, params: dict, states: dict,
               opt: OptimizerState, lr: float, x: np.ndarray,
               target: np.ndarray, sample_ids, step_key) -> float:
    """One full serial training step; returns the loss."""
    pred, stash = forward(net, params, states, x, "train", step_key, sample_ids)
    loss, dpred = loss_and_grad(net, pred, target)
    grads = backward(net, params, states, stash, dpred)
    optimizer_step(params, grads, opt, lr)
    return loss


def eval_loss(net: NetworkSpec, params: dict, states: dict, x: np.ndarray,
              target: np.ndarray) -> float:
    pred, _ = forward(net, params, states, x, "eval")
    return loss_and_grad(net, pred, target)[0]
