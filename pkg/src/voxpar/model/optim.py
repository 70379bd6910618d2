"""Optimizers, LR schedule, and deterministic weight initialization.

Both steps update parameter arrays in place (and return the dict), so any
aliases — e.g. BNState.gamma — track the optimizer. Gradients are expected
to be gradients of the batch-mean loss, already allreduced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import prng
from ..errors import ShapeMismatch
from .networks import NetworkSpec, param_entries


@dataclass
class Schedule:
    """Linear decay: lr(e) = lr0 * (1 - (1-terminal)*min(e,horizon)/horizon)."""

    lr0: float
    horizon: int = 100
    terminal: float = 0.01


def lr_at(schedule: Schedule, epoch: int) -> float:
    e = min(max(epoch, 0), schedule.horizon)
    return schedule.lr0 * (1.0 - (1.0 - schedule.terminal) * e / schedule.horizon)


@dataclass
class OptimizerState:
    kind: str  # "sgd" | "adam"
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, kind: str, params: dict):
        st = cls(kind)
        if kind == "adam":
            st.m = {k: np.zeros_like(v) for k, v in params.items()}
            st.v = {k: np.zeros_like(v) for k, v in params.items()}
        elif kind != "sgd":
            raise ShapeMismatch(f"unknown optimizer {kind!r}")
        return st


def _check_grads(params: dict, grads: dict):
    if set(params) != set(grads):
        raise ShapeMismatch("grads do not cover the parameter set")
    for k in params:
        if params[k].shape != grads[k].shape:
            raise ShapeMismatch(f"grad shape {grads[k].shape} != param {params[k].shape} for {k}")


def sgd_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> dict:
    _check_grads(params, grads)
    state.t += 1
    for k, p in params.items():
        p -= lr * grads[k]
    return params


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> dict:
    """Bias-corrected Adam; denominator sqrt(v_hat) + eps."""
    _check_grads(params, grads)
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def optimizer_step(params, grads, state: OptimizerState, lr: float) -> dict:
    if state.kind == "adam":
        return adam_step(params, grads, state, lr)
    return sgd_step(params, grads, state, lr)


def init_params(net: NetworkSpec, seed: int, dtype=np.float64) -> dict:
    """Deterministic Kaiming-uniform init, identical on every rank.

    Weight tensor i draws from U(-b, b) with b = sqrt(6 / fan_in) under key
    [seed, -1, i]; the -1 keeps the stream disjoint from the (seed, epoch)
    shuffle keys. bn gamma starts at one, bn beta and fc biases at zero.
    """
    params = {}
    for i, (name, shape, fan_in) in enumerate(param_entries(net)):
        if fan_in == 0:
            fill = 1.0 if name.endswith(".gamma") else 0.0
            params[name] = np.full(shape, fill, dtype=dtype)
        else:
            bound = math.sqrt(6.0 / fan_in)
            draws = prng.uniform([seed, -1, i], math.prod(shape), -bound, bound)
            params[name] = draws.reshape(shape).astype(dtype)
    return params
