"""Serial (oracle) implementations of every layer the two networks need.

These operate on plain numpy arrays with no process grid in sight; the
distributed implementations in voxpar.layers.distributed are validated
against them. Convolution keeps "same" symmetric zero padding with odd
kernels: y[n,co,o] = sum_ci sum_k w[co,ci,k] * x[n,ci,s*o+k-r], r=(k-1)/2,
so the output extent is ceil(extent/stride).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import kernels, prng
from ..errors import NonDivisible, ShapeMismatch


@dataclass(frozen=True)
class ConvParams:
    cin: int
    cout: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    # "same" padding, no bias (biases removed from conv layers)

    def __post_init__(self):
        if any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise ShapeMismatch(f"conv kernels must be odd, got {self.kernel}")
        if any(s < 1 for s in self.stride):
            raise ShapeMismatch(f"bad stride {self.stride}")

    @property
    def radii(self):
        return tuple((k - 1) // 2 for k in self.kernel)


@dataclass
class BNState:
    """Per-channel batchnorm state. gamma/beta are optimizer-owned arrays."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64):
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


def _pad_spatial(x: np.ndarray, radii) -> np.ndarray:
    rd, rh, rw = radii
    return np.pad(x, ((0, 0), (0, 0), (rd, rd), (rh, rh), (rw, rw)))


def _check_conv_shapes(x, w, params: ConvParams):
    if x.ndim != 5 or x.shape[1] != params.cin:
        raise ShapeMismatch(f"conv input {x.shape} vs cin={params.cin}")
    if tuple(w.shape) != (params.cout, params.cin) + tuple(params.kernel):
        raise ShapeMismatch(f"conv weight {w.shape} vs params {params}")


def conv3d_ref(x: np.ndarray, w: np.ndarray, params: ConvParams) -> np.ndarray:
    _check_conv_shapes(x, w, params)
    xpad = _pad_spatial(x, params.radii)
    return kernels.conv3d_fwd(xpad, w, params.stride)


def conv3d_bwd_data_ref(u: np.ndarray, w: np.ndarray, params: ConvParams,
                        in_spatial) -> np.ndarray:
    if u.shape[1] != params.cout:
        raise ShapeMismatch(f"conv bwd_data upstream {u.shape} vs cout={params.cout}")
    radii = params.radii
    pad_spatial = tuple(e + 2 * r for e, r in zip(in_spatial, radii))
    xg_pad = kernels.conv3d_bwd_data(u, w, params.stride, pad_spatial)
    rd, rh, rw = radii
    ed, eh, ew = in_spatial
    return xg_pad[:, :, rd:rd + ed, rh:rh + eh, rw:rw + ew]


def conv3d_bwd_filter_ref(x: np.ndarray, u: np.ndarray, params: ConvParams) -> np.ndarray:
    _check_conv_shapes(x, np.zeros((params.cout, params.cin) + tuple(params.kernel),
                                   dtype=x.dtype), params)
    xpad = _pad_spatial(x, params.radii)
    return kernels.conv3d_bwd_filter(xpad, u, params.stride, params.kernel)


# ---------------------------------------------------------------- deconv 2x

def deconv3d_ref(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Transposed convolution, kernel 2^3, stride 2; w is (cin, cout, 2,2,2).

    Every input voxel expands into its own 2^3 output block (kernel size
    equals stride, so blocks are disjoint): y[n,co,2i+k] = sum_ci x[n,ci,i]*w[ci,co,k].
    """
    if x.ndim != 5 or w.ndim != 5 or w.shape[2:] != (2, 2, 2):
        raise ShapeMismatch(f"deconv expects 5D x and (cin,cout,2,2,2) w, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"deconv cin mismatch: {x.shape[1]} vs {w.shape[0]}")
    n, cin, d, h, ww_ = x.shape
    cout = w.shape[1]
    y = np.zeros((n, cout, 2 * d, 2 * h, 2 * ww_), dtype=x.dtype)
    for a in range(2):
        for b in range(2):
            for c in range(2):
                block = np.tensordot(x, w[:, :, a, b, c], axes=([1], [0]))
                y[:, :, a::2, b::2, c::2] = np.moveaxis(block, -1, 1)
    return y


def deconv3d_bwd_data_ref(u: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Adjoint of deconv3d_ref w.r.t. x: gather each 2^3 output block."""
    n, cout = u.shape[:2]
    cin = w.shape[0]
    d, h, ww_ = (s // 2 for s in u.shape[2:])
    xg = np.zeros((n, cin, d, h, ww_), dtype=u.dtype)
    for a in range(2):
        for b in range(2):
            for c in range(2):
                us = u[:, :, a::2, b::2, c::2]
                block = np.tensordot(us, w[:, :, a, b, c], axes=([1], [1]))
                xg += np.moveaxis(block, -1, 1)
    return xg


def deconv3d_bwd_filter_ref(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    cin = x.shape[1]
    cout = u.shape[1]
    wg = np.zeros((cin, cout, 2, 2, 2), dtype=x.dtype)
    for a in range(2):
        for b in range(2):
            for c in range(2):
                us = u[:, :, a::2, b::2, c::2]
                wg[:, :, a, b, c] = np.tensordot(x, us, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return wg


# ------------------------------------------------------------------ pooling

def _pool_windows(x: np.ndarray):
    n, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise NonDivisible(f"pool3d needs even extents, got {(d, h, w)}")
    xr = x.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
    # windows flattened in (d,h,w) C order so argmax ties pick the lowest
    # linear index within the window
    return xr.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, d // 2, h // 2, w // 2, 8)


def pool3d_ref(x: np.ndarray, kind: str = "average") -> np.ndarray:
    win = _pool_windows(x)
    if kind == "max":
        return win.max(axis=-1)
    if kind == "average":
        return win.mean(axis=-1)
    raise ShapeMismatch(f"unknown pool kind {kind!r}")


def pool3d_bwd_ref(x: np.ndarray, u: np.ndarray, kind: str = "average") -> np.ndarray:
    n, c, d, h, w = x.shape
    if kind == "average":
        g = u.astype(u.dtype) / u.dtype.type(8)
        g = np.repeat(np.repeat(np.repeat(g, 2, axis=2), 2, axis=3), 2, axis=4)
        return g
    if kind == "max":
        win = _pool_windows(x)
        idx = win.argmax(axis=-1)
        onehot = np.zeros(win.shape, dtype=u.dtype)
        np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
        gw = onehot * u[..., None]
        gw = gw.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2)
        gw = gw.transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return gw.reshape(n, c, d, h, w)
    raise ShapeMismatch(f"unknown pool kind {kind!r}")


# ---------------------------------------------------------------- batchnorm

def batchnorm_stats(s1: np.ndarray, s2: np.ndarray, count: int):
    """Mean/variance from per-channel sum and squared-sum (biased variance)."""
    mean = s1 / count
    var = np.maximum(s2 / count - mean * mean, 0.0)
    return mean, var


def batchnorm_fwd_ref(x: np.ndarray, state: BNState, mode: str = "train"):
    """Returns (y, cache); cache feeds batchnorm_bwd_ref. Updates running stats."""
    c = x.shape[1]
    axes = (0, 2, 3, 4)
    if mode == "train":
        count = x.size // c
        mean, var = batchnorm_stats(x.sum(axis=axes), (x * x).sum(axis=axes), count)
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1 - m) * mean
        state.running_var[...] = m * state.running_var + (1 - m) * var
    elif mode == "eval":
        mean, var = state.running_mean, state.running_var
        count = 0
    else:
        raise ShapeMismatch(f"unknown bn mode {mode!r}")
    inv = 1.0 / np.sqrt(var + state.eps)
    bc = lambda v: v.reshape(1, c, 1, 1, 1).astype(x.dtype)
    xhat = (x - bc(mean)) * bc(inv)
    y = bc(state.gamma) * xhat + bc(state.beta)
    return y, (xhat, inv, count)


def batchnorm_bwd_ref(u: np.ndarray, state: BNState, cache):
    """Returns (dx, dgamma, dbeta) for train mode (batch statistics)."""
    xhat, inv, count = cache
    c = u.shape[1]
    axes = (0, 2, 3, 4)
    dbeta = u.sum(axis=axes)
    dgamma = (u * xhat).sum(axis=axes)
    bc = lambda v: v.reshape(1, c, 1, 1, 1).astype(u.dtype)
    dx = bc(state.gamma * inv) * (u - (bc(dbeta) + xhat * bc(dgamma)) / count)
    return dx, dgamma, dbeta


# ------------------------------------------------------- pointwise & losses

def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x >= 0, x, x.dtype.type(slope) * x)


def leaky_relu_bwd(x: np.ndarray, u: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x >= 0, u, u.dtype.type(slope) * u)


def dropout_mask(key_parts, n_features: int, keep: float) -> np.ndarray:
    """Deterministic keep-mask for one sample; see voxpar.prng for the policy.

    key_parts is (seed, epoch, iteration, sample_id, layer_index): the mask
    depends only on the sample's global identity and the feature index, so
    partitioning can never change it.
    """
    return prng.uniform01(list(key_parts), n_features) < keep


def dropout_apply(x: np.ndarray, mask: np.ndarray, keep: float) -> np.ndarray:
    """Inverted dropout: zero dropped features, scale survivors by 1/keep."""
    if mask.shape != x.shape:
        raise ShapeMismatch(f"dropout mask {mask.shape} vs input {x.shape}")
    return x * (mask.astype(x.dtype) / x.dtype.type(keep))


def fully_connected(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"fc input {x.shape} vs weight {w.shape}")
    return x @ w + b


def fully_connected_bwd(x: np.ndarray, w: np.ndarray, u: np.ndarray):
    """Returns (dx, dw, db)."""
    return u @ w.T, x.T @ u, u.sum(axis=0)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeMismatch(f"concat shapes {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared difference over the batch. Returns (loss, dpred)."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse shapes {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float((diff * diff).sum() / diff.size)
    return loss, (2.0 / diff.size) * diff


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax over the channel axis."""
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy_ref(logits: np.ndarray, labels: np.ndarray):
    """Per-voxel cross entropy, normalized by total voxel count.

    logits: (n, K, d, h, w); labels: (n, d, h, w) integer class ids.
    Returns (loss, dlogits).
    """
    if logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ShapeMismatch(f"xent shapes {logits.shape} vs {labels.shape}")
    logp = log_softmax(logits)
    count = labels.size
    picked = np.take_along_axis(logp, labels[:, None].astype(np.int64), axis=1)
    loss = float(-picked.sum() / count)
    grad = np.exp(logp)
    np.put_along_axis(
        grad, labels[:, None].astype(np.int64),
        np.take_along_axis(grad, labels[:, None].astype(np.int64), axis=1) - 1.0,
        axis=1,
    )
    return loss, grad / count
