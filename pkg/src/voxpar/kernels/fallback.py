"""Pure-numpy convolution kernels (fallback backend).

Same contracts as the compiled backend: inputs are pre-padded and outputs
are allocated here. The forward pass accumulates per output element in
(ci, kd, kh, kw) order and agrees with the compiled kernels bit for bit.
The backward passes reduce through BLAS (pairwise summation) and may differ
from the compiled left-fold loops in the last bits.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def _out_spatial(pad_spatial, kernel, stride):
    return tuple((p - k) // s + 1 for p, k, s in zip(pad_spatial, kernel, stride))


def conv3d_fwd(xpad: np.ndarray, w: np.ndarray, stride) -> np.ndarray:
    n, cin = xpad.shape[:2]
    cout = w.shape[0]
    kd, kh, kw = w.shape[2:]
    sd, sh, sw = stride
    od, oh, ow = _out_spatial(xpad.shape[2:], (kd, kh, kw), stride)
    y = np.zeros((n, cout, od, oh, ow), dtype=xpad.dtype)
    for ci in range(cin):
        for a in range(kd):
            for b in range(kh):
                for c in range(kw):
                    xs = xpad[:, ci, a:a + sd * od:sd, b:b + sh * oh:sh, c:c + sw * ow:sw]
                    y += w[None, :, ci, a, b, c, None, None, None] * xs[:, None]
    return y


def conv3d_bwd_data(u: np.ndarray, w: np.ndarray, stride, pad_spatial) -> np.ndarray:
    n = u.shape[0]
    cin = w.shape[1]
    kd, kh, kw = w.shape[2:]
    sd, sh, sw = stride
    od, oh, ow = u.shape[2:]
    xg = np.zeros((n, cin) + tuple(pad_spatial), dtype=u.dtype)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                contrib = np.tensordot(u, w[:, :, a, b, c], axes=([1], [0]))
                contrib = np.moveaxis(contrib, -1, 1)
                xg[:, :, a:a + sd * od:sd, b:b + sh * oh:sh, c:c + sw * ow:sw] += contrib
    return xg


def conv3d_bwd_filter(xpad: np.ndarray, u: np.ndarray, stride, kernel) -> np.ndarray:
    cout = u.shape[1]
    cin = xpad.shape[1]
    kd, kh, kw = kernel
    sd, sh, sw = stride
    od, oh, ow = u.shape[2:]
    wg = np.zeros((cout, cin, kd, kh, kw), dtype=xpad.dtype)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                xs = xpad[:, :, a:a + sd * od:sd, b:b + sh * oh:sh, c:c + sw * ow:sw]
                wg[:, :, a, b, c] = np.tensordot(u, xs, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return wg
