"""Adapter exposing the compiled _hot kernels under the backend interface."""

from __future__ import annotations

import numpy as np

from . import _hot

NAME = "cython"

_SUPPORTED = (np.float32, np.float64)


def _contig(a: np.ndarray) -> np.ndarray:
    if a.dtype.type not in _SUPPORTED:
        raise TypeError(f"compiled kernels support fp32/fp64 only, got {a.dtype}")
    return np.ascontiguousarray(a)


def conv3d_fwd(xpad, w, stride):
    xpad = _contig(xpad)
    w = _contig(w)
    sd, sh, sw = stride
    out_sp = tuple((p - k) // s + 1 for p, k, s in zip(xpad.shape[2:], w.shape[2:], stride))
    y = np.zeros((xpad.shape[0], w.shape[0]) + out_sp, dtype=xpad.dtype)
    _hot.conv3d_fwd(xpad, w, sd, sh, sw, y)
    return y


def conv3d_bwd_data(u, w, stride, pad_spatial):
    u = _contig(u)
    w = _contig(w)
    sd, sh, sw = stride
    xg = np.zeros((u.shape[0], w.shape[1]) + tuple(pad_spatial), dtype=u.dtype)
    _hot.conv3d_bwd_data(u, w, sd, sh, sw, xg)
    return xg


def conv3d_bwd_filter(xpad, u, stride, kernel):
    xpad = _contig(xpad)
    u = _contig(u)
    sd, sh, sw = stride
    wg = np.zeros((u.shape[1], xpad.shape[1]) + tuple(kernel), dtype=xpad.dtype)
    _hot.conv3d_bwd_filter(xpad, u, sd, sh, sw, wg)
    return wg
