"""Convolution kernel backend selection.

Two interchangeable backends implement the direct-loop 3D convolution core:

  * "cython" — the compiled extension voxpar.kernels._hot (built by setup.py
    when a compiler is available);
  * "numpy"  — the pure-numpy fallback in voxpar.kernels.fallback.

Selection order: explicit select_backend() call > VOXPAR_BACKEND environment
variable ("cython" | "numpy" | "auto") > auto (compiled if importable).
benchmarks/bench_kernels.py compares the two.
"""

from __future__ import annotations

import os

from . import fallback

_backends = {"numpy": fallback}
try:
    from . import cyext

    _backends["cython"] = cyext
except ImportError:
    cyext = None


def available_backends():
    return sorted(_backends)


def _auto_name() -> str:
    return "cython" if "cython" in _backends else "numpy"


def select_backend(name: str = None):
    """Pick the active backend; returns the backend module."""
    global _active
    if name is None or name == "auto":
        name = _auto_name()
    if name not in _backends:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    _active = _backends[name]
    return _active


_env = os.environ.get("VOXPAR_BACKEND", "auto")
_active = _backends.get(_env, _backends[_auto_name()])


def backend_name() -> str:
    return _active.NAME


def get_backend(name: str = None):
    """Fetch a backend module without changing the active one."""
    if name is None or name == "auto":
        name = _auto_name()
    return _backends[name]


def conv3d_fwd(xpad, w, stride):
    return _active.conv3d_fwd(xpad, w, stride)


def conv3d_bwd_data(u, w, stride, pad_spatial):
    return _active.conv3d_bwd_data(u, w, stride, pad_spatial)


def conv3d_bwd_filter(xpad, u, stride, kernel):
    return _active.conv3d_bwd_filter(xpad, u, stride, kernel)
