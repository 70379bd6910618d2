# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Direct-loop 3D convolution kernels (compiled core).

Per output element the accumulation order is (ci, kd, kh, kw) — identical to
the numpy fallback — and the extension is compiled with -ffp-contract=off,
so both backends round the same way. Inputs arrive pre-padded; the caller
owns all shape arithmetic.
"""

import numpy as np

cimport cython

ctypedef fused real:
    float
    double


def conv3d_fwd(real[:, :, :, :, ::1] xpad, real[:, :, :, :, ::1] w,
               Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw,
               real[:, :, :, :, ::1] y):
    cdef Py_ssize_t n = y.shape[0], cout = y.shape[1]
    cdef Py_ssize_t od = y.shape[2], oh = y.shape[3], ow = y.shape[4]
    cdef Py_ssize_t cin = xpad.shape[1]
    cdef Py_ssize_t kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t nn, co, ci, a, b, c, z, h, x, zz, hh
    cdef real wv
    with nogil:
        for nn in range(n):
            for co in range(cout):
                for ci in range(cin):
                    for a in range(kd):
                        for b in range(kh):
                            for c in range(kw):
                                wv = w[co, ci, a, b, c]
                                for z in range(od):
                                    zz = sd * z + a
                                    for h in range(oh):
                                        hh = sh * h + b
                                        for x in range(ow):
                                            y[nn, co, z, h, x] += wv * xpad[nn, ci, zz, hh, sw * x + c]


def conv3d_bwd_data(real[:, :, :, :, ::1] u, real[:, :, :, :, ::1] w,
                    Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw,
                    real[:, :, :, :, ::1] xg):
    """Scatter u through w into the padded-frame input gradient xg."""
    cdef Py_ssize_t n = u.shape[0], cout = u.shape[1]
    cdef Py_ssize_t od = u.shape[2], oh = u.shape[3], ow = u.shape[4]
    cdef Py_ssize_t cin = xg.shape[1]
    cdef Py_ssize_t kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t nn, co, ci, a, b, c, z, h, x, zz, hh
    cdef real wv
    with nogil:
        for nn in range(n):
            for co in range(cout):
                for ci in range(cin):
                    for a in range(kd):
                        for b in range(kh):
                            for c in range(kw):
                                wv = w[co, ci, a, b, c]
                                for z in range(od):
                                    zz = sd * z + a
                                    for h in range(oh):
                                        hh = sh * h + b
                                        for x in range(ow):
                                            xg[nn, ci, zz, hh, sw * x + c] += wv * u[nn, co, z, h, x]


def conv3d_bwd_filter(real[:, :, :, :, ::1] xpad, real[:, :, :, :, ::1] u,
                      Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw,
                      real[:, :, :, :, ::1] wg):
    cdef Py_ssize_t n = u.shape[0], cout = u.shape[1]
    cdef Py_ssize_t od = u.shape[2], oh = u.shape[3], ow = u.shape[4]
    cdef Py_ssize_t cin = xpad.shape[1]
    cdef Py_ssize_t kd = wg.shape[2], kh = wg.shape[3], kw = wg.shape[4]
    cdef Py_ssize_t nn, co, ci, a, b, c, z, h, x, zz, hh
    cdef real s
    with nogil:
        for nn in range(n):
            for co in range(cout):
                for ci in range(cin):
                    for a in range(kd):
                        for b in range(kh):
                            for c in range(kw):
                                s = 0
                                for z in range(od):
                                    zz = sd * z + a
                                    for h in range(oh):
                                        hh = sh * h + b
                                        for x in range(ow):
                                            s += u[nn, co, z, h, x] * xpad[nn, ci, zz, hh, sw * x + c]
                                wg[co, ci, a, b, c] += s
