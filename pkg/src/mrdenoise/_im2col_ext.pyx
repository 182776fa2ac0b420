# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for 3x3x3 kernels, padding 1, stride 1.

Bit-identical to ``_im2col_py``: col2im sums the 27 taps of every voxel in the
same order, starting from +0.0. Do not build with -ffast-math.
"""
import numpy as np
from cython cimport floating


cdef inline Py_ssize_t _max(Py_ssize_t a, Py_ssize_t b) nogil:
    return a if a > b else b


cdef inline Py_ssize_t _min(Py_ssize_t a, Py_ssize_t b) nogil:
    return a if a < b else b


def im2col(floating[:, :, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t d = x.shape[2], h = x.shape[3], w = x.shape[4]
    cdef Py_ssize_t i, ch, a, b, e, z, y, xi, row, base, y0, y1, x0, x1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c * 27, d * h * w), dtype=dtype)
    cdef floating[:, :, ::1] o = out
    with nogil:
        for i in range(n):
            for ch in range(c):
                for a in range(3):
                    for b in range(3):
                        y0 = _max(0, 1 - b)
                        y1 = _min(h, h + 1 - b)
                        for e in range(3):
                            x0 = _max(0, 1 - e)
                            x1 = _min(w, w + 1 - e)
                            row = ch * 27 + (a * 3 + b) * 3 + e
                            for z in range(_max(0, 1 - a), _min(d, d + 1 - a)):
                                for y in range(y0, y1):
                                    base = (z * h + y) * w
                                    for xi in range(x0, x1):
                                        o[i, row, base + xi] = x[i, ch, z + a - 1, y + b - 1, xi + e - 1]
    return out


def col2im(cols, shape):
    n, c, d, h, w = shape
    cols = np.ascontiguousarray(cols).reshape(n, c * 27, d * h * w)
    if cols.dtype == np.float32:
        out = np.empty((n, c, d, h, w), dtype=np.float32)
        _col2im_f32(cols, out)
    else:
        out = np.empty((n, c, d, h, w), dtype=np.float64)
        _col2im_f64(cols, out)
    return out


cdef void _col2im_f32(float[:, :, ::1] cols, float[:, :, :, :, ::1] out) noexcept nogil:
    _col2im_impl(cols, out)


cdef void _col2im_f64(double[:, :, ::1] cols, double[:, :, :, :, ::1] out) noexcept nogil:
    _col2im_impl(cols, out)


cdef inline void _col2im_impl(floating[:, :, ::1] cols, floating[:, :, :, :, ::1] out) noexcept nogil:
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1]
    cdef Py_ssize_t d = out.shape[2], h = out.shape[3], w = out.shape[4]
    cdef Py_ssize_t i, ch, z, y, xi, a, b, e, pz, py, px, row
    cdef floating acc
    for i in range(n):
        for ch in range(c):
            for z in range(d):
                for y in range(h):
                    for xi in range(w):
                        acc = 0.0
                        # tap k reads the voxel at q - offset_k
                        for a in range(3):
                            pz = z - a + 1
                            if pz < 0 or pz >= d:
                                continue
                            for b in range(3):
                                py = y - b + 1
                                if py < 0 or py >= h:
                                    continue
                                for e in range(3):
                                    px = xi - e + 1
                                    if px < 0 or px >= w:
                                        continue
                                    row = ch * 27 + (a * 3 + b) * 3 + e
                                    acc = acc + cols[i, row, (pz * h + py) * w + px]
                        out[i, ch, z, y, xi] = acc


from libc.math cimport sqrt, sqrtf


def adam_update(p, g, m, v, double b1, double b2, double lr, double bc1, double bc2, double eps):
    p = np.ascontiguousarray(p)
    shape = p.shape
    dtype = p.dtype
    flat = [np.ascontiguousarray(a, dtype=dtype).reshape(-1) for a in (p, g, m, v)]
    outs = [np.empty_like(flat[0]) for _ in range(3)]
    if dtype == np.float32:
        _adam_f32(flat[0], flat[1], flat[2], flat[3], outs[0], outs[1], outs[2],
                  <float>b1, <float>(1.0 - b1), <float>b2, <float>(1.0 - b2),
                  <float>lr, <float>bc1, <float>bc2, <float>eps)
    else:
        _adam_f64(flat[0], flat[1], flat[2], flat[3], outs[0], outs[1], outs[2],
                  b1, 1.0 - b1, b2, 1.0 - b2, lr, bc1, bc2, eps)
    return tuple(o.reshape(shape) for o in outs)


cdef void _adam_f32(float[::1] p, float[::1] g, float[::1] m, float[::1] v,
                    float[::1] po, float[::1] mo, float[::1] vo,
                    float b1, float c1, float b2, float c2,
                    float lr, float bc1, float bc2, float eps) noexcept nogil:
    cdef Py_ssize_t i
    cdef float mi, vi, gi
    for i in range(p.shape[0]):
        gi = g[i]
        mi = b1 * m[i] + c1 * gi
        vi = b2 * v[i] + c2 * (gi * gi)
        mo[i] = mi
        vo[i] = vi
        po[i] = p[i] - lr * (mi / bc1) / (sqrtf(vi / bc2) + eps)


cdef void _adam_f64(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
                    double[::1] po, double[::1] mo, double[::1] vo,
                    double b1, double c1, double b2, double c2,
                    double lr, double bc1, double bc2, double eps) noexcept nogil:
    cdef Py_ssize_t i
    cdef double mi, vi, gi
    for i in range(p.shape[0]):
        gi = g[i]
        mi = b1 * m[i] + c1 * gi
        vi = b2 * v[i] + c2 * (gi * gi)
        mo[i] = mi
        vo[i] = vi
        po[i] = p[i] - lr * (mi / bc1) / (sqrt(vi / bc2) + eps)
