"""Pure-numpy im2col / col2im for 3x3x3 kernels, padding 1, stride 1.

Column layout: row ``c * 27 + (a * 3 + b) * 3 + e`` holds the input shifted by
``(a - 1, b - 1, e - 1)``, which matches ``kernel.reshape(cout, cin * 27)``.
"""
import numpy as np

OFFSETS = [(a, b, e) for a in range(3) for b in range(3) for e in range(3)]


def im2col(x):
    n, c, d, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    cols = np.empty((n, c, 27, d, h, w), dtype=x.dtype)
    for k, (a, b, e) in enumerate(OFFSETS):
        cols[:, :, k] = xp[:, :, a:a + d, b:b + h, e:e + w]
    return cols.reshape(n, c * 27, d * h * w)


def col2im(cols, shape):
    n, c, d, h, w = shape
    cols = cols.reshape(n, c, 27, d, h, w)
    xp = np.zeros((n, c, d + 2, h + 2, w + 2), dtype=cols.dtype)
    # accumulation order over k is fixed; the compiled kernel mirrors it
    for k, (a, b, e) in enumerate(OFFSETS):
        xp[:, :, a:a + d, b:b + h, e:e + w] += cols[:, :, k]
    return np.ascontiguousarray(xp[:, :, 1:-1, 1:-1, 1:-1])


def adam_update(p, g, m, v, b1, b2, lr, bc1, bc2, eps):
    """Fused bias-corrected Adam step; returns new (param, m, v) arrays.

    Scalars are applied at the array precision, in the same order as the
    compiled kernel.
    """
    dt = p.dtype.type
    g, m, v = (np.asarray(a, dtype=p.dtype) for a in (g, m, v))
    m_new = dt(b1) * m + dt(1.0 - b1) * g
    v_new = dt(b2) * v + dt(1.0 - b2) * (g * g)
    upd = dt(lr) * (m_new / dt(bc1)) / (np.sqrt(v_new / dt(bc2)) + dt(eps))
    return p - upd, m_new, v_new
