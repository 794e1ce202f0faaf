# cython: language_level=3
"""Compiled versions of the bilinear sampling and window normal-equation kernels.

Must stay numerically interchangeable with ``_pykernels``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef inline bint _cell(const double[:, ::1] img, double x, double y,
                       double* i00, double* i10, double* i01, double* i11,
                       double* fx, double* fy) noexcept nogil:
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    cdef Py_ssize_t x0, y0, x1, y1
    if not (x >= 0.0 and x <= w - 1 and y >= 0.0 and y <= h - 1):
        return False
    x0 = <Py_ssize_t>floor(x)
    y0 = <Py_ssize_t>floor(y)
    if x0 > w - 2:
        x0 = w - 2 if w >= 2 else 0
    if y0 > h - 2:
        y0 = h - 2 if h >= 2 else 0
    x1 = x0 + 1 if x0 + 1 < w else w - 1
    y1 = y0 + 1 if y0 + 1 < h else h - 1
    fx[0] = x - x0
    fy[0] = y - y0
    i00[0] = img[y0, x0]
    i10[0] = img[y0, x1]
    i01[0] = img[y1, x0]
    i11[0] = img[y1, x1]
    return True


def sample_points(const double[:, ::1] img, xs, ys):
    cdef const double[::1] xv = np.ascontiguousarray(xs, dtype=np.float64).reshape(-1)
    cdef const double[::1] yv = np.ascontiguousarray(ys, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t n = xv.shape[0], k
    out = np.empty(n)
    cdef double[::1] o = out
    cdef double i00, i10, i01, i11, fx, fy, top, bot
    cdef bint ok = True
    with nogil:
        for k in range(n):
            if not _cell(img, xv[k], yv[k], &i00, &i10, &i01, &i11, &fx, &fy):
                ok = False
                break
            top = i00 + fx * (i10 - i00)
            bot = i01 + fx * (i11 - i01)
            o[k] = top + fy * (bot - top)
    if not ok:
        return None
    return out.reshape(np.shape(xs))


def sample_points_grad(const double[:, ::1] img, xs, ys):
    cdef const double[::1] xv = np.ascontiguousarray(xs, dtype=np.float64).reshape(-1)
    cdef const double[::1] yv = np.ascontiguousarray(ys, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t n = xv.shape[0], k
    val = np.empty(n)
    gxa = np.empty(n)
    gya = np.empty(n)
    cdef double[::1] v = val, gx = gxa, gy = gya
    cdef double i00, i10, i01, i11, fx, fy, top, bot
    cdef bint ok = True
    with nogil:
        for k in range(n):
            if not _cell(img, xv[k], yv[k], &i00, &i10, &i01, &i11, &fx, &fy):
                ok = False
                break
            top = i00 + fx * (i10 - i00)
            bot = i01 + fx * (i11 - i01)
            v[k] = top + fy * (bot - top)
            gx[k] = (i10 - i00) + fy * ((i11 - i01) - (i10 - i00))
            gy[k] = bot - top
    if not ok:
        return None
    shape = np.shape(xs)
    return val.reshape(shape), gxa.reshape(shape), gya.reshape(shape)


def lsm_accumulate(const double[:, ::1] img, double mean, double inv_sd, double xc, double yc,
                   params, const double[::1] dx, const double[::1] dy, const double[::1] ref):
    cdef double tx = params[0], a1 = params[1], a2 = params[2], ty = params[3]
    cdef double b1 = params[4], b2 = params[5], h0 = params[6], h1 = params[7]
    cdef Py_ssize_t n = dx.shape[0], k, i, j
    JtJ_a = np.zeros((8, 8))
    Jtr_a = np.zeros(8)
    warped = np.empty(n)
    cdef double[:, ::1] JtJ = JtJ_a
    cdef double[::1] Jtr = Jtr_a
    cdef double[::1] wv = warped
    cdef double row[8]
    cdef double i00, i10, i01, i11, fx, fy, top, bot, val, gxv, gyv, r, x, y
    cdef double cost = 0.0
    cdef bint ok = True
    with nogil:
        for k in range(n):
            x = xc + tx + a1 * dx[k] + a2 * dy[k]
            y = yc + ty + b1 * dy[k] + b2 * dx[k]
            if not _cell(img, x, y, &i00, &i10, &i01, &i11, &fx, &fy):
                ok = False
                break
            top = i00 + fx * (i10 - i00)
            bot = i01 + fx * (i11 - i01)
            val = (top + fy * (bot - top) - mean) * inv_sd
            gxv = ((i10 - i00) + fy * ((i11 - i01) - (i10 - i00))) * inv_sd
            gyv = (bot - top) * inv_sd
            wv[k] = val
            r = ref[k] - h0 - h1 * val
            row[0] = -h1 * gxv
            row[1] = row[0] * dx[k]
            row[2] = row[0] * dy[k]
            row[3] = -h1 * gyv
            row[4] = row[3] * dy[k]
            row[5] = row[3] * dx[k]
            row[6] = -1.0
            row[7] = -val
            cost += r * r
            for i in range(8):
                Jtr[i] += row[i] * r
                for j in range(i, 8):
                    JtJ[i, j] += row[i] * row[j]
        if ok:
            for i in range(8):
                for j in range(i):
                    JtJ[i, j] = JtJ[j, i]
    if not ok:
        return None
    return JtJ_a, Jtr_a, cost, warped
