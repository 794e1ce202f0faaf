"""Pure numpy implementation of the hot kernels.

Semantics are shared with ``_ckernels.pyx``; the test-suite runs both and
compares results.
"""

import numpy as np


def _cells(img, xs, ys):
    h, w = img.shape
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    inside = (xs >= 0.0) & (xs <= w - 1) & (ys >= 0.0) & (ys <= h - 1)
    if not np.all(inside):
        return None
    x0 = np.minimum(np.floor(xs).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    return (img[y0, x0], img[y0, x1], img[y1, x0], img[y1, x1]), fx, fy


def sample_points(img, xs, ys):
    """Bilinear samples, or ``None`` if any point falls outside the raster."""
    cells = _cells(img, xs, ys)
    if cells is None:
        return None
    (i00, i10, i01, i11), fx, fy = cells
    top = i00 + fx * (i10 - i00)
    bot = i01 + fx * (i11 - i01)
    return top + fy * (bot - top)


def sample_points_grad(img, xs, ys):
    """Bilinear samples with their exact partials, or ``None`` out of bounds."""
    cells = _cells(img, xs, ys)
    if cells is None:
        return None
    (i00, i10, i01, i11), fx, fy = cells
    top = i00 + fx * (i10 - i00)
    bot = i01 + fx * (i11 - i01)
    val = top + fy * (bot - top)
    gx = (i10 - i00) + fy * ((i11 - i01) - (i10 - i00))
    gy = bot - top
    return val, gx, gy


def lsm_accumulate(img, mean, inv_sd, xc, yc, params, dx, dy, ref):
    """Photo-consistency normal equations for one observation window.

    ``params`` is the centered parameter vector
    ``(tx, a1, a2, ty, b1, b2, h0, h1)``: the window pixel at reference offset
    ``(dx, dy)`` is sampled at ``(xc + tx + a1*dx + a2*dy, yc + ty + b1*dy + b2*dx)``
    from the raster normalized as ``(img - mean) * inv_sd``. Residuals are
    ``ref - h0 - h1 * sample``.

    Returns ``(JtJ, Jtr, cost, warped)`` or ``None`` if the warped window
    leaves the raster.
    """
    out = lsm_jacobian(img, mean, inv_sd, xc, yc, params, dx, dy, ref)
    if out is None:
        return None
    r, J, val = out
    return J.T @ J, J.T @ r, float(r @ r), val


def lsm_jacobian(img, mean, inv_sd, xc, yc, params, dx, dy, ref):
    """Residuals, per-pixel Jacobian and warped samples, or ``None``."""
    tx, a1, a2, ty, b1, b2, h0, h1 = params
    xs = xc + tx + a1 * dx + a2 * dy
    ys = yc + ty + b1 * dy + b2 * dx
    res = sample_points_grad(img, xs, ys)
    if res is None:
        return None
    val, gx, gy = res
    val = (val - mean) * inv_sd
    gx = gx * inv_sd
    gy = gy * inv_sd
    r = ref - h0 - h1 * val
    J = np.empty((dx.size, 8))
    J[:, 0] = -h1 * gx
    J[:, 1] = J[:, 0] * dx
    J[:, 2] = J[:, 0] * dy
    J[:, 3] = -h1 * gy
    J[:, 4] = J[:, 3] * dy
    J[:, 5] = J[:, 3] * dx
    J[:, 6] = -1.0
    J[:, 7] = -val
    return r, J, val
