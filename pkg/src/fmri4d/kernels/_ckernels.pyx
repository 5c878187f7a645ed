# cython: language_level=3
"""Compiled convolution kernels (direct loops, im2col, col2im).

Same contracts as ``_pykernels``. Every output element is accumulated in a
fixed order (ci, kx, ky, kz, kt), so results do not depend on scheduling.
"""

import numpy as np

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _first(Py_ssize_t k, Py_ssize_t p, Py_ssize_t s) noexcept nogil:
    # smallest o with o*s + k - p >= 0
    cdef Py_ssize_t num = p - k
    if num <= 0:
        return 0
    return (num + s - 1) // s


cdef inline Py_ssize_t _stop(Py_ssize_t k, Py_ssize_t p, Py_ssize_t s, Py_ssize_t n, Py_ssize_t o) noexcept nogil:
    # one past the largest o with o*s + k - p <= n - 1, capped at o
    cdef Py_ssize_t num = n - 1 + p - k
    cdef Py_ssize_t h
    if num < 0:
        return 0
    h = num // s + 1
    return h if h < o else o


def out_extents(in_ext, kernel, stride, pad):
    return tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(in_ext, kernel, stride, pad))


def _dtype(const real[:, :, :, :, :, ::1] x):
    if real is float:
        return np.float32
    return np.float64


def conv_direct(const real[:, :, :, :, :, ::1] x, const real[:, :, :, :, :, ::1] w, stride, pad):
    cdef Py_ssize_t N = x.shape[0], CI = x.shape[1]
    cdef Py_ssize_t X = x.shape[2], Y = x.shape[3], Z = x.shape[4], T = x.shape[5]
    cdef Py_ssize_t CO = w.shape[0]
    cdef Py_ssize_t KX = w.shape[2], KY = w.shape[3], KZ = w.shape[4], KT = w.shape[5]
    cdef Py_ssize_t sx = stride[0], sy = stride[1], sz = stride[2], st = stride[3]
    cdef Py_ssize_t px = pad[0], py = pad[1], pz = pad[2], pt = pad[3]
    ox_, oy_, oz_, ot_ = out_extents((X, Y, Z, T), (KX, KY, KZ, KT), stride, pad)
    cdef Py_ssize_t OX = ox_, OY = oy_, OZ = oz_, OT = ot_
    result = np.zeros((N, CO, OX, OY, OZ, OT), dtype=_dtype(x))
    cdef real[:, :, :, :, :, ::1] out = result
    cdef Py_ssize_t n, co, ci, a, b, c, d, ox, oy, oz, ot, ix, iy, iz
    cdef Py_ssize_t xlo, xhi, ylo, yhi, zlo, zhi, tlo, thi
    cdef real wv
    with nogil:
        for n in range(N):
            for co in range(CO):
                for ci in range(CI):
                    for a in range(KX):
                        xlo = _first(a, px, sx)
                        xhi = _stop(a, px, sx, X, OX)
                        for b in range(KY):
                            ylo = _first(b, py, sy)
                            yhi = _stop(b, py, sy, Y, OY)
                            for c in range(KZ):
                                zlo = _first(c, pz, sz)
                                zhi = _stop(c, pz, sz, Z, OZ)
                                for d in range(KT):
                                    tlo = _first(d, pt, st)
                                    thi = _stop(d, pt, st, T, OT)
                                    wv = w[co, ci, a, b, c, d]
                                    for ox in range(xlo, xhi):
                                        ix = ox * sx + a - px
                                        for oy in range(ylo, yhi):
                                            iy = oy * sy + b - py
                                            for oz in range(zlo, zhi):
                                                iz = oz * sz + c - pz
                                                for ot in range(tlo, thi):
                                                    out[n, co, ox, oy, oz, ot] += wv * x[n, ci, ix, iy, iz, ot * st + d - pt]
    return result


def im2col(const real[:, :, :, :, :, ::1] x, kernel, stride, pad):
    cdef Py_ssize_t N = x.shape[0], CI = x.shape[1]
    cdef Py_ssize_t X = x.shape[2], Y = x.shape[3], Z = x.shape[4], T = x.shape[5]
    cdef Py_ssize_t KX = kernel[0], KY = kernel[1], KZ = kernel[2], KT = kernel[3]
    cdef Py_ssize_t sx = stride[0], sy = stride[1], sz = stride[2], st = stride[3]
    cdef Py_ssize_t px = pad[0], py = pad[1], pz = pad[2], pt = pad[3]
    ox_, oy_, oz_, ot_ = out_extents((X, Y, Z, T), kernel, stride, pad)
    cdef Py_ssize_t OX = ox_, OY = oy_, OZ = oz_, OT = ot_
    cdef Py_ssize_t P = OX * OY * OZ * OT
    result = np.zeros((CI * KX * KY * KZ * KT, N * P), dtype=_dtype(x))
    cdef real[:, ::1] cols = result
    cdef Py_ssize_t n, ci, a, b, c, d, ox, oy, oz, ot, ix, iy, iz, row, col
    cdef Py_ssize_t xlo, xhi, ylo, yhi, zlo, zhi, tlo, thi
    with nogil:
        row = 0
        for ci in range(CI):
            for a in range(KX):
                xlo = _first(a, px, sx)
                xhi = _stop(a, px, sx, X, OX)
                for b in range(KY):
                    ylo = _first(b, py, sy)
                    yhi = _stop(b, py, sy, Y, OY)
                    for c in range(KZ):
                        zlo = _first(c, pz, sz)
                        zhi = _stop(c, pz, sz, Z, OZ)
                        for d in range(KT):
                            tlo = _first(d, pt, st)
                            thi = _stop(d, pt, st, T, OT)
                            for n in range(N):
                                for ox in range(xlo, xhi):
                                    ix = ox * sx + a - px
                                    for oy in range(ylo, yhi):
                                        iy = oy * sy + b - py
                                        for oz in range(zlo, zhi):
                                            iz = oz * sz + c - pz
                                            col = ((n * OX + ox) * OY + oy) * OZ + oz
                                            col = col * OT
                                            for ot in range(tlo, thi):
                                                cols[row, col + ot] = x[n, ci, ix, iy, iz, ot * st + d - pt]
                            row = row + 1
    return result


def col2im(const real[:, ::1] cols, x_shape, kernel, stride, pad):
    cdef Py_ssize_t N = x_shape[0], CI = x_shape[1]
    cdef Py_ssize_t X = x_shape[2], Y = x_shape[3], Z = x_shape[4], T = x_shape[5]
    cdef Py_ssize_t KX = kernel[0], KY = kernel[1], KZ = kernel[2], KT = kernel[3]
    cdef Py_ssize_t sx = stride[0], sy = stride[1], sz = stride[2], st = stride[3]
    cdef Py_ssize_t px = pad[0], py = pad[1], pz = pad[2], pt = pad[3]
    ox_, oy_, oz_, ot_ = out_extents((X, Y, Z, T), kernel, stride, pad)
    cdef Py_ssize_t OX = ox_, OY = oy_, OZ = oz_, OT = ot_
    dtype = np.float32 if real is float else np.float64
    result = np.zeros((N, CI, X, Y, Z, T), dtype=dtype)
    cdef real[:, :, :, :, :, ::1] dx = result
    cdef Py_ssize_t n, ci, a, b, c, d, ox, oy, oz, ot, ix, iy, iz, row, col
    cdef Py_ssize_t xlo, xhi, ylo, yhi, zlo, zhi, tlo, thi
    with nogil:
        row = 0
        for ci in range(CI):
            for a in range(KX):
                xlo = _first(a, px, sx)
                xhi = _stop(a, px, sx, X, OX)
                for b in range(KY):
                    ylo = _first(b, py, sy)
                    yhi = _stop(b, py, sy, Y, OY)
                    for c in range(KZ):
                        zlo = _first(c, pz, sz)
                        zhi = _stop(c, pz, sz, Z, OZ)
                        for d in range(KT):
                            tlo = _first(d, pt, st)
                            thi = _stop(d, pt, st, T, OT)
                            for n in range(N):
                                for ox in range(xlo, xhi):
                                    ix = ox * sx + a - px
                                    for oy in range(ylo, yhi):
                                        iy = oy * sy + b - py
                                        for oz in range(zlo, zhi):
                                            iz = oz * sz + c - pz
                                            col = (((n * OX + ox) * OY + oy) * OZ + oz) * OT
                                            for ot in range(tlo, thi):
                                                dx[n, ci, ix, iy, iz, ot * st + d - pt] += cols[row, col + ot]
                            row = row + 1
    return result
