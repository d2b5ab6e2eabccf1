# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels. Semantics must match ``_kernels_py`` bit-for-bit."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

DEF CIRCLE = 0
DEF SQUARE = 1
DEF TRIANGLE = 2


cdef inline bint _inside(long shape, long size, long u, long v) nogil:
    # u, v are local pixel coordinates in [0, size)
    cdef long du, dv
    if shape == SQUARE:
        return True
    du = 2 * u + 1 - size
    dv = 2 * v + 1 - size
    if shape == CIRCLE:
        return du * du + dv * dv <= size * size
    # triangle, apex up
    if du < 0:
        du = -du
    return du <= v + 1


def rasterize(cnp.uint8_t[:, :, :, ::1] frames,
              cnp.int64_t[::1] shapes,
              cnp.int64_t[::1] sizes,
              cnp.int64_t[:, ::1] xs,
              cnp.int64_t[:, ::1] ys,
              cnp.uint8_t[:, ::1] colors):
    cdef Py_ssize_t T = frames.shape[0], H = frames.shape[1], W = frames.shape[2]
    cdef Py_ssize_t K = shapes.shape[0]
    cdef Py_ssize_t k, t, u, v, px, py
    cdef long s
    with nogil:
        for k in range(K):
            s = sizes[k]
            for t in range(T):
                for v in range(s):
                    py = ys[k, t] + v
                    if py < 0 or py >= H:
                        continue
                    for u in range(s):
                        px = xs[k, t] + u
                        if px < 0 or px >= W:
                            continue
                        if _inside(shapes[k], s, u, v):
                            frames[t, py, px, 0] = colors[k, 0]
                            frames[t, py, px, 1] = colors[k, 1]
                            frames[t, py, px, 2] = colors[k, 2]


def object_mask(long shape, long size):
    out = np.zeros((size, size), dtype=np.bool_)
    cdef cnp.uint8_t[:, ::1] view = out.view(np.uint8)
    cdef Py_ssize_t u, v
    for v in range(size):
        for u in range(size):
            view[v, u] = _inside(shape, size, u, v)
    return out


def bilinear_resize(const double[:, :, ::1] img, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], C = img.shape[2]
    out = np.empty((out_h, out_w, C), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef double sy, sx, wy, wx, scale_y = <double>h / out_h, scale_x = <double>w / out_w
    cdef Py_ssize_t oy, ox, c, y0, y1, x0, x1
    with nogil:
        for oy in range(out_h):
            sy = (oy + 0.5) * scale_y - 0.5
            if sy < 0.0:
                sy = 0.0
            if sy > h - 1:
                sy = h - 1
            y0 = <Py_ssize_t>floor(sy)
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            wy = sy - y0
            for ox in range(out_w):
                sx = (ox + 0.5) * scale_x - 0.5
                if sx < 0.0:
                    sx = 0.0
                if sx > w - 1:
                    sx = w - 1
                x0 = <Py_ssize_t>floor(sx)
                x1 = x0 + 1 if x0 + 1 < w else w - 1
                wx = sx - x0
                for c in range(C):
                    o[oy, ox, c] = ((1.0 - wy) * ((1.0 - wx) * img[y0, x0, c] + wx * img[y0, x1, c])
                                    + wy * ((1.0 - wx) * img[y1, x0, c] + wx * img[y1, x1, c]))
    return out


def gt_ranks(const double[:, ::1] sim, const cnp.int64_t[::1] gt):
    cdef Py_ssize_t Q = sim.shape[0], C = sim.shape[1], q, j
    cdef double ref
    cdef cnp.int64_t g, r
    out = np.empty(Q, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    with nogil:
        for q in range(Q):
            g = gt[q]
            ref = sim[q, g]
            r = 0
            for j in range(C):
                if sim[q, j] > ref or (sim[q, j] == ref and j < g):
                    r += 1
            o[q] = r
    return out
