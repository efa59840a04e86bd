# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel backend: four-branch weighted loss and rectangle pooling.

Mirrors ``_kernels_py`` exactly; branch sums use Kahan compensation in the
same element order so both backends agree to the last few ulps.
"""

from libc.math cimport exp, log, pow

import numpy as np

BACKEND_NAME = "compiled"


def gpr_elements(double[:, ::1] probs, unsigned char[:, ::1] ann,
                 signed char[:, ::1] pseudo, double[:, ::1] k_hat,
                 double mu, double sigma, double lam1, double lam2,
                 double q1, double q2, double q3):
    cdef Py_ssize_t n_rows = probs.shape[0]
    cdef Py_ssize_t n_cols = probs.shape[1]
    grad_arr = np.zeros((n_rows, n_cols), dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr
    cdef double s0 = 0, s1 = 0, s2 = 0, s3 = 0
    cdef double c0 = 0, c1 = 0, c2 = 0, c3 = 0
    cdef double p, k, w, lv, dv, bell, wl, y, t, dp
    cdef double inv2s2 = 1.0 / (2.0 * sigma * sigma)
    cdef Py_ssize_t n, i
    cdef int branch

    for n in range(n_rows):
        for i in range(n_cols):
            p = probs[n, i]
            if ann[n, i] == 1:
                branch = 0
                w = 1.0
                lv = -log(p)
                dv = -1.0 / p
            else:
                bell = exp(-((p - mu) * (p - mu)) * inv2s2)
                if pseudo[n, i] == 0:
                    branch = 1
                    k = k_hat[n, i]
                    w = bell
                    lv = (1.0 - k) * (1.0 - pow(1.0 - p, q1)) / q1 \
                        + k * (1.0 - pow(p, q2)) / q2
                    dv = (1.0 - k) * pow(1.0 - p, q1 - 1.0) - k * pow(p, q2 - 1.0)
                elif pseudo[n, i] == -1:
                    branch = 2
                    w = bell
                    lv = -log(1.0 - p)
                    dv = 1.0 / (1.0 - p)
                else:
                    branch = 3
                    w = 1.0 - bell
                    if w < lam1:
                        w = lam1
                    elif w > lam2:
                        w = lam2
                    lv = -(1.0 - q3) * log(1.0 - p) - q3 * log(p)
                    dv = (1.0 - q3) / (1.0 - p) - q3 / p

            dp = p * (1.0 - p)
            grad[n, i] = w * dv * dp
            wl = w * lv
            if branch == 0:
                y = wl - c0; t = s0 + y; c0 = (t - s0) - y; s0 = t
            elif branch == 1:
                y = wl - c1; t = s1 + y; c1 = (t - s1) - y; s1 = t
            elif branch == 2:
                y = wl - c2; t = s2 + y; c2 = (t - s2) - y; s2 = t
            else:
                y = wl - c3; t = s3 + y; c3 = (t - s3) - y; s3 = t

    return np.array([s0, s1, s2, s3]), grad_arr


def gr_elements(double[:, ::1] probs, unsigned char[:, ::1] ann,
                double[:, ::1] k_hat, double mu, double sigma,
                double q1, double q2):
    cdef Py_ssize_t n_rows = probs.shape[0]
    cdef Py_ssize_t n_cols = probs.shape[1]
    grad_arr = np.zeros((n_rows, n_cols), dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr
    cdef double s0 = 0, s1 = 0, c0 = 0, c1 = 0
    cdef double p, k, w, lv, dv, bell, wl, y, t, dp
    cdef double inv2s2 = 1.0 / (2.0 * sigma * sigma)
    cdef Py_ssize_t n, i

    for n in range(n_rows):
        for i in range(n_cols):
            p = probs[n, i]
            if ann[n, i] == 1:
                dp = p * (1.0 - p)
                grad[n, i] = (-1.0 / p) * dp
                wl = -log(p)
                y = wl - c0; t = s0 + y; c0 = (t - s0) - y; s0 = t
            else:
                bell = exp(-((p - mu) * (p - mu)) * inv2s2)
                k = k_hat[n, i]
                w = bell
                lv = (1.0 - k) * (1.0 - pow(1.0 - p, q1)) / q1 \
                    + k * (1.0 - pow(p, q2)) / q2
                dv = (1.0 - k) * pow(1.0 - p, q1 - 1.0) - k * pow(p, q2 - 1.0)
                dp = p * (1.0 - p)
                grad[n, i] = w * dv * dp
                wl = w * lv
                y = wl - c1; t = s1 + y; c1 = (t - s1) - y; s1 = t

    return np.array([s0, s1]), grad_arr


def pool_rects(double[:, :, ::1] integral, double[:, ::1] rects):
    cdef Py_ssize_t h = integral.shape[0] - 1
    cdef Py_ssize_t w = integral.shape[1] - 1
    cdef Py_ssize_t n_classes = integral.shape[2]
    cdef Py_ssize_t n_rects = rects.shape[0]
    out_arr = np.empty((n_rects, n_classes), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t r, c
    cdef double v

    for r in range(n_rects):
        for c in range(n_classes):
            v = (_antideriv(integral, rects[r, 3], rects[r, 2], c, h, w)
                 - _antideriv(integral, rects[r, 1], rects[r, 2], c, h, w)
                 - _antideriv(integral, rects[r, 3], rects[r, 0], c, h, w)
                 + _antideriv(integral, rects[r, 1], rects[r, 0], c, h, w))
            out[r, c] = v if v > 0.0 else 0.0
    return out_arr


cdef inline double _antideriv(double[:, :, ::1] integral, double yy, double xx,
                              Py_ssize_t c, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t j = <Py_ssize_t>yy
    cdef Py_ssize_t i = <Py_ssize_t>xx
    if j > h - 1:
        j = h - 1
    if j < 0:
        j = 0
    if i > w - 1:
        i = w - 1
    if i < 0:
        i = 0
    cdef double a = yy - j
    cdef double b = xx - i
    return ((1.0 - a) * (1.0 - b) * integral[j, i, c]
            + a * (1.0 - b) * integral[j + 1, i, c]
            + (1.0 - a) * b * integral[j, i + 1, c]
            + a * b * integral[j + 1, i + 1, c])
