# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Signatures mirror :mod:`fedmac._pykernels` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expm1, log, log1p, fabs, copysign, isfinite

cnp.import_array()

cdef double LOG2 = 0.6931471805599453


cdef inline double _tanh(double z) noexcept nogil:
    # expm1 form: about twice as fast as libm tanh and within 1 ulp of it
    cdef double e = expm1(-2.0 * fabs(z))
    return copysign(-e / (2.0 + e), z)


def logcosh_excess(const double[::1] x, double rho):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double d
    for i in range(n):
        d = LOG2 - log1p(exp(-2.0 * fabs(x[i]) / rho))
        o[i] = d if d > 0.0 else 0.0
    return out


def tanh_scaled(const double[::1] x, double rho):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = _tanh(x[i] / rho)
    return out


def theta_step(double[::1] theta, const double[::1] grad, const double[::1] w,
               double lr, double gamma, double lam, double rho):
    cdef Py_ssize_t n = theta.shape[0], i
    cdef double v
    cdef bint ok = True
    if gamma != 0.0:
        for i in range(n):
            v = theta[i] - lr * (grad[i] + gamma * _tanh(theta[i] / rho) - lam * w[i])
            ok = ok and isfinite(v)
            theta[i] = v
    else:
        for i in range(n):
            v = theta[i] - lr * (grad[i] - lam * w[i])
            ok = ok and isfinite(v)
            theta[i] = v
    return ok


def prox_step(double[::1] x, const double[::1] grad, const double[::1] anchor,
              double lr, double gamma, double mu, double rho):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v, g
    cdef bint ok = True
    for i in range(n):
        g = grad[i]
        if gamma != 0.0:
            g = g + gamma * _tanh(x[i] / rho)
        if mu != 0.0:
            g = g + mu * (x[i] - anchor[i])
        v = x[i] - lr * g
        ok = ok and isfinite(v)
        x[i] = v
    return ok


def w_step(double[::1] w, const double[::1] theta, double lr, double lam,
           double gamma_w, double rho):
    cdef Py_ssize_t n = w.shape[0], i
    cdef double v, g
    cdef bint ok = True
    for i in range(n):
        g = lam * (w[i] - theta[i])
        if gamma_w != 0.0:
            g = g + gamma_w * _tanh(w[i] / rho)
        v = w[i] - lr * g
        ok = ok and isfinite(v)
        w[i] = v
    return ok


def softmax_xent(double[:, ::1] logits, const cnp.int64_t[::1] labels):
    """Mean cross-entropy; overwrites ``logits`` with d(loss)/d(logits)."""
    cdef Py_ssize_t B = logits.shape[0], C = logits.shape[1], r, c
    cdef double m, s, zy, total = 0.0, inv_b = 1.0 / B
    for r in range(B):
        m = logits[r, 0]
        for c in range(1, C):
            if logits[r, c] > m:
                m = logits[r, c]
        zy = logits[r, labels[r]] - m
        s = 0.0
        for c in range(C):
            logits[r, c] = exp(logits[r, c] - m)
            s += logits[r, c]
        total += log(s) - zy
        for c in range(C):
            logits[r, c] = logits[r, c] / s * inv_b
        logits[r, labels[r]] -= inv_b
    return total * inv_b


def ista_step(double[::1] theta, const double[::1] grad, double step, double thresh):
    cdef Py_ssize_t n = theta.shape[0], i
    cdef double v
    cdef bint ok = True
    for i in range(n):
        v = theta[i] - step * grad[i]
        if v > thresh:
            v = v - thresh
        elif v < -thresh:
            v = v + thresh
        else:
            v = 0.0
        ok = ok and isfinite(v)
        theta[i] = v
    return ok


def box_sq_dist(const double[:, ::1] g, const double[::1] lo, const double[::1] hi):
    cdef Py_ssize_t m = g.shape[0], n = g.shape[1], r, i
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] o = out
    cdef double acc, v
    for r in range(m):
        acc = 0.0
        for i in range(n):
            v = g[r, i]
            if v < lo[i]:
                acc += (lo[i] - v) * (lo[i] - v)
            elif v > hi[i]:
                acc += (v - hi[i]) * (v - hi[i])
        o[r] = acc
    return out
