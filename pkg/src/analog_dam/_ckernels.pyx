# cython: language_level=3
"""Compiled fixed-step integrator for the two-layer DenseAM flow.

Mirrors ``_pykernels.advance`` (same update order, same convergence test) up
to floating-point summation order; see that module for the contract.
"""
import numpy as np
from libc.math cimport exp, fabs, isfinite

DEF RUNNING = 0
DEF CONVERGED = 1
DEF NONFINITE = 2


cdef void _rhs(const double[:, ::1] xi, const double[::1] a, const double[::1] b,
               double tau_h, double beta, int vis_kind, Py_ssize_t n_soft,
               int rest_kind, const double[::1] v, double[::1] h,
               const double[::1] free, double[::1] g, double[::1] f,
               double[::1] rv, double[::1] rh) noexcept nogil:
    cdef Py_ssize_t n_h = xi.shape[0], n_v = xi.shape[1]
    cdef Py_ssize_t mu, i
    cdef double acc, m, s, p0, p1, p2, p3

    for i in range(n_v):
        if vis_kind == 1 and v[i] < 0.0:
            g[i] = 0.0
        else:
            g[i] = v[i]

    for mu in range(n_h):
        # four partial sums break the add latency chain
        p0 = 0.0
        p1 = 0.0
        p2 = 0.0
        p3 = 0.0
        i = 0
        while i + 4 <= n_v:
            p0 = p0 + xi[mu, i] * g[i]
            p1 = p1 + xi[mu, i + 1] * g[i + 1]
            p2 = p2 + xi[mu, i + 2] * g[i + 2]
            p3 = p3 + xi[mu, i + 3] * g[i + 3]
            i = i + 4
        while i < n_v:
            p0 = p0 + xi[mu, i] * g[i]
            i = i + 1
        acc = b[mu] + ((p0 + p1) + (p2 + p3))
        if tau_h == 0.0:
            h[mu] = acc
            rh[mu] = 0.0
        else:
            rh[mu] = acc - h[mu]

    if n_soft > 0:
        m = beta * h[0]
        for mu in range(1, n_soft):
            if beta * h[mu] > m:
                m = beta * h[mu]
        s = 0.0
        for mu in range(n_soft):
            f[mu] = exp(beta * h[mu] - m)
            s = s + f[mu]
        for mu in range(n_soft):
            f[mu] = f[mu] / s
    for mu in range(n_soft, n_h):
        if rest_kind == 1 and h[mu] < 0.0:
            f[mu] = 0.0
        else:
            f[mu] = h[mu]

    # row-major sweep over xi; each rv[i] still sums over mu in order
    for i in range(n_v):
        rv[i] = a[i] - v[i]
    for mu in range(n_h):
        s = f[mu]
        for i in range(n_v):
            rv[i] = rv[i] + xi[mu, i] * s
    for i in range(n_v):
        rv[i] = rv[i] * free[i]


def advance(const double[:, ::1] xi, const double[::1] a, const double[::1] b,
            double tau_v, double tau_h, double beta, int vis_kind,
            Py_ssize_t n_soft, int rest_kind, double[::1] v, double[::1] h,
            free_mask, double dt, Py_ssize_t n_steps, int method, double conv_eps):
    cdef Py_ssize_t n_h = xi.shape[0], n_v = xi.shape[1]
    cdef double[::1] free = np.ascontiguousarray(free_mask, dtype=np.float64)
    cdef double[::1] g = np.empty(n_v)
    cdef double[::1] f = np.empty(n_h)
    cdef double[:, ::1] kv = np.zeros((4, n_v))
    cdef double[:, ::1] kh = np.zeros((4, n_h))
    cdef double[::1] v0 = np.empty(n_v)
    cdef double[::1] h0 = np.empty(n_h)
    cdef double[::1] vs = np.empty(n_v)
    cdef double[::1] hs = np.empty(n_h)
    cdef bint full = tau_h != 0.0
    cdef Py_ssize_t step, i, mu, k
    cdef double worst, cv, ch, frac
    cdef bint ok
    cdef int status = RUNNING
    cdef Py_ssize_t done = n_steps

    with nogil:
        for step in range(n_steps):
            _rhs(xi, a, b, tau_h, beta, vis_kind, n_soft, rest_kind, v, h, free,
                 g, f, kv[0], kh[0])
            worst = 0.0
            for i in range(n_v):
                if fabs(kv[0, i]) > worst:
                    worst = fabs(kv[0, i])
            if full:
                for mu in range(n_h):
                    if fabs(kh[0, mu]) > worst:
                        worst = fabs(kh[0, mu])
            if worst <= conv_eps:
                status = CONVERGED
                done = step
                break

            cv = dt / tau_v
            ch = dt / tau_h if full else 0.0
            if method == 0:
                for i in range(n_v):
                    v[i] = v[i] + cv * kv[0, i]
                if full:
                    for mu in range(n_h):
                        h[mu] = h[mu] + ch * kh[0, mu]
            else:
                for i in range(n_v):
                    v0[i] = v[i]
                for mu in range(n_h):
                    h0[mu] = h[mu]
                for k in range(1, 4):
                    frac = 1.0 if k == 3 else 0.5
                    for i in range(n_v):
                        vs[i] = v0[i] + frac * cv * kv[k - 1, i]
                    for mu in range(n_h):
                        if full:
                            hs[mu] = h0[mu] + frac * ch * kh[k - 1, mu]
                        else:
                            hs[mu] = h0[mu]
                    _rhs(xi, a, b, tau_h, beta, vis_kind, n_soft, rest_kind, vs, hs,
                         free, g, f, kv[k], kh[k])
                for i in range(n_v):
                    v[i] = v0[i] + (cv / 6.0) * (kv[0, i] + 2.0 * kv[1, i] + 2.0 * kv[2, i] + kv[3, i])
                if full:
                    for mu in range(n_h):
                        h[mu] = h0[mu] + (ch / 6.0) * (kh[0, mu] + 2.0 * kh[1, mu] + 2.0 * kh[2, mu] + kh[3, mu])

            ok = True
            for i in range(n_v):
                if not isfinite(v[i]):
                    ok = False
            for mu in range(n_h):
                if not isfinite(h[mu]):
                    ok = False
            if not ok:
                status = NONFINITE
                done = step
                break

        if status == RUNNING and not full:
            _rhs(xi, a, b, tau_h, beta, vis_kind, n_soft, rest_kind, v, h, free,
                 g, f, kv[0], kh[0])
    return done, status
