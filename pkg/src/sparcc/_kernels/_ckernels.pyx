# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner kernels; see ``_pykernels`` for the reference semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()

cdef double INV_SQRT_2PI = 0.3989422804014327
cdef double HALF_LOG_2PI = 0.9189385332046727


def assemble_fredholm(const double[::1] means, const double[::1] masses, const double[::1] interval_mass,
                      const double[:, ::1] design, double sigma, const double[::1] gh_t,
                      const double[::1] gh_w,
                      double floor=1e-300):
    cdef Py_ssize_t m = means.shape[0]
    cdef Py_ssize_t K = gh_t.shape[0]
    cdef Py_ssize_t p1 = design.shape[1]
    cdef Py_ssize_t p = p1 + 1
    cdef Py_ssize_t j, q, k, s, c
    cdef double inv_s = 1.0 / sigma
    cdef double inv_s2 = inv_s * inv_s
    cdef double y, r, wq, h, rat, e
    cdef long underflows = 0

    Mt_arr = np.zeros((m, m))
    B_arr = np.zeros((p, m))
    cdef double[:, ::1] Mt = Mt_arr
    cdef double[:, ::1] B = B_arr
    f_arr = np.empty(m)
    D_arr = np.empty(m + 1)
    N_arr = np.empty((m + 1, p))
    H_arr = np.empty(m)
    cdef double[::1] f = f_arr
    cdef double[::1] D = D_arr
    cdef double[:, ::1] N = N_arr
    cdef double[::1] H = H_arr

    for j in range(m):
        for q in range(K):
            y = means[j] + sigma * gh_t[q]
            wq = gh_w[q]
            for k in range(m):
                r = y - means[k]
                f[k] = INV_SQRT_2PI * inv_s * exp(-0.5 * r * r * inv_s2)
            # reverse cumulative sums over k >= s, only s <= j is needed
            D[m] = 0.0
            for c in range(p):
                N[m, c] = 0.0
            for k in range(m - 1, -1, -1):
                e = masses[k] * f[k]
                D[k] = D[k + 1] + e
                r = (y - means[k]) * inv_s2
                for c in range(p1):
                    N[k, c] = N[k + 1, c] + e * r * design[k, c]
                r = y - means[k]
                N[k, p1] = N[k + 1, p1] + e * (-0.5 + 0.5 * r * r * inv_s2)
            h = 0.0
            for s in range(j + 1):
                if interval_mass[s] > 0.0:
                    if D[s] < floor:
                        underflows += 1
                        rat = interval_mass[s] / floor
                    else:
                        rat = interval_mass[s] / D[s]
                    h += rat
                    for c in range(p):
                        B[c, j] += wq * rat * N[s, c]
                H[s] = h
            # Mt[j, k] += w_q f_k H[min(j, k)]
            for k in range(m):
                if k < j:
                    Mt[j, k] += wq * f[k] * H[k]
                else:
                    Mt[j, k] += wq * f[k] * H[j]

    M_arr = 0.5 * (Mt_arr + Mt_arr.T)
    return M_arr, B_arr, int(underflows)


def tail_weights(const double[::1] y, const double[::1] w, const double[::1] nodes,
                 const double[::1] log_masses, const double[::1] means, double sigma):
    cdef Py_ssize_t n = y.shape[0]
    cdef Py_ssize_t m = nodes.shape[0]
    cdef Py_ssize_t i, j, first
    cdef double top, r, tot, v
    cdef double inv_s = 1.0 / sigma
    cdef double log_sigma = log(sigma)
    W_arr = np.zeros((n, m))
    L_arr = np.empty(n)
    cdef double[:, ::1] W = W_arr
    cdef double[::1] L = L_arr
    for i in range(n):
        first = 0
        while first < m and nodes[first] <= w[i]:
            first += 1
        top = -INFINITY
        for j in range(first, m):
            r = (y[i] - means[j]) * inv_s
            v = log_masses[j] - 0.5 * r * r
            W[i, j] = v
            if v > top:
                top = v
        if top == -INFINITY:
            for j in range(first, m):
                W[i, j] = 0.0
            L[i] = -INFINITY
            continue
        tot = 0.0
        for j in range(first, m):
            v = exp(W[i, j] - top)
            W[i, j] = v
            tot += v
        for j in range(first, m):
            W[i, j] /= tot
        L[i] = top + log(tot) - log_sigma - HALF_LOG_2PI
    return W_arr, L_arr
