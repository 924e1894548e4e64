# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()


def quadform_by_component(const double[:, ::1] values, const cnp.intp_t[::1] comp,
                          const double[:, ::1] means, const double[:, ::1] chol):
    cdef Py_ssize_t D = values.shape[0], p = values.shape[1]
    cdef Py_ssize_t d, i, k
    cdef cnp.intp_t g
    out = np.empty(D)
    cdef double[::1] q = out
    cdef double[::1] z = np.empty(p)
    cdef double acc, s
    with nogil:
        for d in range(D):
            g = comp[d]
            acc = 0.0
            for i in range(p):
                s = values[d, i] - means[g, i]
                for k in range(i):
                    s -= chol[i, k] * z[k]
                s /= chol[i, i]
                z[i] = s
                acc += s * s
            q[d] = acc
    return out


def segment_softmax(const double[::1] logw, const cnp.intp_t[::1] ptr):
    cdef Py_ssize_t S = ptr.shape[0] - 1
    cdef Py_ssize_t s, d
    cdef double mx, tot
    out = np.empty(logw.shape[0])
    cdef double[::1] w = out
    cdef Py_ssize_t bad = -1
    with nogil:
        for s in range(S):
            mx = -INFINITY
            for d in range(ptr[s], ptr[s + 1]):
                if logw[d] > mx:
                    mx = logw[d]
            if mx == -INFINITY or mx != mx:
                bad = s
                break
            tot = 0.0
            for d in range(ptr[s], ptr[s + 1]):
                w[d] = exp(logw[d] - mx)
                tot += w[d]
            tot = 1.0 / tot
            for d in range(ptr[s], ptr[s + 1]):
                w[d] *= tot
    return out, bad


def weighted_component_stats(const double[:, ::1] values, const cnp.intp_t[::1] comp,
                             const double[::1] weights, Py_ssize_t G):
    cdef Py_ssize_t D = values.shape[0], p = values.shape[1]
    cdef Py_ssize_t d, i, j
    cdef cnp.intp_t g
    cdef double wd
    mass_a = np.zeros(G)
    means_a = np.zeros((G, p))
    scatter_a = np.zeros((p, p))
    cdef double[::1] mass = mass_a
    cdef double[:, ::1] mu = means_a
    cdef double[:, ::1] sc = scatter_a
    cdef double[::1] r = np.empty(p)
    with nogil:
        for d in range(D):
            g = comp[d]
            wd = weights[d]
            mass[g] += wd
            for i in range(p):
                mu[g, i] += wd * values[d, i]
        for g in range(G):
            for i in range(p):
                mu[g, i] = mu[g, i] / mass[g]
        for d in range(D):
            g = comp[d]
            wd = weights[d]
            for i in range(p):
                r[i] = values[d, i] - mu[g, i]
            for i in range(p):
                for j in range(i + 1):
                    sc[i, j] += wd * r[i] * r[j]
        for i in range(p):
            for j in range(i):
                sc[j, i] = sc[i, j]
    return mass_a, means_a, scatter_a
