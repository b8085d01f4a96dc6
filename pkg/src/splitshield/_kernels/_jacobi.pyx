# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled one-sided Jacobi sweep; semantics match _jacobi_py.jacobi_sweep."""

from libc.math cimport fabs, sqrt


def jacobi_sweep(double[:, ::1] bt, double[:, ::1] vt, double thresh):
    cdef Py_ssize_t q = bt.shape[0]
    cdef Py_ssize_t p = bt.shape[1]
    cdef Py_ssize_t qv = vt.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double app, aqq, apq, zeta, t, c, s, xi, yi
    cdef int rotations = 0

    for i in range(q - 1):
        for j in range(i + 1, q):
            apq = 0.0
            for k in range(p):
                apq += bt[i, k] * bt[j, k]
            if fabs(apq) <= thresh:
                continue
            app = 0.0
            aqq = 0.0
            for k in range(p):
                app += bt[i, k] * bt[i, k]
                aqq += bt[j, k] * bt[j, k]
            zeta = (aqq - app) / (2.0 * apq)
            if zeta >= 0.0:
                t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
            else:
                t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
            c = 1.0 / sqrt(1.0 + t * t)
            s = c * t
            for k in range(p):
                xi = bt[i, k]
                yi = bt[j, k]
                bt[i, k] = c * xi - s * yi
                bt[j, k] = s * xi + c * yi
            for k in range(qv):
                xi = vt[i, k]
                yi = vt[j, k]
                vt[i, k] = c * xi - s * yi
                vt[j, k] = s * xi + c * yi
            rotations += 1
    return rotations
