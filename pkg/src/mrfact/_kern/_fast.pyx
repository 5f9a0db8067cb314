# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the fallback kernels (same signatures, same semantics)."""

import numpy as np

cimport cython
from libc.math cimport cos, fabs, fmod, sin, sqrt

cdef double GOLDEN = (sqrt(5.0) - 1.0) / 2.0
cdef double TWO_PI = 6.283185307179586476925286766559


def conjugate_inplace(double[:, ::1] a, const long[::1] idx, const double[:, ::1] core):
    """In-place U a U^T touching only the idx rows/columns, then symmetrize them."""
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t k = idx.shape[0]
    cdef Py_ssize_t r, s, col, i
    cdef double acc, t
    tmp_arr = np.empty((k, n), dtype=np.float64)
    cdef double[:, ::1] tmp = tmp_arr

    # rows: a[idx, :] = core @ a[idx, :]
    for r in range(k):
        for col in range(n):
            acc = 0.0
            for s in range(k):
                acc += core[r, s] * a[idx[s], col]
            tmp[r, col] = acc
    for r in range(k):
        for col in range(n):
            a[idx[r], col] = tmp[r, col]

    # columns: a[:, idx] = a[:, idx] @ core.T
    for col in range(n):
        for r in range(k):
            acc = 0.0
            for s in range(k):
                acc += a[col, idx[s]] * core[r, s]
            tmp[r, col] = acc
    for r in range(k):
        for col in range(n):
            a[col, idx[r]] = tmp[r, col]

    # symmetrize the touched cross-block
    for r in range(k):
        i = idx[r]
        for col in range(n):
            t = (a[i, col] + a[col, i]) / 2.0
            a[i, col] = t
            a[col, i] = t


def jacobi_eigh(a, double tol=1e-12, int max_sweeps=100):
    """Cyclic Jacobi eigensolver; see the fallback docstring for the contract."""
    A_arr = np.array(a, dtype=np.float64, copy=True, order="C")
    cdef double[:, ::1] A = A_arr
    cdef Py_ssize_t n = A.shape[0]
    V_arr = np.eye(n, dtype=np.float64)
    cdef double[:, ::1] V = V_arr
    if n == 1:
        return np.diagonal(A_arr).copy(), V_arr, 0

    cdef double total = 0.0, off2, thresh, skip
    cdef Py_ssize_t p, q, r
    cdef double apq, theta, t, c, s, xp, xq
    cdef int sweeps = 0

    for p in range(n):
        for q in range(n):
            total += A[p, q] * A[p, q]
    thresh = tol * (1.0 if sqrt(total) < 1.0 else sqrt(total))
    skip = thresh / n

    while True:
        off2 = 0.0
        for p in range(n):
            for q in range(n):
                if p != q:
                    off2 += A[p, q] * A[p, q]
        if sqrt(off2) <= thresh:
            break
        if sweeps >= max_sweeps:
            sweeps = max_sweeps + 1
            break
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if fabs(apq) <= skip:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = 1.0 / (fabs(theta) + sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                for r in range(n):
                    xp = A[r, p]
                    xq = A[r, q]
                    A[r, p] = c * xp - s * xq
                    A[r, q] = s * xp + c * xq
                for r in range(n):
                    xp = A[p, r]
                    xq = A[q, r]
                    A[p, r] = c * xp - s * xq
                    A[q, r] = s * xp + c * xq
                A[p, q] = 0.0
                A[q, p] = 0.0
                for r in range(n):
                    xp = V[r, p]
                    xq = V[r, q]
                    V[r, p] = c * xp - s * xq
                    V[r, q] = s * xp + c * xq

    w = np.diagonal(A_arr).copy()
    order = np.argsort(w, kind="stable")
    return w[order], V_arr[:, order], sweeps


cdef inline double _pair_energy(double th, double a12, double qd, double sb,
                                double db, double b12) nogil:
    cdef double two = 2.0 * th
    cdef double co = cos(two)
    cdef double si = sin(two)
    cdef double r21 = a12 * co + qd * si
    cdef double w22 = sb + db * co + b12 * si
    return 2.0 * r21 * r21 + 2.0 * w22


cdef void _angle_scan_one(double a12, double qd, double sb, double db, double b12,
                          const double[::1] thetas, int gs_iters,
                          double* out_th, double* out_e) nogil:
    cdef Py_ssize_t nth = thetas.shape[0]
    cdef double step = thetas[1] - thetas[0]
    cdef Py_ssize_t g, best_g = 0
    cdef double e, e0, th0, lo, hi, x1, x2, f1, f2, th

    e0 = _pair_energy(thetas[0], a12, qd, sb, db, b12)
    for g in range(1, nth):
        e = _pair_energy(thetas[g], a12, qd, sb, db, b12)
        if e < e0:
            e0 = e
            best_g = g
    th0 = thetas[best_g]

    lo = th0 - step
    hi = th0 + step
    for g in range(gs_iters):
        x1 = hi - GOLDEN * (hi - lo)
        x2 = lo + GOLDEN * (hi - lo)
        f1 = _pair_energy(x1, a12, qd, sb, db, b12)
        f2 = _pair_energy(x2, a12, qd, sb, db, b12)
        if f1 < f2:
            hi = x2
        else:
            lo = x1
    th = (lo + hi) / 2.0
    e = _pair_energy(th, a12, qd, sb, db, b12)
    if not e < e0:
        th = th0
        e = e0
    th = fmod(th, TWO_PI)
    if th < 0.0:
        th += TWO_PI
    out_th[0] = th
    out_e[0] = e


def angle_scan(a11, a12, a22, b11, b12, b22, thetas, int gs_iters=40):
    """Best rotation angle per instance: seed grid + golden-section polish."""
    scalar = (
        np.ndim(a11) == 0
        and np.ndim(a12) == 0
        and np.ndim(a22) == 0
        and np.ndim(b11) == 0
        and np.ndim(b12) == 0
        and np.ndim(b22) == 0
    )
    a11v, a12v, a22v, b11v, b12v, b22v = np.broadcast_arrays(
        np.atleast_1d(np.asarray(a11, dtype=np.float64)),
        np.atleast_1d(np.asarray(a12, dtype=np.float64)),
        np.atleast_1d(np.asarray(a22, dtype=np.float64)),
        np.atleast_1d(np.asarray(b11, dtype=np.float64)),
        np.atleast_1d(np.asarray(b12, dtype=np.float64)),
        np.atleast_1d(np.asarray(b22, dtype=np.float64)),
    )

    cdef const double[::1] A11 = np.ascontiguousarray(a11v.ravel())
    cdef const double[::1] A12 = np.ascontiguousarray(a12v.ravel())
    cdef const double[::1] A22 = np.ascontiguousarray(a22v.ravel())
    cdef const double[::1] B11 = np.ascontiguousarray(b11v.ravel())
    cdef const double[::1] B12 = np.ascontiguousarray(b12v.ravel())
    cdef const double[::1] B22 = np.ascontiguousarray(b22v.ravel())
    cdef const double[::1] TH = np.ascontiguousarray(np.asarray(thetas, dtype=np.float64))
    cdef Py_ssize_t m = A11.shape[0]

    th_out = np.empty(m, dtype=np.float64)
    e_out = np.empty(m, dtype=np.float64)
    cdef double[::1] THO = th_out
    cdef double[::1] EO = e_out
    cdef Py_ssize_t i
    cdef double qd, sb, db, tth, te

    for i in range(m):
        qd = (A11[i] - A22[i]) / 2.0
        sb = (B11[i] + B22[i]) / 2.0
        db = (B22[i] - B11[i]) / 2.0
        _angle_scan_one(A12[i], qd, sb, db, B12[i], TH, gs_iters, &tth, &te)
        THO[i] = tth
        EO[i] = te

    if scalar:
        return float(th_out[0]), float(e_out[0])
    return th_out.reshape(a11v.shape), e_out.reshape(a11v.shape)


def pair_scan_k2(const double[:, ::1] block, const double[:, ::1] gram, thetas, int gs_iters=40):
    """Exhaustive Givens pair scan; see the fallback docstring for the contract."""
    cdef const double[::1] TH = np.ascontiguousarray(np.asarray(thetas, dtype=np.float64))
    cdef Py_ssize_t m = block.shape[0]
    cdef Py_ssize_t i, j
    cdef Py_ssize_t bi = 0, bj = 1
    cdef double best_e = 0.0, best_th = 0.0
    cdef double qd, sb, db, tth, te
    cdef bint first = True

    for i in range(m - 1):
        for j in range(i + 1, m):
            qd = (block[i, i] - block[j, j]) / 2.0
            sb = (gram[i, i] + gram[j, j]) / 2.0
            db = (gram[j, j] - gram[i, i]) / 2.0
            _angle_scan_one(block[i, j], qd, sb, db, gram[i, j], TH, gs_iters, &tth, &te)
            if first or te < best_e:
                first = False
                best_e = te
                best_th = tth
                bi = i
                bj = j
    return int(bi), int(bj), float(best_th), float(best_e)
