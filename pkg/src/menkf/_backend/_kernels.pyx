# cython: language_level=3
"""Compiled implementations of the hot numerical kernels.

Mirrors ``kernels_py`` operation for operation (same iteration schemes,
residuals, and status codes); see that module's docstring for the shared
array conventions.  Matrix products go through BLAS dgemm on row-major
data; the short wraparound stencils are plain C loops.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, isfinite

from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

BACKEND_NAME = "cython"


cdef inline void _gemm_rm(int m, int k, int n, double alpha,
                          double* A, int lda, double* B, int ldb,
                          double beta, double* C, int ldc) noexcept nogil:
    """Row-major C(m,n) = alpha * A(m,k) @ B(k,n) + beta * C.

    ld* are row strides (>= the logical row length), so strided row-major
    submatrices can be multiplied without copying.
    """
    cdef char t = b'n'
    if m == 0 or n == 0 or k == 0:
        return
    dgemm(&t, &t, &n, &m, &k, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)


cdef inline void _slow_rhs_c(const double[:, :] X, const double[:, :] H, double[:, ::1] out,
                             double delta, double forcing,
                             bint conservative) noexcept nogil:
    """Slow-field tendency with h frozen; out[i, l] over an (m, n) batch."""
    cdef Py_ssize_t m = X.shape[0], n = X.shape[1], i, l, ip1, im1, im2
    cdef double adv, coup, val
    for i in range(m):
        for l in range(n):
            ip1 = l + 1 if l + 1 < n else 0
            im1 = l - 1 if l >= 1 else n - 1
            im2 = l - 2 if l >= 2 else l - 2 + n
            adv = (X[i, ip1] - X[i, im2]) * X[i, im1]
            coup = X[i, im1] * H[i, ip1] - X[i, im2] * H[i, im1]
            val = (1.0 - delta) * adv + delta * coup
            if not conservative:
                val = val - X[i, l] + forcing
            out[i, l] = val


def tendency_batch(Z, Py_ssize_t n, double eps, double alpha, double delta,
                   double gamma, double forcing, bint conservative):
    """Full slow-fast tendency for an (m, 3n) batch."""
    cdef const double[:, ::1] Zv = np.ascontiguousarray(Z, dtype=np.float64)
    cdef Py_ssize_t m = Zv.shape[0], i, l, ip1, im1
    out_arr = np.empty((m, 3 * n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double eps2 = eps * eps, a2 = alpha * alpha, lap
    _slow_rhs_c(Zv[:, :n], Zv[:, n:2 * n], out[:, :n], delta, forcing,
                conservative)
    for i in range(m):
        for l in range(n):
            ip1 = l + 1 if l + 1 < n else 0
            im1 = l - 1 if l >= 1 else n - 1
            lap = Zv[i, n + ip1] - 2.0 * Zv[i, n + l] + Zv[i, n + im1]
            out[i, n + l] = Zv[i, 2 * n + l]
            out[i, 2 * n + l] = (Zv[i, l] - Zv[i, n + l] + a2 * lap) / eps2 \
                - gamma * Zv[i, 2 * n + l]
    return out_arr


cdef inline double _max_abs_diff(double[:, ::1] A, double[:, ::1] B) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double r = 0.0, d
    for i in range(A.shape[0]):
        for j in range(A.shape[1]):
            d = fabs(A[i, j] - B[i, j])
            if d > r:
                r = d
    return r


def step_strang_batch(Z, M1T, M2T, FR, Py_ssize_t n, double dt, double delta,
                      double forcing, bint conservative, double fp_tol,
                      int fp_max_iter, Py_ssize_t n_steps=1):
    """Strang-split step(s): fast half / implicit-midpoint slow / fast half.

    Same contract as the NumPy reference: returns (Z_new, status, residual),
    status 1 when the slow-stage fixed point misses fp_tol.
    """
    Zc = np.array(Z, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] Zv = Zc
    cdef const double[:, ::1] M1 = np.ascontiguousarray(M1T, dtype=np.float64)
    cdef const double[:, ::1] M2 = np.ascontiguousarray(M2T, dtype=np.float64)
    cdef Py_ssize_t m = Zv.shape[0], n2 = 2 * n, i, l, step, it
    cdef bint has_fr = FR is not None
    cdef const double[:, ::1] gx = None
    cdef const double[:, ::1] ghu = None
    if has_fr:
        FRc = np.ascontiguousarray(FR, dtype=np.float64)
        gx = np.ascontiguousarray(FRc[:, :n])
        ghu = np.ascontiguousarray(FRc[:, n:])

    cdef double[:, ::1] W = np.empty((m, n2))
    cdef double[:, ::1] W2 = np.empty((m, n2))
    cdef double[:, ::1] Xb = np.empty((m, n))
    cdef double[:, ::1] Hh = np.empty((m, n))
    cdef double[:, ::1] Xn = np.empty((m, n))
    cdef double[:, ::1] Xnext = np.empty((m, n))
    cdef double[:, ::1] rhs = np.empty((m, n))
    cdef double[:, ::1] Xmid = np.empty((m, n))
    cdef double resid = 0.0
    cdef bint converged

    with nogil:
        for step in range(n_steps):
            for i in range(m):
                for l in range(n):
                    Xb[i, l] = Zv[i, l]
            # first fast half: W = Z[:, n:] @ M1T + X @ M2T
            _gemm_rm(<int>m, <int>n2, <int>n2, 1.0, &Zv[0, n], <int>(3 * n),
                     <double*>&M1[0, 0], <int>n2, 0.0, &W[0, 0], <int>n2)
            _gemm_rm(<int>m, <int>n, <int>n2, 1.0, &Xb[0, 0], <int>n,
                     <double*>&M2[0, 0], <int>n2, 1.0, &W[0, 0], <int>n2)
            for i in range(m):
                for l in range(n):
                    Hh[i, l] = W[i, l]

            # slow stage: implicit midpoint on x with h frozen
            _slow_rhs_c(Xb, Hh, rhs, delta, forcing, conservative)
            if has_fr:
                for i in range(m):
                    for l in range(n):
                        rhs[i, l] = rhs[i, l] + gx[i, l]
            for i in range(m):
                for l in range(n):
                    Xn[i, l] = Xb[i, l] + dt * rhs[i, l]
            converged = False
            for it in range(fp_max_iter):
                for i in range(m):
                    for l in range(n):
                        Xmid[i, l] = 0.5 * (Xb[i, l] + Xn[i, l])
                _slow_rhs_c(Xmid, Hh, rhs, delta, forcing, conservative)
                if has_fr:
                    for i in range(m):
                        for l in range(n):
                            rhs[i, l] = rhs[i, l] + gx[i, l]
                for i in range(m):
                    for l in range(n):
                        Xnext[i, l] = Xb[i, l] + dt * rhs[i, l]
                resid = _max_abs_diff(Xnext, Xn)
                for i in range(m):
                    for l in range(n):
                        Xn[i, l] = Xnext[i, l]
                if resid < fp_tol:
                    converged = True
                    break
            if not converged:
                with gil:
                    return Zc, 1, resid

            # second fast half (forcing on (h, u) enters in between)
            if has_fr:
                for i in range(m):
                    for l in range(n2):
                        W[i, l] = W[i, l] + dt * ghu[i, l]
            _gemm_rm(<int>m, <int>n2, <int>n2, 1.0, &W[0, 0], <int>n2,
                     <double*>&M1[0, 0], <int>n2, 0.0, &W2[0, 0], <int>n2)
            _gemm_rm(<int>m, <int>n, <int>n2, 1.0, &Xn[0, 0], <int>n,
                     <double*>&M2[0, 0], <int>n2, 1.0, &W2[0, 0], <int>n2)
            for i in range(m):
                for l in range(n):
                    Zv[i, l] = Xn[i, l]
                for l in range(n2):
                    Zv[i, n + l] = W2[i, l]
    return Zc, 0, resid


def step_midpoint_batch(Z, S1T, S2T, S2xT, FR, Py_ssize_t n, double delta,
                        double fp_tol, int fp_max_iter, Py_ssize_t n_steps=1):
    """Implicit midpoint step(s) with the stiff linear part solved directly.

    Same linearly-implicit fixed-point map as the NumPy reference; only the
    mild nonlinearity N (advection + coupling) is iterated.
    """
    Zc = np.array(Z, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] Zv = Zc
    cdef const double[:, ::1] S1 = np.ascontiguousarray(S1T, dtype=np.float64)
    cdef const double[:, ::1] S2x = np.ascontiguousarray(S2xT, dtype=np.float64)
    cdef Py_ssize_t m = Zv.shape[0], d = Zv.shape[1], i, l, step, it
    cdef double[:, ::1] base = np.empty((m, d))
    cdef double[:, ::1] Zn = np.empty((m, d))
    cdef double[:, ::1] Znext = np.empty((m, d))
    cdef double[:, ::1] Zmid = np.empty((m, d))
    cdef double[:, ::1] nl = np.empty((m, n))
    cdef double resid = 0.0
    cdef bint converged

    cdef bint has_fr = FR is not None
    frs2 = None
    if has_fr:
        # constant over the step(s): fold FR @ S2T once
        frs2 = np.ascontiguousarray(FR, dtype=np.float64) @ \
            np.ascontiguousarray(S2T, dtype=np.float64)
    cdef const double[:, ::1] FRS2 = frs2 if has_fr else None

    with nogil:
        for step in range(n_steps):
            _gemm_rm(<int>m, <int>d, <int>d, 1.0, &Zv[0, 0], <int>d,
                     <double*>&S1[0, 0], <int>d, 0.0, &base[0, 0], <int>d)
            if has_fr:
                for i in range(m):
                    for l in range(d):
                        base[i, l] = base[i, l] + FRS2[i, l]
            _slow_rhs_c(Zv[:, :n], Zv[:, n:2 * n], nl, delta, 0.0, True)
            for i in range(m):
                for l in range(d):
                    Zn[i, l] = base[i, l]
            _gemm_rm(<int>m, <int>n, <int>d, 1.0, &nl[0, 0], <int>n,
                     <double*>&S2x[0, 0], <int>d, 1.0, &Zn[0, 0], <int>d)
            converged = False
            for it in range(fp_max_iter):
                for i in range(m):
                    for l in range(d):
                        Zmid[i, l] = 0.5 * (Zv[i, l] + Zn[i, l])
                _slow_rhs_c(Zmid[:, :n], Zmid[:, n:2 * n], nl, delta, 0.0, True)
                for i in range(m):
                    for l in range(d):
                        Znext[i, l] = base[i, l]
                _gemm_rm(<int>m, <int>n, <int>d, 1.0, &nl[0, 0], <int>n,
                         <double*>&S2x[0, 0], <int>d, 1.0, &Znext[0, 0], <int>d)
                resid = _max_abs_diff(Znext, Zn)
                for i in range(m):
                    for l in range(d):
                        Zn[i, l] = Znext[i, l]
                if resid < fp_tol:
                    converged = True
                    break
            if not converged:
                with gil:
                    return Zc, 1, resid
            for i in range(m):
                for l in range(d):
                    Zv[i, l] = Zn[i, l]
    return Zc, 0, resid


cdef int _increment_c(const double[:, ::1] X, const Py_ssize_t[::1] rows,
                      const Py_ssize_t[::1] cols, const double[::1] vals,
                      const double[::1] rinv, double a_sum,
                      const double[::1] yw, const double[:, :] Csub, bint has_taper,
                      double[:, ::1] W, double[::1] wbar, double[:, ::1] V,
                      double[::1] zbar, double[:, ::1] dev,
                      double[:, ::1] Qt, double[:, ::1] out) noexcept nogil:
    """out = -(C o P) H^T g with g the observation-space potential gradient.

    Scratch buffers: W,V (m,p), wbar (p), zbar (d), dev (m,d), Qt (nnz,d).
    """
    cdef Py_ssize_t m = X.shape[0], d = X.shape[1], p = rinv.shape[0]
    cdef Py_ssize_t nnz = vals.shape[0], i, l, r, s, c
    cdef double acc, v, a

    for i in range(m):
        for r in range(p):
            W[i, r] = 0.0
    for s in range(nnz):
        r = rows[s]; c = cols[s]; v = vals[s]
        for i in range(m):
            W[i, r] += X[i, c] * v
    for r in range(p):
        acc = 0.0
        for i in range(m):
            acc += W[i, r]
        wbar[r] = acc / m
    for i in range(m):
        for r in range(p):
            V[i, r] = 0.5 * rinv[r] * (a_sum * (W[i, r] + wbar[r]) - 2.0 * yw[r])

    for l in range(d):
        acc = 0.0
        for i in range(m):
            acc += X[i, l]
        zbar[l] = acc / m
    for i in range(m):
        for l in range(d):
            dev[i, l] = X[i, l] - zbar[l]

    # Qt[s, :] = vals[s]/(m-1) * sum_i dev[i, cols[s]] * dev[i, :], tapered
    for s in range(nnz):
        c = cols[s]
        v = vals[s] / (m - 1)
        for l in range(d):
            Qt[s, l] = 0.0
        for i in range(m):
            a = v * dev[i, c]
            for l in range(d):
                Qt[s, l] += a * dev[i, l]
        if has_taper:
            for l in range(d):
                Qt[s, l] *= Csub[l, s]

    for i in range(m):
        for l in range(d):
            out[i, l] = 0.0
        for s in range(nnz):
            a = V[i, rows[s]]
            for l in range(d):
                out[i, l] -= a * Qt[s, l]
    return 0


cdef class _IncrementScratch:
    cdef double[:, ::1] W, V, dev, Qt, out
    cdef double[::1] wbar, zbar

    def __cinit__(self, Py_ssize_t m, Py_ssize_t d, Py_ssize_t p, Py_ssize_t nnz):
        self.W = np.empty((m, p))
        self.V = np.empty((m, p))
        self.dev = np.empty((m, d))
        self.Qt = np.empty((nnz, d))
        self.out = np.empty((m, d))
        self.wbar = np.empty(p)
        self.zbar = np.empty(d)


def analysis_increment(X, rows, cols, vals, rinv, double a_sum, yw, Csub):
    """Localized Kalman-gradient increment; see the NumPy reference."""
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const Py_ssize_t[::1] rv = np.ascontiguousarray(rows, dtype=np.intp)
    cdef const Py_ssize_t[::1] cv = np.ascontiguousarray(cols, dtype=np.intp)
    cdef const double[::1] vv = np.ascontiguousarray(vals, dtype=np.float64)
    cdef const double[::1] ri = np.ascontiguousarray(rinv, dtype=np.float64)
    cdef const double[::1] yv = np.ascontiguousarray(yw, dtype=np.float64)
    cdef bint has_taper = Csub is not None
    cdef const double[:, :] Cs = Csub if has_taper else Xv[:0, :0]
    cdef Py_ssize_t m = Xv.shape[0], d = Xv.shape[1]
    out_arr = np.empty((m, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    scratch = _IncrementScratch(m, d, ri.shape[0], vv.shape[0])
    cdef _IncrementScratch sc = scratch
    with nogil:
        _increment_c(Xv, rv, cv, vv, ri, a_sum, yv, Cs, has_taper,
                     sc.W, sc.wbar, sc.V, sc.zbar, sc.dev, sc.Qt, out)
    return out_arr


def analysis_flow(X, rows, cols, vals, rinv, y, Csub, Py_ssize_t n_substeps,
                  double ds):
    """Explicit-midpoint integration of the ensemble analysis flow.

    Returns (X_final, status); status 1 on a non-finite state.
    """
    Xc = np.array(X, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] Xv = Xc
    cdef const Py_ssize_t[::1] rv = np.ascontiguousarray(rows, dtype=np.intp)
    cdef const Py_ssize_t[::1] cv = np.ascontiguousarray(cols, dtype=np.intp)
    cdef const double[::1] vv = np.ascontiguousarray(vals, dtype=np.float64)
    cdef const double[::1] ri = np.ascontiguousarray(rinv, dtype=np.float64)
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef bint has_taper = Csub is not None
    cdef const double[:, :] Cs = Csub if has_taper else Xv[:0, :0]
    cdef Py_ssize_t m = Xv.shape[0], d = Xv.shape[1], i, l, k
    cdef double[:, ::1] Xs = np.empty((m, d))
    cdef double[:, ::1] D = np.empty((m, d))
    scratch = _IncrementScratch(m, d, ri.shape[0], vv.shape[0])
    cdef _IncrementScratch sc = scratch
    cdef int bad = 0

    with nogil:
        for k in range(n_substeps):
            _increment_c(Xv, rv, cv, vv, ri, 1.0, yv, Cs, has_taper,
                         sc.W, sc.wbar, sc.V, sc.zbar, sc.dev, sc.Qt, D)
            for i in range(m):
                for l in range(d):
                    Xs[i, l] = Xv[i, l] + 0.5 * ds * D[i, l]
            _increment_c(Xs, rv, cv, vv, ri, 1.0, yv, Cs, has_taper,
                         sc.W, sc.wbar, sc.V, sc.zbar, sc.dev, sc.Qt, D)
            for i in range(m):
                for l in range(d):
                    Xv[i, l] = Xv[i, l] + ds * D[i, l]
                    if not isfinite(Xv[i, l]):
                        bad = 1
            if bad:
                break
    return Xc, (1 if bad else 0)
