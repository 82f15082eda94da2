# cython: language_level=3
"""Compiled WMMSE kernel.

Mirrors ``_wmmse_py.solve`` step by step with BLAS products and the LAPACK
``zheevd`` eigendecomposition called directly, so an outer iteration does no
Python-level work.
"""
import numpy as np

from libc.math cimport sqrt, fabs, log2, isfinite
from scipy.linalg.cython_blas cimport zgemm, zherk
from scipy.linalg.cython_lapack cimport zheevd

from eqprecoder._wmmse_py import BisectionError, NULL_EIG_RTOL, MAX_GROWTH_STEPS, MAX_BISECT_STEPS

cdef double _NULL_RTOL = NULL_EIG_RTOL
cdef int _MAX_GROW = MAX_GROWTH_STEPS
cdef int _MAX_BISECT = MAX_BISECT_STEPS
cdef double _EPS = np.finfo(float).eps


cdef inline double _abs2(double complex z) noexcept nogil:
    return z.real * z.real + z.imag * z.imag


cdef double _power(const double[::1] lam, const double[::1] c, int m, double mu) noexcept nogil:
    cdef double s = 0.0, d
    cdef int i
    for i in range(m):
        d = lam[i] + mu
        s += c[i] / (d * d)
    return s


cdef int _bisect(const double[::1] lam, const double[::1] c, int m, double p_m,
                 double tol, double growth, double* mu_out, double* diag) noexcept nogil:
    """0: ok, 1: bracket failure, 2: non-monotone. ``diag`` gets 4 diagnostics."""
    cdef double p_lo, p_hi, p, lo, hi, mid, total = 0.0, lam_max = 0.0, scale
    cdef int i, steps = 0
    mu_out[0] = 0.0
    if m == 0:
        return 0
    p_lo = _power(lam, c, m, 0.0)
    if p_lo <= p_m:
        return 0
    for i in range(m):
        total += c[i]
        if lam[i] > lam_max:
            lam_max = lam[i]
    if not total > 0.0:
        diag[0] = 0.0; diag[1] = p_lo; diag[2] = 0.0; diag[3] = total
        return 2
    scale = sqrt(total / p_m)
    lo = 0.0
    hi = scale - lam_max
    if hi < 1e-3 * scale:
        hi = 1e-3 * scale
    p_hi = _power(lam, c, m, hi)
    while p_hi > p_m:
        if p_hi > p_lo or not isfinite(p_hi):
            diag[0] = lo; diag[1] = p_lo; diag[2] = hi; diag[3] = p_hi
            return 2
        lo = hi
        p_lo = p_hi
        hi *= growth
        p_hi = _power(lam, c, m, hi)
        steps += 1
        if steps > _MAX_GROW:
            diag[0] = lo; diag[1] = p_lo; diag[2] = hi; diag[3] = p_hi
            return 1
    if fabs(p_hi - p_m) <= tol * p_m:
        mu_out[0] = hi
        return 0
    for i in range(_MAX_BISECT):
        mid = 0.5 * (lo + hi)
        p = _power(lam, c, m, mid)
        if not (p_hi <= p and p <= p_lo):
            diag[0] = lo; diag[1] = p_lo; diag[2] = mid; diag[3] = p
            return 2
        if fabs(p - p_m) <= tol * p_m:
            mu_out[0] = mid
            return 0
        if p > p_m:
            lo = mid
            p_lo = p
        else:
            hi = mid
            p_hi = p
        if hi - lo <= 4.0 * _EPS * hi:
            break
    mu_out[0] = hi
    return 0


cdef _raise_bisect(int status, double* diag):
    if status == 1:
        raise BisectionError(
            f"failed to bracket the power multiplier: mu={diag[2]:.6e}, power={diag[3]:.6e}")
    raise BisectionError(
        f"non-monotone power evaluation: power({diag[0]:.17e})={diag[1]:.17e}, "
        f"power({diag[2]:.17e})={diag[3]:.17e}")


def bisect_mu(lam, c, double p_m, double bisect_tol=1e-10, double mu_growth=2.0):
    cdef const double[::1] lam_v = np.ascontiguousarray(lam, dtype=np.float64)
    cdef const double[::1] c_v = np.ascontiguousarray(c, dtype=np.float64)
    cdef int n = lam_v.shape[0], i, m = 0
    cdef double top = 0.0, mu = 0.0
    cdef double diag[4]
    cdef double[::1] lk = np.empty(n, dtype=np.float64)
    cdef double[::1] ck = np.empty(n, dtype=np.float64)
    for i in range(n):
        if lam_v[i] > top:
            top = lam_v[i]
    for i in range(n):
        if top > 0.0 and lam_v[i] > _NULL_RTOL * top:
            lk[m] = lam_v[i]
            ck[m] = c_v[i]
            m += 1
    cdef int status = _bisect(lk, ck, m, p_m, bisect_tol, mu_growth, &mu, diag)
    if status != 0:
        _raise_bisect(status, diag)
    return mu


cdef double _wsr(const double complex[::1, :] M, const double[::1] alpha, double noise, int K) noexcept nogil:
    cdef double total = 0.0, interf, sig
    cdef int k, i
    for k in range(K):
        interf = noise
        for i in range(K):
            if i != k:
                interf += _abs2(M[k, i])
        sig = _abs2(M[k, k])
        total += alpha[k] * log2(1.0 + sig / interf)
    return total


def solve(H_in, alpha_in, double noise, double p_m, int max_iters, double rel_tol,
          double bisect_tol, double mu_growth):
    """Run WMMSE from the MRT point. Returns (V, trace, iterations, converged)."""
    # all matrices column-major so BLAS/LAPACK take them as is
    Hf = np.asfortranarray(H_in, dtype=np.complex128)
    cdef double complex[::1, :] H = Hf
    cdef const double[::1] alpha = np.ascontiguousarray(alpha_in, dtype=np.float64)
    cdef int N = H.shape[0], K = H.shape[1]
    cdef int n, m, k, j, it = 0, info = 0, kept, status
    cdef double nrm, obj, new, mu = 0.0, top, cs, total, e, scale
    cdef double diag[4]

    V_arr = np.empty((N, K), dtype=np.complex128, order="F")
    cdef double complex[::1, :] V = V_arr
    cdef double complex[::1, :] M = np.empty((K, K), dtype=np.complex128, order="F")
    cdef double complex[::1, :] A = np.empty((N, N), dtype=np.complex128, order="F")
    cdef double complex[::1, :] S = np.empty((N, K), dtype=np.complex128, order="F")
    cdef double complex[::1, :] B = np.empty((N, K), dtype=np.complex128, order="F")
    cdef double complex[::1, :] T = np.empty((N, K), dtype=np.complex128, order="F")
    cdef double[::1] lam = np.empty(N, dtype=np.float64)
    # workspace sizes for eigenvectors by divide and conquer
    cdef int lwork = 2 * N + N * N
    cdef int lrwork = 1 + 5 * N + 2 * N * N
    cdef int liwork = 3 + 5 * N
    cdef double complex[::1] work = np.empty(lwork, dtype=np.complex128)
    cdef double[::1] rwork = np.empty(lrwork, dtype=np.float64)
    cdef int[::1] iwork = np.empty(liwork, dtype=np.intc)
    cdef double[::1] lk = np.empty(N, dtype=np.float64)
    cdef double[::1] ck = np.empty(N, dtype=np.float64)
    cdef double complex[::1] u = np.empty(K, dtype=np.complex128)
    cdef double[::1] w = np.empty(K, dtype=np.float64)
    cdef char jobz = b'V', uplo = b'L', tn = b'N', tc = b'C'
    cdef double one = 1.0, zero = 0.0
    cdef double complex cone = 1.0, czero = 0.0

    # MRT start
    for k in range(K):
        nrm = 0.0
        for n in range(N):
            nrm += _abs2(H[n, k])
        nrm = sqrt(p_m / K) / sqrt(nrm)
        for n in range(N):
            V[n, k] = H[n, k] * nrm

    # M = H^H V, M[k, i] = h_k^H v_i
    zgemm(&tc, &tn, &K, &K, &N, &cone, &H[0, 0], &N, &V[0, 0], &N, &czero, &M[0, 0], &K)
    obj = _wsr(M, alpha, noise, K)
    trace = [obj]
    converged = False

    for it in range(1, max_iters + 1):
        for k in range(K):
            total = noise
            for j in range(K):
                total += _abs2(M[k, j])
            u[k] = M[k, k] / total
            e = 1.0 - _abs2(M[k, k]) / total
            w[k] = alpha[k] / e
            scale = sqrt(w[k] * _abs2(u[k]))
            for n in range(N):
                S[n, k] = H[n, k] * scale
                B[n, k] = H[n, k] * (w[k] * u[k])
        # A = sum_j w_j |u_j|^2 h_j h_j^H (lower triangle)
        zherk(&uplo, &tn, &N, &K, &one, &S[0, 0], &N, &zero, &A[0, 0], &N)
        zheevd(&jobz, &uplo, &N, &A[0, 0], &N, &lam[0], &work[0], &lwork, &rwork[0], &lrwork,
               &iwork[0], &liwork, &info)
        if info != 0:
            raise np.linalg.LinAlgError(f"zheevd failed with info={info} at iteration {it}")
        # T = Q^H B
        zgemm(&tc, &tn, &N, &K, &N, &cone, &A[0, 0], &N, &B[0, 0], &N, &czero, &T[0, 0], &N)
        top = lam[N - 1]
        kept = 0
        for m in range(N):
            if top > 0.0 and lam[m] > _NULL_RTOL * top:
                cs = 0.0
                for k in range(K):
                    cs += _abs2(T[m, k])
                lk[kept] = lam[m]
                ck[kept] = cs
                kept += 1
        status = _bisect(lk, ck, kept, p_m, bisect_tol, mu_growth, &mu, diag)
        if status != 0:
            _raise_bisect(status, diag)
        # scale the kept eigen-directions, drop the null ones, then V = Q T
        for m in range(N):
            if top > 0.0 and lam[m] > _NULL_RTOL * top:
                cs = 1.0 / (lam[m] + mu)
                for k in range(K):
                    T[m, k] = T[m, k] * cs
            else:
                for k in range(K):
                    T[m, k] = 0.0
        zgemm(&tn, &tn, &N, &K, &N, &cone, &A[0, 0], &N, &T[0, 0], &N, &czero, &V[0, 0], &N)
        zgemm(&tc, &tn, &K, &K, &N, &cone, &H[0, 0], &N, &V[0, 0], &N, &czero, &M[0, 0], &K)
        new = _wsr(M, alpha, noise, K)
        trace.append(new)
        if fabs(new - obj) <= rel_tol * fabs(obj):
            converged = True
            break
        obj = new

    return np.ascontiguousarray(V_arr), np.asarray(trace), it, converged
