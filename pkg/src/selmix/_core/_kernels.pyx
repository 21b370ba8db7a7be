# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled linear-algebra kernels for the REML criterion evaluation.

Both kernels compute ``(logdet(M), rhs' M^{-1} rhs)`` for a symmetric
positive definite ``M`` via one Cholesky factorization and one triangular
solve.  They sit in the innermost loop of the mixed-model fitter (one call
per Nelder-Mead criterion evaluation, thousands of evaluations per Monte
Carlo sample), so they avoid memory allocation: callers pass scratch
buffers and the matrix arguments are destroyed in place.

``dense_logdet_quad`` handles an arbitrary dense M.  ``arrow_logdet_quad``
exploits the block-arrow sparsity of the penalized cross-product matrix
when the random effects come from a single grouping factor: ordering the
coefficients as [random | fixed] gives

    M = [[B, U], [U', F]],   B = blockdiag(B_1, ..., B_nb),

with small d x d diagonal blocks, so the factorization costs
O(nb d^2 (d + p) + p^3) instead of O((nb d + p)^3).

The pure-python fallback in ``_fallback.py`` implements the same contract.
"""

from libc.math cimport log, sqrt
from libc.string cimport memcpy

from scipy.linalg.cython_blas cimport ddot, dgemv, dsyrk, dtrsv
from scipy.linalg.cython_lapack cimport dpotrf


cdef inline int _small_chol(double* a, int d, int stride) nogil:
    """In-place lower Cholesky of a d x d block stored with row stride."""
    cdef int i, j, t
    cdef double s
    for i in range(d):
        s = a[i * stride + i]
        for t in range(i):
            s -= a[i * stride + t] * a[i * stride + t]
        if s <= 0.0:
            return i + 1
        s = sqrt(s)
        a[i * stride + i] = s
        for j in range(i + 1, d):
            a[j * stride + i] -= _dot_row(a, j, i, stride)
            a[j * stride + i] /= s
    return 0


cdef inline double _dot_row(double* a, int j, int i, int stride) nogil:
    cdef int t
    cdef double s = 0.0
    for t in range(i):
        s += a[j * stride + t] * a[i * stride + t]
    return s


def dense_logdet_quad(double[:, ::1] m, double[::1] rhs, double[::1] work):
    """Cholesky log-determinant and quadratic form of a dense SPD matrix.

    Parameters
    ----------
    m : (k, k) C-contiguous array, destroyed (overwritten by the factor).
    rhs : (k,) right-hand side, not modified.
    work : (k,) scratch buffer.

    Returns
    -------
    (logdet, quad, info) : info != 0 flags a non-positive-definite matrix.
    """
    cdef int k = m.shape[0]
    cdef int info = 0, inc = 1, i
    cdef double logdet = 0.0, quad = 0.0
    if k == 0:
        return 0.0, 0.0, 0
    with nogil:
        # C-order m seen column-major is m' = m; factor the F-view lower
        # triangle, i.e. dpotrf writes L with L L' = M.
        dpotrf("L", &k, &m[0, 0], &k, &info)
        if info == 0:
            for i in range(k):
                logdet += 2.0 * log(m[i, i])
            memcpy(&work[0], &rhs[0], k * sizeof(double))
            dtrsv("L", "N", "N", &k, &m[0, 0], &k, &work[0], &inc)
            quad = ddot(&k, &work[0], &inc, &work[0], &inc)
    return logdet, quad, info


def arrow_logdet_quad(double[:, :, ::1] bb, double[:, ::1] u,
                      double[:, ::1] f, double[::1] rhs,
                      double[:, ::1] wu, double[:, ::1] wf,
                      double[::1] wz):
    """Log-determinant and quadratic form of a block-arrow SPD matrix.

    M = [[B, U], [U', F]] with B = blockdiag of ``nb`` blocks of size d.

    Parameters
    ----------
    bb : (nb, d, d) diagonal blocks, destroyed.
    u : (nb*d, p) coupling block, read only.
    f : (p, p) dense corner, read only.
    rhs : (nb*d + p,) right-hand side, read only.
    wu : (nb*d, p) scratch.
    wf : (p, p) scratch.
    wz : (nb*d + p,) scratch.

    Returns
    -------
    (logdet, quad, info)
    """
    cdef int nb = bb.shape[0]
    cdef int d = bb.shape[1]
    cdef int p = f.shape[0]
    cdef int q = nb * d
    cdef int k, i, j, t, row, info = 0, inc = 1
    cdef double s, logdet = 0.0, quad = 0.0
    cdef double alpha = -1.0, beta = 1.0
    cdef double* blk
    with nogil:
        for k in range(nb):
            blk = &bb[k, 0, 0]
            info = _small_chol(blk, d, d)
            if info != 0:
                info = k * d + info
                break
            for i in range(d):
                logdet += 2.0 * log(blk[i * d + i])
                row = k * d + i
                # forward substitution for W = L_B^{-1} U and z_B = L_B^{-1} rhs_B
                for j in range(p):
                    s = u[row, j]
                    for t in range(i):
                        s -= blk[i * d + t] * wu[k * d + t, j]
                    wu[row, j] = s / blk[i * d + i]
                s = rhs[row]
                for t in range(i):
                    s -= blk[i * d + t] * wz[k * d + t]
                wz[row] = s / blk[i * d + i]
        if info == 0:
            for i in range(p):
                for j in range(p):
                    wf[i, j] = f[i, j]
                wz[q + i] = rhs[q + i]
            if q > 0:
                # S = F - W'W: the F-view of C-order wu is W' (p x q, lda=p)
                dsyrk("L", "N", &p, &q, &alpha, &wu[0, 0], &p, &beta,
                      &wf[0, 0], &p)
                # c = rhs_F - W' z_B
                dgemv("N", &p, &q, &alpha, &wu[0, 0], &p, &wz[0], &inc,
                      &beta, &wz[q], &inc)
            dpotrf("L", &p, &wf[0, 0], &p, &info)
            if info == 0:
                for i in range(p):
                    logdet += 2.0 * log(wf[i, i])
                dtrsv("L", "N", "N", &p, &wf[0, 0], &p, &wz[q], &inc)
                i = q + p
                quad = ddot(&i, &wz[0], &inc, &wz[0], &inc)
            else:
                info = q + info
    return logdet, quad, info
