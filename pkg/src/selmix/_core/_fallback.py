"""Pure-numpy fallback for the compiled kernels.

Implements the same contract as ``_kernels.pyx`` (see that module for the
block-arrow layout).  Scratch buffers are accepted for signature
compatibility and ignored; matrix arguments may be treated as destroyed by
the caller either way.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular


def dense_logdet_quad(m, rhs, work=None):
    """(logdet M, rhs' M^{-1} rhs, info) for dense SPD ``m``."""
    if m.shape[0] == 0:
        return 0.0, 0.0, 0
    try:
        low = cholesky(m, lower=True, check_finite=False)
    except LinAlgError:
        return np.nan, np.nan, 1
    z = solve_triangular(low, rhs, lower=True, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(low)))
    return float(logdet), float(z @ z), 0


def arrow_logdet_quad(bb, u, f, rhs, wu=None, wf=None, wz=None):
    """(logdet M, rhs' M^{-1} rhs, info) for block-arrow SPD M.

    M = [[B, U], [U', F]] with B = blockdiag(bb[0], ..., bb[nb-1]).
    """
    nb, d, _ = bb.shape
    p = f.shape[0]
    q = nb * d
    try:
        low_b = np.linalg.cholesky(bb)
    except np.linalg.LinAlgError:
        return np.nan, np.nan, 1
    w = np.linalg.solve(low_b, u.reshape(nb, d, p)) if q else u.reshape(0, d, p)
    z_b = np.linalg.solve(low_b, rhs[:q].reshape(nb, d, 1)) if q else rhs[:q]
    s = f - np.tensordot(w, w, axes=([0, 1], [0, 1]))
    c = rhs[q:] - np.tensordot(w, z_b, axes=([0, 1], [0, 1])).ravel()
    try:
        low_s = cholesky(s, lower=True, check_finite=False)
    except LinAlgError:
        return np.nan, np.nan, q + 1
    z_f = solve_triangular(low_s, c, lower=True, check_finite=False)
    logdet = 2.0 * (np.sum(np.log(low_b.diagonal(axis1=1, axis2=2)))
                    + np.sum(np.log(np.diag(low_s))))
    quad = float(np.sum(z_b * z_b) + z_f @ z_f)
    return float(logdet), quad, 0
