"""Test directions: what linear (or group) functional of y is under test.

A scalar direction is a vector v with statistic T(y) = v'y and a working
covariance M for y; the response splits as

    y = d T(y) + zeta,   d = M v / (v' M v),   zeta = y - d T(y),

which makes T(d) = 1 and Cov(T, zeta) = 0 under y ~ N(mu, M).  Rebuilt
responses y_b = d t_b + zeta therefore change only the tested coordinate.
kappa = v' M v is Var(T) under the working covariance.

A group direction carries an orthonormal basis Q of a w-dimensional column
space; T(y) = ||Q'y|| is scaled chi with dof = w when R = sigma^2 I, and the
rebuild moves y along the unit vector of the projection of the observed
response onto span(Q).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import linalg

from .modelcore import (
    CovarianceModel,
    ModelSpec,
    NotPositiveDefinite,
    as_response,
    marginal_covariance,
    penalty_matrix,
    sym_inv,
    sym_solve,
)


class Decomposition(NamedTuple):
    t_obs: float
    carrier: np.ndarray
    zeta: np.ndarray


@dataclass(frozen=True)
class TestDirection:
    """Frozen direction of a selective test plus its rebuild machinery."""

    kind: str  # "scalar" or "group"
    label: str
    v: np.ndarray | None = None
    metric: np.ndarray | None = None
    kappa: float | None = None
    kappa_bayes: float | None = None
    q_basis: np.ndarray | None = None
    sigma_scale: float | None = None
    dof: int | None = None
    rho0: float = 0.0

    def __post_init__(self):
        if self.kind == "scalar":
            if self.v is None or self.metric is None:
                raise ValueError("scalar direction needs v and a metric")
            if self.kappa is None or not self.kappa > 0:
                raise ValueError("kappa must be positive")
        elif self.kind == "group":
            if self.q_basis is None or self.q_basis.shape[1] == 0:
                raise ValueError("group direction spans nothing")
            if self.sigma_scale is None or not self.sigma_scale > 0:
                raise ValueError("group direction needs a positive scale")
        else:
            raise ValueError(f"unknown direction kind {self.kind!r}")

    @property
    def v_sde(self) -> float:
        """Standard deviation of T under the working covariance."""
        if self.kind == "scalar":
            return math.sqrt(self.kappa)
        return self.sigma_scale

    def t_obs(self, y) -> float:
        y = as_response(y)
        if self.kind == "scalar":
            return float(self.v @ y)
        return float(np.linalg.norm(self.q_basis.T @ y))

    def decompose(self, y) -> Decomposition:
        """(t_obs, carrier, zeta) with y = carrier * t_obs + zeta exactly."""
        y = as_response(y)
        if self.kind == "scalar":
            mv = self.metric @ self.v
            d = mv / float(self.v @ mv)
            t = float(self.v @ y)
            return Decomposition(t, d, y - d * t)
        qy = self.q_basis.T @ y
        t = float(np.linalg.norm(qy))
        if t > 0:
            carrier = self.q_basis @ (qy / t)
        else:
            carrier = self.q_basis[:, 0].copy()
        return Decomposition(t, carrier, y - self.q_basis @ qy)

    def rebuild(self, y, t_values) -> np.ndarray:
        """Responses with the tested coordinate replaced, one row per t."""
        dec = self.decompose(y)
        t_values = np.atleast_1d(np.asarray(t_values, dtype=float))
        return dec.zeta + np.outer(t_values, dec.carrier)


def _fixed_index(model: ModelSpec, target) -> int:
    if isinstance(target, str):
        cols = model.term_columns(target)
        if cols.size != 1:
            raise ValueError(f"term {target!r} spans {cols.size} columns; "
                             "scalar directions need a single coefficient")
        return int(cols[0])
    j = int(target)
    if not 0 <= j < model.n_coef:
        raise IndexError(f"coefficient index {j} out of range")
    return j


def lm_marginal(model: ModelSpec, cov: CovarianceModel, target,
                use_gls: bool = False, label: str | None = None) -> TestDirection:
    """Marginal-perspective direction for a fixed coefficient.

    Plain: v = X (X'X)^{-1} e_j, the OLS functional, with the sandwich
    variance v' Sigma v.  GLS: v = Sigma^{-1} X (X' Sigma^{-1} X)^{-1} e_j
    with kappa = [(X' Sigma^{-1} X)^{-1}]_jj.  Metric is Sigma in both.
    """
    j = _fixed_index(model, target)
    if j >= model.p:
        raise ValueError("marginal directions test fixed coefficients only")
    sigma = marginal_covariance(model, cov)
    x = model.fixed_design
    if use_gls:
        si_x = sym_solve(sigma, x)
        gram_inv = sym_inv(x.T @ si_x)
        v = si_x @ gram_inv[:, j]
        kappa = float(gram_inv[j, j])
    else:
        v = x @ sym_inv(x.T @ x)[:, j]
        kappa = float(v @ sigma @ v)
    return TestDirection(
        kind="scalar", label=label or str(target), v=v, metric=sigma,
        kappa=kappa,
    )


def conditional(model: ModelSpec, cov: CovarianceModel, target,
                unshrunken: bool = False,
                label: str | None = None) -> TestDirection:
    """Conditional-perspective direction for a joint-coefficient functional.

    target is a fixed-term name, a joint coefficient index, or an arbitrary
    combination vector c over (beta, b).  The statistic is c'gamma_hat =
    v'y with v = R^{-1} C K^{-1} c and K = C'R^{-1}C + A; the metric is R.
    With a zero working G the penalty A vanishes and v reduces to the
    unshrunken GLS functional.  kappa is the classical c' K^{-1} C'R^{-1}C
    K^{-1} c; kappa_bayes the wider c' K^{-1} c (they differ by c'K^{-1} A
    K^{-1} c >= 0).
    """
    m = model.n_coef
    if isinstance(target, np.ndarray) and target.ndim == 1 and target.size == m:
        c_vec = target.astype(float)
        if not np.any(c_vec):
            raise ValueError("zero combination vector")
    else:
        c_vec = np.zeros(m)
        c_vec[_fixed_index(model, target)] = 1.0
    c = model.joint_design
    rinv_c = cov.error_cov.solve(c)
    k = c.T @ rinv_c
    if not unshrunken:
        k = k + penalty_matrix(model, cov)
    k = 0.5 * (k + k.T)
    try:
        k_inv = sym_inv(k)
    except NotPositiveDefinite:
        # Unpenalized K is singular when X overlaps span(Z), as with a
        # global intercept plus per-level intercepts.  The minimum-norm
        # generalized inverse keeps every estimable functional (c
        # orthogonal to the null space of C) exact; non-estimable targets
        # get the minimum-norm representative.
        k_inv = linalg.pinvh(k)
    w = k_inv @ c_vec
    v = rinv_c @ w
    cw = c @ w
    kappa = float(v @ cw)
    return TestDirection(
        kind="scalar", label=label or str(target), v=v,
        metric=cov.error_cov.as_matrix(), kappa=kappa,
        kappa_bayes=float(c_vec @ w),
    )


def spline_pointwise(model: ModelSpec, cov: CovarianceModel, smooth, z: float,
                     unshrunken: bool = False,
                     label: str | None = None) -> TestDirection:
    """Direction testing the fitted smooth at one location, T = f_hat(z).

    The combination vector places the smooth's centered fixed row and
    whitened random row at the term's model columns; everything else is
    zero, so the intercept-absorbed constant stays out of the test.
    """
    cols = model.term_columns(smooth.name)
    fixed_cols = cols[cols < model.p]
    random_cols = cols[cols >= model.p]
    xr, zr = smooth.row([z])
    if fixed_cols.size != xr.shape[1] or random_cols.size != zr.shape[1]:
        raise ValueError(f"term {smooth.name!r} does not match the model layout")
    c_vec = np.zeros(model.n_coef)
    c_vec[fixed_cols] = xr[0]
    c_vec[random_cols] = zr[0]
    return conditional(
        model, cov, c_vec, unshrunken=unshrunken,
        label=label or f"{smooth.name}({z:g})",
    )


def group(model: ModelSpec, term: str, cov: CovarianceModel,
          tol: float | None = None, label: str | None = None) -> TestDirection:
    """Group direction for a multi-column fixed term.

    W is the Euclidean residual of the term's columns on the remaining
    fixed columns; T = ||P_W y|| is sigma * chi_w under the null when
    R = sigma^2 I (enforced), with w = rank(W).
    """
    if cov.error_cov.kind != "scalar":
        raise ValueError("group statistics require R = sigma^2 I")
    cols = model.term_columns(term)
    cols = cols[cols < model.p]
    if cols.size == 0:
        raise KeyError(f"no fixed columns for term {term!r}")
    x = model.fixed_design
    rest = np.delete(np.arange(model.p), cols)
    xj = x[:, cols]
    if rest.size:
        coef, *_ = np.linalg.lstsq(x[:, rest], xj, rcond=None)
        w_mat = xj - x[:, rest] @ coef
    else:
        w_mat = xj.copy()
    u, s, _ = np.linalg.svd(w_mat, full_matrices=False)
    cut = tol if tol is not None else s[0] * max(w_mat.shape) * np.finfo(float).eps
    rank = int(np.sum(s > cut)) if s.size else 0
    if rank == 0:
        raise ValueError(f"term {term!r} lies in the span of the other columns")
    return TestDirection(
        kind="group", label=label or term, q_basis=u[:, :rank],
        sigma_scale=math.sqrt(cov.error_cov.scale), dof=rank,
    )
