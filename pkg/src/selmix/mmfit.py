"""Mixed-model estimation: BLUP solve, profiled REML, plug-ins, and cAIC.

REML uses the Henderson cross-product identity.  With R = sigma^2 R0 (R0 = I
or a fixed-pattern group diagonal) and G = sigma^2 Gamma(theta),

    -2 loglik_R = (n - p) log sigma^2 + log|R0| + log|Gamma| + log|M0|
                  + Q / sigma^2 + const,

    M0 = C' R0^{-1} C + blockdiag(0_p, Gamma^{-1}),
    Q  = y' R0^{-1} y - rhs' M0^{-1} rhs,   rhs = C' R0^{-1} y,

so sigma^2 profiles out analytically (sigma2 = Q / (n - p)) and the simplex
search runs only over the Gamma shape parameters: a log-Cholesky vector per
unstructured block, log variances for diagonal structure, one log variance
per iid (spline) block.  The cross products are y-independent and cached per
model, which is what makes re-running selection inside the Monte Carlo
congruency loop affordable; the log-determinant/quadratic-form pair comes
from the compiled kernels (block-arrow factorization for a single grouping
factor, dense Cholesky otherwise).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg

from ._core import arrow_logdet_quad, dense_logdet_quad
from .modelcore import (
    CovarianceModel,
    ErrorCov,
    ModelSpec,
    NotPositiveDefinite,
    as_response,
    penalty_matrix,
    sym_inv,
    sym_solve,
)

LOG2PI = math.log(2.0 * math.pi)


class FitError(RuntimeError):
    """A model fit failed (singular system, too few residual df, ...)."""


class ConvergenceError(FitError):
    """The REML optimizer did not converge within the iteration budget."""


def nelder_mead(fn, x0, step=0.5, fatol=1e-10, max_iter=500):
    """Compact deterministic Nelder-Mead simplex minimizer.

    Fixed start, fixed initial step per coordinate, stable tie-breaking;
    converges when the simplex function-value spread drops below fatol.
    Returns (x_best, f_best, n_iter, converged).
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    if n == 0:
        return x0, float(fn(x0)), 0, True

    def safe(x):
        v = float(fn(x))
        return v if math.isfinite(v) else math.inf

    pts = np.empty((n + 1, n))
    pts[0] = x0
    for i in range(n):
        pts[i + 1] = x0
        pts[i + 1, i] += step
    fv = np.array([safe(p) for p in pts])
    n_iter = 0
    converged = False
    while n_iter < max_iter:
        order = np.argsort(fv, kind="stable")
        pts, fv = pts[order], fv[order]
        if fv[-1] - fv[0] < fatol:
            converged = True
            break
        n_iter += 1
        centroid = pts[:-1].mean(axis=0)
        xr = centroid + (centroid - pts[-1])
        fr = safe(xr)
        if fr < fv[0]:
            xe = centroid + 2.0 * (centroid - pts[-1])
            fe = safe(xe)
            if fe < fr:
                pts[-1], fv[-1] = xe, fe
            else:
                pts[-1], fv[-1] = xr, fr
        elif fr < fv[-2]:
            pts[-1], fv[-1] = xr, fr
        else:
            if fr < fv[-1]:
                xc = centroid + 0.5 * (xr - centroid)
            else:
                xc = centroid + 0.5 * (pts[-1] - centroid)
            fc = safe(xc)
            if fc < min(fr, fv[-1]):
                pts[-1], fv[-1] = xc, fc
            else:
                for i in range(1, n + 1):
                    pts[i] = pts[0] + 0.5 * (pts[i] - pts[0])
                    fv[i] = safe(pts[i])
    order = np.argsort(fv, kind="stable")
    return pts[order[0]].copy(), float(fv[order[0]]), n_iter, converged


class _ThetaLayout:
    """Packing of variance-shape parameters for the ranef blocks."""

    def __init__(self, blocks, structure):
        if len(structure) != len(blocks):
            raise ValueError("one structure entry per ranef block required")
        self.entries = []
        for blk, struct in zip(blocks, structure):
            if struct not in ("unstructured", "diagonal", "iid"):
                raise ValueError(f"unknown structure {struct!r}")
            if blk.kind == "iid" and struct != "iid":
                raise ValueError(f"iid block {blk.name!r} only supports iid structure")
            if struct == "unstructured":
                n_par = blk.dim * (blk.dim + 1) // 2
            elif struct == "diagonal":
                n_par = blk.dim
            else:
                n_par = 1
            self.entries.append((blk, struct, n_par))
        self.n_par = sum(e[2] for e in self.entries)

    def default_start(self) -> np.ndarray:
        """Gamma = 0.1 I per block in the profiled parametrization."""
        out = []
        for blk, struct, _ in self.entries:
            if struct == "unstructured":
                for i in range(blk.dim):
                    out.extend([0.0] * i)
                    out.append(0.5 * math.log(0.1))
            elif struct == "diagonal":
                out.extend([math.log(0.1)] * blk.dim)
            else:
                out.append(math.log(0.1))
        return np.asarray(out)

    def unpack(self, theta):
        """(per-block Gamma, per-block Gamma^{-1}, total log|Gamma|) or None.

        None signals a numerically invalid point (overflowed exponentials).
        Small unstructured blocks (dim <= 2) use scalar arithmetic: this
        runs once per criterion evaluation in the hot loop.
        """
        gammas, invs = [], []
        logdet = 0.0
        at = 0
        for blk, struct, n_par in self.entries:
            part = theta[at:at + n_par]
            at += n_par
            if struct == "unstructured":
                if blk.dim == 1:
                    g11 = math.exp(2.0 * part[0])
                    gam = np.array([[g11]])
                    inv = np.array([[1.0 / g11]])
                    logdet += blk.n_levels * 2.0 * part[0]
                elif blk.dim == 2:
                    la, lb, lc = math.exp(part[0]), part[1], math.exp(part[2])
                    # Gamma = L L' for L = [[la, 0], [lb, lc]]
                    gam = np.array([[la * la, la * lb],
                                    [la * lb, lb * lb + lc * lc]])
                    det = (la * lc) ** 2
                    inv = np.array([[(lb * lb + lc * lc) / det, -la * lb / det],
                                    [-la * lb / det, la * la / det]])
                    logdet += blk.n_levels * 2.0 * (part[0] + part[2])
                else:
                    low = np.zeros((blk.dim, blk.dim))
                    k = 0
                    for i in range(blk.dim):
                        low[i, :i] = part[k:k + i]
                        low[i, i] = math.exp(part[k + i])
                        k += i + 1
                    gam = low @ low.T
                    linv = linalg.solve_triangular(low, np.eye(blk.dim),
                                                   lower=True, check_finite=False)
                    inv = linv.T @ linv
                    logdet += blk.n_levels * 2.0 * float(np.sum(np.log(np.diag(low))))
            elif struct == "diagonal":
                d = np.exp(part)
                gam = np.diag(d)
                inv = np.diag(1.0 / d)
                logdet += blk.n_levels * float(np.sum(part))
            else:
                gam = np.array([[math.exp(part[0])]])
                inv = np.array([[math.exp(-part[0])]])
                logdet += blk.dim * float(part[0])
            if not (np.all(np.isfinite(gam)) and np.all(np.isfinite(inv))):
                return None
            gammas.append(gam)
            invs.append(inv)
        return gammas, invs, logdet


@dataclass(frozen=True)
class RemlEstimate:
    """Raw profiled-REML output (Gamma scale and sigma^2 separated)."""

    theta: np.ndarray
    sigma2: float
    gammas: tuple  # per-block Gamma (G = sigma2 * Gamma)
    criterion: float
    n_iter: int
    boundary: bool


class RemlWorkspace:
    """y-independent REML state for one model, reusable across responses.

    Picks the block-arrow kernel when the random part is one unstructured
    grouping factor with disjoint levels (Z'Z block diagonal), the dense
    kernel otherwise.  ``r_pattern`` (optional, length n, integer group
    codes) requests group-diagonal R0 = diag(r_g); its g - 1 free log
    ratios are appended to theta.
    """

    def __init__(self, model: ModelSpec, structure=None, r_pattern=None):
        self.model = model
        blocks = model.ranef_blocks
        self.structure = tuple(structure) if structure is not None else tuple(
            b.kind for b in blocks
        )
        self.layout = _ThetaLayout(blocks, self.structure)
        x, z = model.fixed_design, model.random_design
        n, p, q = model.n, model.p, model.q
        if n <= p:
            raise FitError(f"no residual degrees of freedom (n = {n}, p = {p})")
        self.r_pattern = None
        self._groups = None
        if r_pattern is not None:
            codes = np.asarray(r_pattern)
            _, codes = np.unique(codes, return_inverse=True)
            if codes.max() == 0:
                codes = None
            else:
                self.r_pattern = codes
                self._groups = [np.flatnonzero(codes == g)
                                for g in range(codes.max() + 1)]
        self.mode = "dense"
        if (self.r_pattern is None and len(blocks) == 1
                and blocks[0].kind == "unstructured"
                and self.structure[0] == "unstructured" and q > 0 and p > 0):
            zz = z.T @ z
            g, d = blocks[0].n_levels, blocks[0].dim
            view = zz.reshape(g, d, g, d)
            off = view.copy()
            for lev in range(g):
                off[lev, :, lev, :] = 0.0
            if np.max(np.abs(off)) <= 1e-12 * max(np.max(np.abs(zz)), 1.0):
                self.mode = "arrow"
                self._bb_base = np.ascontiguousarray(
                    np.stack([zz[lev * d:(lev + 1) * d, lev * d:(lev + 1) * d]
                              for lev in range(g)])
                )
                self._u = np.ascontiguousarray(z.T @ x)
                self._f = np.ascontiguousarray(x.T @ x)
                self._bbbuf = np.empty_like(self._bb_base)
                self._wu = np.empty((q, p))
                self._wf = np.empty((p, p))
                self._wz = np.empty(q + p)
        if self.mode == "dense":
            c = model.joint_design
            if self._groups is None:
                self._ctc = c.T @ c
            else:
                self._ctc_g = [c[rows].T @ c[rows] for rows in self._groups]
            m = model.n_coef
            self._mbuf = np.empty((m, m))
            self._mwork = np.empty(m)
            self._diag = np.einsum("ii->i", self._mbuf)
        # addition slices for Gamma^{-1} in [X | Z] order: (start, block, structure)
        self._adds = []
        at = p
        for blk, struct, _ in self.layout.entries:
            self._adds.append((at, blk, struct))
            at += blk.ncols
        # dense [X | Z] cross products for the post-REML BLUP, kept in both
        # modes (the arrow layout orders coefficients [Z | X])
        self._ctc_xz = (self._ctc if self.mode == "dense" and self._groups is None
                        else model.joint_design.T @ model.joint_design)

    @property
    def n_theta(self) -> int:
        extra = 0 if self._groups is None else len(self._groups) - 1
        return self.layout.n_par + extra

    def default_start(self) -> np.ndarray:
        base = self.layout.default_start()
        if self._groups is not None:
            base = np.concatenate([base, np.zeros(len(self._groups) - 1)])
        return base

    def make_rhs(self, y: np.ndarray):
        """(rhs pieces, y'y pieces) laid out for this workspace's mode."""
        model = self.model
        if self.mode == "arrow":
            rhs = np.concatenate([model.random_design.T @ y,
                                  model.fixed_design.T @ y])
            return rhs, float(y @ y)
        c = model.joint_design
        if self._groups is None:
            return c.T @ y, float(y @ y)
        rhs_g = [c[rows].T @ y[rows] for rows in self._groups]
        yty_g = [float(y[rows] @ y[rows]) for rows in self._groups]
        return rhs_g, yty_g

    def _pieces(self, theta, rhs, yty):
        """(criterion, Q, log-r0 part) at theta; criterion = inf if invalid."""
        shape = self.layout.unpack(theta[:self.layout.n_par])
        if shape is None:
            return math.inf, math.nan
        gammas, invs, logdet_gamma = shape
        model = self.model
        n, p = model.n, model.p
        if self.mode == "arrow":
            np.copyto(self._bbbuf, self._bb_base)
            self._bbbuf += invs[0]
            ld, quad, info = arrow_logdet_quad(
                self._bbbuf, self._u, self._f, rhs,
                self._wu, self._wf, self._wz,
            )
            logr0 = 0.0
            q_resid = yty - quad
        else:
            if self._groups is None:
                np.copyto(self._mbuf, self._ctc)
                rhs_eff, yty_eff, logr0 = rhs, yty, 0.0
            else:
                ratios = np.concatenate([[0.0], theta[self.layout.n_par:]])
                w = np.exp(-ratios)
                if not np.all(np.isfinite(w)):
                    return math.inf, math.nan
                self._mbuf[:] = 0.0
                rhs_eff = np.zeros(model.n_coef)
                yty_eff = 0.0
                logr0 = 0.0
                for g, rows in enumerate(self._groups):
                    self._mbuf += w[g] * self._ctc_g[g]
                    rhs_eff = rhs_eff + w[g] * rhs[g]
                    yty_eff += w[g] * yty[g]
                    logr0 += rows.size * ratios[g]
            for (at, blk, struct), inv in zip(self._adds, invs):
                if struct == "iid":
                    self._diag[at:at + blk.dim] += inv[0, 0]
                elif struct == "diagonal":
                    self._diag[at:at + blk.ncols] += np.tile(np.diag(inv),
                                                             blk.n_levels)
                else:
                    pos = at
                    for _ in range(blk.n_levels):
                        self._mbuf[pos:pos + blk.dim, pos:pos + blk.dim] += inv
                        pos += blk.dim
            ld, quad, info = dense_logdet_quad(self._mbuf, rhs_eff, self._mwork)
            q_resid = yty_eff - quad
        if info != 0 or not math.isfinite(ld) or not math.isfinite(q_resid) \
                or q_resid <= 0.0:
            return math.inf, math.nan
        crit = (n - p) * math.log(q_resid) + logdet_gamma + ld + logr0
        return crit, q_resid

    def fit(self, y=None, rhs=None, yty=None, start=None, step=0.5,
            fatol=1e-10, max_iter=500) -> RemlEstimate:
        """Minimize the profiled criterion; raises on non-convergence."""
        model = self.model
        if rhs is None:
            rhs, yty = self.make_rhs(as_response(y))
        theta0 = self.default_start() if start is None else np.asarray(start, float)
        crit_fn = lambda th: self._pieces(th, rhs, yty)[0]
        theta, crit, n_iter, converged = nelder_mead(
            crit_fn, theta0, step=step, fatol=fatol, max_iter=max_iter
        )
        if not converged:
            # rebuild the simplex around the incumbent: a collapsed simplex
            # stalls without polishing the optimum, and a fresh smaller one
            # recovers it deterministically
            theta, crit, extra, converged = nelder_mead(
                crit_fn, theta, step=0.25 * step, fatol=fatol,
                max_iter=max_iter
            )
            n_iter += extra
        if not converged:
            raise ConvergenceError(
                f"REML simplex did not converge in {2 * max_iter} iterations"
            )
        if not math.isfinite(crit):
            raise FitError("REML criterion not finite at the optimum")
        _, q_resid = self._pieces(theta, rhs, yty)
        sigma2 = q_resid / (model.n - model.p)
        gammas, _, _ = self.layout.unpack(theta[:self.layout.n_par])
        boundary = any(
            float(np.min(linalg.eigvalsh(g))) < 1e-6 for g in gammas
        )
        return RemlEstimate(
            theta=theta, sigma2=float(sigma2), gammas=tuple(gammas),
            criterion=float(crit), n_iter=n_iter, boundary=boundary,
        )

    def error_cov(self, est: RemlEstimate) -> ErrorCov:
        """R = sigma^2 R0 for the fitted estimate."""
        n = self.model.n
        if self.r_pattern is None:
            return ErrorCov.scalar(est.sigma2, n)
        ratios = np.concatenate([[0.0], est.theta[self.layout.n_par:]])
        values = est.sigma2 * np.exp(ratios)[self.r_pattern]
        return ErrorCov.diagonal(values, n_params=len(self._groups))

    def blup(self, est: RemlEstimate, y: np.ndarray) -> "FitResult":
        """Joint solve at a REML estimate using cached cross products.

        Scalar-R fast path: M0 = C'C + blockdiag(0, Gamma^{-1}) in [X | Z]
        order, K_inv = sigma2 M0^{-1}.  Equivalent to solve_blup on the
        assembled CovarianceModel.
        """
        if self.r_pattern is not None:
            cov = CovarianceModel.from_blocks(
                self.error_cov(est), self.model.ranef_blocks,
                tuple(est.sigma2 * g for g in est.gammas),
                provenance="ModelEstimate",
            )
            return solve_blup(self.model, cov, y, reml_info=est)
        model = self.model
        unpacked = self.layout.unpack(est.theta[:self.layout.n_par])
        if unpacked is None:
            raise FitError("invalid variance parameters at the REML estimate")
        _, invs, _ = unpacked
        m0 = self._ctc_xz.copy()
        diag = np.einsum("ii->i", m0)
        for (at, blk, struct), inv in zip(self._adds, invs):
            if struct == "iid":
                diag[at:at + blk.dim] += inv[0, 0]
            elif struct == "diagonal":
                diag[at:at + blk.ncols] += np.tile(np.diag(inv), blk.n_levels)
            else:
                pos = at
                for _ in range(blk.n_levels):
                    m0[pos:pos + blk.dim, pos:pos + blk.dim] += inv
                    pos += blk.dim
        try:
            m0_inv = sym_inv(m0)
        except NotPositiveDefinite as exc:
            raise FitError(f"singular penalized system: {exc}") from exc
        c = model.joint_design
        gamma = m0_inv @ (c.T @ y)
        fitted = c @ gamma
        resid = y - fitted
        sigma2 = est.sigma2
        edf = float(np.einsum("ij,ji->", m0_inv, self._ctc_xz))
        loglik = -0.5 * (model.n * (LOG2PI + math.log(sigma2))
                         + float(resid @ resid) / sigma2)
        cov = CovarianceModel.from_blocks(
            ErrorCov.scalar(sigma2, model.n), model.ranef_blocks,
            tuple(sigma2 * g for g in est.gammas), provenance="ModelEstimate",
        )
        return FitResult(
            model=model, cov=cov, beta_hat=gamma[:model.p],
            b_hat=gamma[model.p:], k_inv=sigma2 * m0_inv, fitted=fitted,
            edf=edf, loglik=float(loglik), boundary=est.boundary,
            n_iter=est.n_iter, reml_theta=est.theta,
            reml_criterion=est.criterion,
        )


@dataclass(frozen=True)
class FitResult:
    """Joint coefficient solve with shrinkage-aware covariance.

    K_inv is the Bayesian covariance (C'R^{-1}C + A)^{-1}; V_matrix the
    (p+q) x n solve operator K_inv C' R^{-1} (materialized lazily); edf the
    trace of the hat matrix C V.  ``loglik`` is the conditional Gaussian
    log-likelihood at (beta_hat, b_hat, R).
    """

    model: ModelSpec
    cov: CovarianceModel
    beta_hat: np.ndarray
    b_hat: np.ndarray
    k_inv: np.ndarray
    fitted: np.ndarray
    edf: float
    loglik: float
    converged: bool = True
    boundary: bool = False
    n_iter: int = 0
    reml_theta: np.ndarray | None = None
    reml_criterion: float | None = None

    @property
    def gamma_hat(self) -> np.ndarray:
        return np.concatenate([self.beta_hat, self.b_hat])

    @property
    def sigma2(self) -> float | None:
        return self.cov.error_cov.scale

    @property
    def varcomp(self) -> dict:
        return {
            "sigma2": self.cov.error_cov.scale,
            "r_kind": self.cov.error_cov.kind,
            "block_covs": self.cov.block_covs,
        }

    @cached_property
    def V_matrix(self) -> np.ndarray:
        rinv_c = self.cov.error_cov.solve(self.model.joint_design)
        return self.k_inv @ rinv_c.T


def solve_blup(model: ModelSpec, cov: CovarianceModel, y,
               reml_info: RemlEstimate | None = None) -> FitResult:
    """(beta_hat, b_hat) = (C'R^{-1}C + A)^{-1} C'R^{-1} y with extras.

    A comes from penalty_matrix (blockwise G^{-1}, zero blocks dropping
    out); with A = 0 and C = X this is GLS/OLS.
    """
    y = as_response(y)
    if len(y) != model.n:
        raise FitError("response length does not match the model")
    c = model.joint_design
    a = penalty_matrix(model, cov)
    rinv_c = cov.error_cov.solve(c)
    ctr_c = c.T @ rinv_c
    m = ctr_c + a
    try:
        k_inv = sym_inv(m)
    except NotPositiveDefinite as exc:
        raise FitError(f"singular penalized system: {exc}") from exc
    gamma = k_inv @ (rinv_c.T @ y)
    fitted = c @ gamma
    resid = y - fitted
    edf = float(np.einsum("ij,ji->", k_inv, ctr_c))
    quad = float(resid @ cov.error_cov.solve(resid))
    loglik = -0.5 * (model.n * LOG2PI + cov.error_cov.logdet() + quad)
    kwargs = {}
    if reml_info is not None:
        kwargs = dict(boundary=reml_info.boundary, n_iter=reml_info.n_iter,
                      reml_theta=reml_info.theta,
                      reml_criterion=reml_info.criterion)
    return FitResult(
        model=model, cov=cov, beta_hat=gamma[:model.p], b_hat=gamma[model.p:],
        k_inv=0.5 * (k_inv + k_inv.T), fitted=fitted, edf=edf,
        loglik=float(loglik), **kwargs,
    )


def fit_reml(model: ModelSpec, y, structure=None, r_pattern=None,
             start=None, step=0.5) -> CovarianceModel:
    """REML variance components; deterministic given (y, config).

    Returns a CovarianceModel with provenance ModelEstimate.  For q = 0 the
    model is a plain LM and sigma2 = RSS / (n - p).
    """
    y = as_response(y)
    if model.q == 0:
        try:
            beta = sym_solve(model.fixed_design.T @ model.fixed_design,
                             model.fixed_design.T @ y)
        except NotPositiveDefinite as exc:
            raise FitError(f"singular fixed design: {exc}") from exc
        resid = y - model.fixed_design @ beta
        dof = model.n - model.p
        if dof <= 0:
            raise FitError("no residual degrees of freedom")
        return CovarianceModel(
            error_cov=ErrorCov.scalar(float(resid @ resid) / dof, model.n),
            ranef_cov=np.zeros((0, 0)), block_covs=(),
            provenance="ModelEstimate",
        )
    ws = RemlWorkspace(model, structure=structure, r_pattern=r_pattern)
    est = ws.fit(y=y, start=start, step=step)
    block_covs = tuple(est.sigma2 * g for g in est.gammas)
    return CovarianceModel.from_blocks(
        ws.error_cov(est), model.ranef_blocks, block_covs,
        provenance="ModelEstimate",
    )


def fit_model(model: ModelSpec, y, structure=None, workspace=None,
              start=None, step=0.5) -> FitResult:
    """REML + BLUP in one call, reusing a cached workspace when given."""
    y = as_response(y)
    if model.q == 0:
        cov = fit_reml(model, y)
        return solve_blup(model, cov, y)
    ws = workspace if workspace is not None else RemlWorkspace(model, structure)
    est = ws.fit(y=y, start=start, step=step)
    return ws.blup(est, y)


def plugin_covariance(kind: str, model: ModelSpec | None = None, y=None,
                      truth: CovarianceModel | None = None) -> CovarianceModel:
    """The Sec. 3.3 covariance plug-ins.

    Truth passes through the user-supplied components; ModelEstimate REML-fits
    the selected model; ICM REML-fits the intercept-plus-random-effects model
    on the same Z; VarY returns R = s_y^2 I (sample variance, ddof 1) with
    G = 0.
    """
    if kind == "Truth":
        if truth is None:
            raise ValueError("Truth plug-in requires the true covariance")
        return truth
    if kind == "ModelEstimate":
        return fit_reml(model, y)
    if kind == "ICM":
        icm = ModelSpec(
            fixed_design=np.ones((model.n, 1)),
            random_design=model.random_design,
            column_labels=("(Intercept)",) + model.column_labels[model.p:],
            ranef_blocks=model.ranef_blocks,
        )
        cov = fit_reml(icm, y)
        return CovarianceModel(error_cov=cov.error_cov, ranef_cov=cov.ranef_cov,
                               block_covs=cov.block_covs, provenance="ICM")
    if kind == "VarY":
        y = as_response(y)
        s2 = float(np.var(y, ddof=1))
        q = model.q if model is not None else 0
        return CovarianceModel(
            error_cov=ErrorCov.scalar(s2, len(y)),
            ranef_cov=np.zeros((q, q)),
            block_covs=tuple(np.zeros((b.dim, b.dim)) if b.kind == "unstructured"
                             else np.zeros((1, 1)) for b in model.ranef_blocks)
            if model is not None else (),
            provenance="VarY",
        )
    raise ValueError(f"unknown plug-in kind {kind!r}")


def caic(model: ModelSpec, cov: CovarianceModel, y, fit: FitResult | None = None) -> float:
    """Conditional AIC: -2 conditional loglik + 2 (edf + free R parameters).

    The corrector is the Supplement-style working version: the hat-matrix
    trace already reflects shrinkage, so G parameters are not counted; only
    the free parameters of R enter.  Not the full analytic cAIC correction.
    """
    if fit is None:
        fit = solve_blup(model, cov, y)
    return float(-2.0 * fit.loglik + 2.0 * (fit.edf + cov.error_cov.free_params))
