"""P-spline bases, difference penalties, and the mixed-model reparametrization.

A basis is cubic B-splines on uniform knots extended ``degree`` knots past
each boundary, so the difference-penalty null space maps exactly to
polynomials of the covariate (via the equispaced Greville sites).  The
penalized least-squares problem

    min_gamma ||y - C gamma||^2 + lambda gamma' P gamma,   P = D'D,

is reparametrized into fixed (penalty null space) and i.i.d. random parts
so the smoothing parameter becomes a variance ratio tau^2 = sigma^2/lambda
and the REML machinery estimates it.  Model assembly column-centers each
smooth block, which absorbs the constant null-space direction into the
intercept and enforces the sum-to-zero constraint at the training rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline

from .modelcore import ModelSpec, NotPositiveDefinite, RanefBlock, as_response


@dataclass(frozen=True)
class SplineBasis:
    """Uniform B-spline basis with a difference penalty."""

    knots: np.ndarray
    degree: int
    n_basis: int
    diff_order: int
    design: np.ndarray
    x: np.ndarray
    penalty_raw: np.ndarray

    def evaluate(self, z) -> np.ndarray:
        """Rows C_z = (B_1(z), ..., B_d(z)) for points inside the support."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        lo, hi = self.knots[self.degree], self.knots[-self.degree - 1]
        if np.any(z < lo) or np.any(z > hi):
            raise ValueError(f"evaluation point outside basis support [{lo}, {hi}]")
        mat = BSpline.design_matrix(z, self.knots, self.degree, extrapolate=False)
        return mat.toarray()


def build_basis(x, d: int = 10, degree: int = 3, diff_order: int = 2) -> SplineBasis:
    """Cubic B-spline basis with d functions and a diff_order penalty.

    Knots are equidistant over [min(x), max(x)] and continued with the same
    spacing ``degree`` knots beyond each end, giving d + degree + 1 knots.
    """
    x = np.asarray(x, dtype=float)
    if d <= degree + 1:
        raise ValueError(f"need d > degree + 1, got d = {d}, degree = {degree}")
    if d <= diff_order:
        raise ValueError(f"need d > diff_order, got d = {d}, diff_order = {diff_order}")
    if np.unique(x).size < d:
        raise ValueError(f"need at least d = {d} distinct covariate values")
    lo, hi = float(np.min(x)), float(np.max(x))
    n_inner = d - degree + 1
    h = (hi - lo) / (n_inner - 1)
    knots = lo + h * np.arange(-degree, n_inner + degree)
    knots[degree] = lo  # guard rounding at the boundaries
    knots[degree + n_inner - 1] = hi
    diff = np.diff(np.eye(d), diff_order, axis=0)
    basis = SplineBasis(
        knots=knots,
        degree=degree,
        n_basis=d,
        diff_order=diff_order,
        design=np.empty((0, d)),
        x=x,
        penalty_raw=diff.T @ diff,
    )
    object.__setattr__(basis, "design", basis.evaluate(x))
    return basis


def fit_pls(basis: SplineBasis, y, lam: float) -> np.ndarray:
    """Penalized least squares coefficients (C'C + lambda P) gamma = C'y."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    y = as_response(y)
    c = basis.design
    m = c.T @ c + lam * basis.penalty_raw
    try:
        factor = linalg.cho_factor(m, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefinite(
            f"singular penalized system at lambda = {lam}: {exc}"
        ) from exc
    return linalg.cho_solve(factor, c.T @ y, check_finite=False)


@dataclass(frozen=True)
class MixedReparam:
    """Change of basis splitting coefficients into fixed + iid random parts.

    fixed_map spans the penalty null space with the constant direction as
    its first column; random_map' penalty_raw random_map = I.
    """

    fixed_map: np.ndarray
    random_map: np.ndarray
    scaling: dict


def reparametrize(basis: SplineBasis) -> MixedReparam:
    """Eigendecomposition route to the diag(0, I) penalty form."""
    pen = basis.penalty_raw
    d = basis.n_basis
    w, vecs = linalg.eigh(pen)
    thr = 1e-9 * w[-1]
    n_null = int(np.sum(w < thr))
    if n_null != basis.diff_order:
        raise NotPositiveDefinite(
            f"numerically indeterminate penalty rank: {n_null} null eigenvalues "
            f"found, diff_order = {basis.diff_order}"
        )
    # Null space as polynomials in the Greville sites (exact for uniform
    # knots), orthonormalized with the constant direction first.
    greville = np.array([
        basis.knots[k + 1:k + basis.degree + 1].mean() for k in range(d)
    ])
    vander = np.vander(greville, n_null, increasing=True)
    fixed_map, _ = np.linalg.qr(vander)
    if np.max(np.abs(pen @ fixed_map)) > 1e-8 * max(w[-1], 1.0):
        raise NotPositiveDefinite("polynomial null-space construction failed")
    pos = w >= thr
    random_map = vecs[:, pos] / np.sqrt(w[pos])
    return MixedReparam(
        fixed_map=fixed_map,
        random_map=random_map,
        scaling={"relation": "tau2 = sigma2 / lambda"},
    )


@dataclass(frozen=True)
class SmoothTerm:
    """A smooth model term in mixed form, centered for identifiability.

    x_cols are the non-constant null-space columns of the centered design
    (empty for diff_order = 1), z_cols the whitened random columns.  The
    constant null-space direction is a constant function of z by the
    partition of unity, so dropping it is exactly the sum-to-zero
    normalization absorbed by the model intercept.
    """

    name: str
    basis: SplineBasis
    reparam: MixedReparam
    center: bool
    col_means: np.ndarray
    x_cols: np.ndarray = field(repr=False)
    z_cols: np.ndarray = field(repr=False)

    def row(self, z) -> tuple:
        """(fixed-row, random-row) coordinates of f(z) for new points z."""
        c = self.basis.evaluate(z) - self.col_means
        xr = c @ self.reparam.fixed_map
        if self.center:
            xr = xr[:, 1:]
        return xr, c @ self.reparam.random_map


def smooth_term(name: str, x, d: int = 10, degree: int = 3,
                diff_order: int = 2, center: bool = True) -> SmoothTerm:
    """Build a centered smooth term from raw covariate values."""
    basis = build_basis(x, d=d, degree=degree, diff_order=diff_order)
    rep = reparametrize(basis)
    means = basis.design.mean(axis=0) if center else np.zeros(basis.n_basis)
    design = basis.design - means
    x_all = design @ rep.fixed_map
    if center:
        const = x_all[:, 0]
        if np.max(np.abs(const)) > 1e-8:
            raise NotPositiveDefinite("centering failed to absorb the constant")
        x_all = x_all[:, 1:]
    return SmoothTerm(
        name=name,
        basis=basis,
        reparam=rep,
        center=center,
        col_means=means,
        x_cols=x_all,
        z_cols=design @ rep.random_map,
    )


def build_additive_model(n: int, linear: dict | None = None,
                         smooths: list | None = None,
                         intercept: bool = True) -> ModelSpec:
    """Assemble an additive ModelSpec from linear columns and smooth terms.

    ``linear`` maps term names to column vectors; ``smooths`` is a list of
    SmoothTerm.  Each smooth contributes its x_cols to the fixed design and
    its z_cols as one iid random block; all its columns carry the term name.
    """
    x_parts, labels = [], []
    if intercept:
        x_parts.append(np.ones((n, 1)))
        labels.append("(Intercept)")
    for tname, col in (linear or {}).items():
        col = np.asarray(col, dtype=float).reshape(n, -1)
        x_parts.append(col)
        labels.extend([tname] * col.shape[1])
    z_parts, blocks, z_labels = [], [], []
    for term in smooths or []:
        if term.x_cols.shape[1]:
            x_parts.append(term.x_cols)
            labels.extend([term.name] * term.x_cols.shape[1])
        z_parts.append(term.z_cols)
        blocks.append(RanefBlock(name=term.name, kind="iid", n_levels=1,
                                 dim=term.z_cols.shape[1]))
        z_labels.extend([term.name] * term.z_cols.shape[1])
    x = np.hstack(x_parts) if x_parts else np.empty((n, 0))
    z = np.hstack(z_parts) if z_parts else np.empty((n, 0))
    return ModelSpec(
        fixed_design=x,
        random_design=z,
        column_labels=tuple(labels + z_labels),
        ranef_blocks=tuple(blocks),
    )


@dataclass(frozen=True)
class TensorBasis:
    """Minimal bivariate tensor-product basis for the interaction group test."""

    basis1: SplineBasis
    basis2: SplineBasis
    design: np.ndarray
    penalty_raw: np.ndarray

    def evaluate(self, z1, z2) -> np.ndarray:
        c1 = self.basis1.evaluate(z1)
        c2 = self.basis2.evaluate(z2)
        return (c1[:, :, None] * c2[:, None, :]).reshape(c1.shape[0], -1)


def tensor_product(basis1: SplineBasis, basis2: SplineBasis) -> TensorBasis:
    """Kronecker-product design with a Kronecker-sum difference penalty."""
    d1, d2 = basis1.n_basis, basis2.n_basis
    c1, c2 = basis1.design, basis2.design
    if c1.shape[0] != c2.shape[0]:
        raise ValueError("tensor bases must share rows")
    design = (c1[:, :, None] * c2[:, None, :]).reshape(c1.shape[0], -1)
    penalty = np.kron(basis1.penalty_raw, np.eye(d2)) + np.kron(np.eye(d1), basis2.penalty_raw)
    return TensorBasis(basis1=basis1, basis2=basis2, design=design, penalty_raw=penalty)
