"""Model and covariance representations shared by every other module.

A model is a fixed design X (n x p), a random design Z (n x q) and a term
map assigning every column of C = [X | Z] to a named term.  The random
columns are grouped into blocks (one per random-effect term): either
``unstructured`` blocks, level-major columns with a free d x d covariance
repeated across levels, or ``iid`` blocks with a single variance times the
identity (the mixed-model form of a penalized spline).

Covariances come as a tagged error part R (scalar sigma^2 I / diagonal /
block-diagonal / dense) plus the random-effect covariance G, carried both
dense and per block.  ``provenance`` records which plug-in produced the
estimate.  Positive-definiteness failures are hard errors, never silently
regularized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

PD_RTOL = 1e-10

PROVENANCES = ("Truth", "ModelEstimate", "ICM", "VarY")


class DimensionError(ValueError):
    """Inconsistent array dimensions."""


class NotPositiveDefinite(ValueError):
    """A matrix required to be positive definite is not."""


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be a 2-d array, got shape {a.shape}")
    return a


def assert_pd(a: np.ndarray, what: str = "matrix") -> None:
    """Raise NotPositiveDefinite unless min eig > PD_RTOL * max eig."""
    if a.shape[0] == 0:
        return
    w = linalg.eigvalsh(a)
    if w[0] <= PD_RTOL * max(w[-1], 0.0):
        raise NotPositiveDefinite(
            f"{what} is not positive definite (eigenvalue range [{w[0]:.3e}, {w[-1]:.3e}])"
        )


def is_psd(a: np.ndarray, rtol: float = PD_RTOL) -> bool:
    if a.shape[0] == 0:
        return True
    w = linalg.eigvalsh(a)
    return bool(w[0] >= -rtol * max(w[-1], 0.0, 1.0))


def sym_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a x = b for symmetric PD a via Cholesky."""
    try:
        c = linalg.cho_factor(a, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"symmetric solve failed: {exc}") from exc
    return linalg.cho_solve(c, b, check_finite=False)


def sym_inv(a: np.ndarray) -> np.ndarray:
    out = sym_solve(a, np.eye(a.shape[0]))
    return 0.5 * (out + out.T)


@dataclass(frozen=True)
class ResponseVector:
    """Length-n response on the analysis scale."""

    values: np.ndarray
    unit: str = "analysis"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise DimensionError("response must be 1-d")
        if not np.all(np.isfinite(v)):
            raise ValueError("response contains non-finite entries")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]


def as_response(y) -> np.ndarray:
    """Coerce a ResponseVector or array-like to a validated float vector."""
    if isinstance(y, ResponseVector):
        return y.values
    return ResponseVector(np.asarray(y)).values


@dataclass(frozen=True)
class RanefBlock:
    """One random-effect term: a slice of contiguous Z columns.

    ``unstructured`` blocks are level-major: level l occupies columns
    [l*dim, (l+1)*dim) within the block and shares a free dim x dim
    covariance across levels.  ``iid`` blocks have n_levels = 1 and a
    single variance times I_dim (penalized-spline form).
    """

    name: str
    kind: str  # "unstructured" | "iid"
    n_levels: int
    dim: int

    def __post_init__(self):
        if self.kind not in ("unstructured", "iid"):
            raise ValueError(f"unknown ranef kind {self.kind!r}")
        if self.kind == "iid" and self.n_levels != 1:
            raise ValueError("iid blocks must have n_levels = 1")
        if self.n_levels < 1 or self.dim < 1:
            raise ValueError("empty ranef block")

    @property
    def ncols(self) -> int:
        return self.n_levels * self.dim

    @property
    def n_par(self) -> int:
        """Free covariance parameters of the block."""
        return self.dim * (self.dim + 1) // 2 if self.kind == "unstructured" else 1


@dataclass(frozen=True)
class ModelSpec:
    """Joint design C = [X | Z] with term labels and random-block layout.

    column_labels has length p + q and assigns every column of C to one
    term.  ``penalty``, when present, is a (p+q) x (p+q) PSD matrix of
    fixed smoothing blocks lambda_m P_m used in place of G^{-1} by
    penalized solves.
    """

    fixed_design: np.ndarray
    random_design: np.ndarray
    column_labels: tuple
    ranef_blocks: tuple = ()
    penalty: np.ndarray | None = None
    row_index: np.ndarray | None = None
    _joint: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        x = _as_matrix(self.fixed_design, "fixed_design")
        z = _as_matrix(self.random_design, "random_design")
        object.__setattr__(self, "fixed_design", x)
        object.__setattr__(self, "random_design", z)
        object.__setattr__(self, "column_labels", tuple(self.column_labels))
        object.__setattr__(self, "ranef_blocks", tuple(self.ranef_blocks))
        if z.shape[0] != x.shape[0]:
            raise DimensionError("X and Z row counts differ")
        if len(self.column_labels) != x.shape[1] + z.shape[1]:
            raise DimensionError("column_labels length must be p + q")
        if sum(b.ncols for b in self.ranef_blocks) != z.shape[1]:
            raise DimensionError("ranef blocks do not cover Z columns")
        if self.penalty is not None:
            pen = _as_matrix(self.penalty, "penalty")
            if pen.shape != (self.n_coef, self.n_coef):
                raise DimensionError("penalty dimension must be p + q")
            object.__setattr__(self, "penalty", pen)
        if self.row_index is not None:
            object.__setattr__(
                self, "row_index", np.asarray(self.row_index, dtype=int)
            )
        object.__setattr__(self, "_joint", np.hstack([x, z]))

    @property
    def n(self) -> int:
        return self.fixed_design.shape[0]

    @property
    def p(self) -> int:
        return self.fixed_design.shape[1]

    @property
    def q(self) -> int:
        return self.random_design.shape[1]

    @property
    def n_coef(self) -> int:
        return self.p + self.q

    @property
    def joint_design(self) -> np.ndarray:
        return self._joint

    @property
    def fixed_terms(self) -> tuple:
        """Fixed-term names in first-appearance column order."""
        seen = []
        for lab in self.column_labels[: self.p]:
            if lab not in seen:
                seen.append(lab)
        return tuple(seen)

    @property
    def ranef_terms(self) -> tuple:
        return tuple(b.name for b in self.ranef_blocks)

    def term_columns(self, name: str) -> np.ndarray:
        """Joint-design column indices of a term."""
        idx = [i for i, lab in enumerate(self.column_labels) if lab == name]
        if not idx:
            raise KeyError(f"unknown term {name!r}")
        return np.asarray(idx, dtype=int)

    def block_columns(self, block_index: int) -> slice:
        """Slice of Z columns (0-based within Z) covered by a ranef block."""
        start = sum(b.ncols for b in self.ranef_blocks[:block_index])
        return slice(start, start + self.ranef_blocks[block_index].ncols)

    def validate_rank(self) -> None:
        """Hard error if the joint design is column-rank-deficient."""
        c = self._joint
        if c.shape[1] == 0:
            return
        r = np.linalg.matrix_rank(c)
        if r < c.shape[1]:
            raise NotPositiveDefinite(
                f"joint design rank {r} < {c.shape[1]} columns"
            )

    def drop_fixed_term(self, name: str) -> "ModelSpec":
        """New ModelSpec with one fixed term removed (Z untouched)."""
        fixed_labels = self.column_labels[: self.p]
        if name not in fixed_labels:
            raise KeyError(f"{name!r} is not a fixed term")
        keep = [i for i, lab in enumerate(fixed_labels) if lab != name]
        labels = tuple(fixed_labels[i] for i in keep) + self.column_labels[self.p:]
        return ModelSpec(
            fixed_design=self.fixed_design[:, keep],
            random_design=self.random_design,
            column_labels=labels,
            ranef_blocks=self.ranef_blocks,
            penalty=None if self.penalty is None else self._subset_penalty(keep),
            row_index=self.row_index,
        )

    def _subset_penalty(self, keep_fixed) -> np.ndarray:
        idx = list(keep_fixed) + list(range(self.p, self.n_coef))
        return self.penalty[np.ix_(idx, idx)]

    def with_rows(self, mask: np.ndarray) -> "ModelSpec":
        """Row-subset model (hierarchical selection on data subsets)."""
        mask = np.asarray(mask)
        if mask.dtype == bool:
            rows = np.flatnonzero(mask)
        else:
            rows = mask.astype(int)
        return ModelSpec(
            fixed_design=self.fixed_design[rows],
            random_design=self.random_design[rows],
            column_labels=self.column_labels,
            ranef_blocks=self.ranef_blocks,
            penalty=self.penalty,
            row_index=rows if self.row_index is None else self.row_index[rows],
        )


@dataclass(frozen=True)
class ErrorCov:
    """Tagged error covariance R with O(n) solves for structured kinds.

    ``n_params`` is the number of free parameters of the R parametrization
    (the cAIC corrector); constructors set the natural default and callers
    with a more constrained parametrization (e.g. group-diagonal with g
    groups) may override it.
    """

    kind: str  # "scalar" | "diagonal" | "blockdiag" | "dense"
    n: int
    scale: float | None = None
    values: np.ndarray | None = None
    blocks: tuple | None = None
    dense: np.ndarray | None = None
    n_params: int | None = None

    @property
    def free_params(self) -> int:
        if self.n_params is not None:
            return self.n_params
        if self.kind == "scalar":
            return 1
        if self.kind == "diagonal":
            return self.n
        if self.kind == "blockdiag":
            return sum(b.shape[0] * (b.shape[0] + 1) // 2 for b in self.blocks)
        return self.n * (self.n + 1) // 2

    @classmethod
    def scalar(cls, sigma2: float, n: int) -> "ErrorCov":
        if sigma2 <= 0:
            raise NotPositiveDefinite(f"sigma2 = {sigma2} must be positive")
        return cls(kind="scalar", n=n, scale=float(sigma2))

    @classmethod
    def diagonal(cls, values, n_params: int | None = None) -> "ErrorCov":
        v = np.asarray(values, dtype=float)
        if np.any(v <= 0):
            raise NotPositiveDefinite("diagonal R has non-positive entries")
        return cls(kind="diagonal", n=v.shape[0], values=v, n_params=n_params)

    @classmethod
    def block_diagonal(cls, blocks) -> "ErrorCov":
        blocks = tuple(np.asarray(b, dtype=float) for b in blocks)
        for b in blocks:
            assert_pd(b, "R block")
        n = sum(b.shape[0] for b in blocks)
        return cls(kind="blockdiag", n=n, blocks=blocks)

    @classmethod
    def from_dense(cls, mat) -> "ErrorCov":
        m = _as_matrix(mat, "R")
        assert_pd(m, "R")
        return cls(kind="dense", n=m.shape[0], dense=m)

    def solve(self, b: np.ndarray) -> np.ndarray:
        """R^{-1} b for a vector or matrix b."""
        if self.kind == "scalar":
            return b / self.scale
        if self.kind == "diagonal":
            v = self.values if b.ndim == 1 else self.values[:, None]
            return b / v
        if self.kind == "blockdiag":
            out = np.empty_like(b, dtype=float)
            at = 0
            for blk in self.blocks:
                k = blk.shape[0]
                out[at:at + k] = sym_solve(blk, b[at:at + k])
                at += k
            return out
        return sym_solve(self.dense, b)

    def matmul(self, b: np.ndarray) -> np.ndarray:
        if self.kind == "scalar":
            return self.scale * b
        if self.kind == "diagonal":
            v = self.values if b.ndim == 1 else self.values[:, None]
            return v * b
        if self.kind == "blockdiag":
            out = np.empty_like(b, dtype=float)
            at = 0
            for blk in self.blocks:
                k = blk.shape[0]
                out[at:at + k] = blk @ b[at:at + k]
                at += k
            return out
        return self.dense @ b

    def logdet(self) -> float:
        if self.kind == "scalar":
            return self.n * float(np.log(self.scale))
        if self.kind == "diagonal":
            return float(np.sum(np.log(self.values)))
        if self.kind == "blockdiag":
            return float(sum(2.0 * np.sum(np.log(np.diag(linalg.cholesky(b, lower=True))))
                             for b in self.blocks))
        return float(2.0 * np.sum(np.log(np.diag(linalg.cholesky(self.dense, lower=True)))))

    def as_matrix(self) -> np.ndarray:
        if self.kind == "scalar":
            return self.scale * np.eye(self.n)
        if self.kind == "diagonal":
            return np.diag(self.values)
        if self.kind == "blockdiag":
            return linalg.block_diag(*self.blocks)
        return self.dense

    def diagonal_values(self) -> np.ndarray:
        if self.kind == "scalar":
            return np.full(self.n, self.scale)
        if self.kind == "diagonal":
            return self.values.copy()
        return np.diag(self.as_matrix()).copy()


@dataclass(frozen=True)
class CovarianceModel:
    """Error covariance R plus random-effect covariance G with provenance.

    ``block_covs`` aligns with ModelSpec.ranef_blocks: a (d, d) matrix per
    unstructured block, a (1, 1) variance per iid block.  ``ranef_cov`` is
    the assembled dense q x q G (may be exactly zero for the G = 0 working
    covariance).  Either may be None: block_covs = None means only the
    dense form is known; ranef_cov = None with model.penalty set defers the
    penalization to the model's fixed-lambda penalty.
    """

    error_cov: ErrorCov
    ranef_cov: np.ndarray | None = None
    block_covs: tuple | None = None
    provenance: str = "Truth"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}")
        if self.ranef_cov is not None:
            g = _as_matrix(self.ranef_cov, "G")
            if not is_psd(g):
                raise NotPositiveDefinite("G has negative eigenvalues")
            object.__setattr__(self, "ranef_cov", g)
        if self.block_covs is not None:
            object.__setattr__(
                self,
                "block_covs",
                tuple(np.atleast_2d(np.asarray(b, dtype=float)) for b in self.block_covs),
            )

    @classmethod
    def from_blocks(cls, error_cov: ErrorCov, blocks, block_covs,
                    provenance: str = "Truth") -> "CovarianceModel":
        """Assemble the dense G from per-block covariances.

        ``blocks`` is the ModelSpec.ranef_blocks tuple defining the layout.
        """
        block_covs = tuple(np.atleast_2d(np.asarray(b, dtype=float)) for b in block_covs)
        if len(block_covs) != len(blocks):
            raise DimensionError("one covariance per ranef block required")
        parts = []
        for blk, cov in zip(blocks, block_covs):
            if blk.kind == "unstructured":
                if cov.shape != (blk.dim, blk.dim):
                    raise DimensionError(
                        f"block {blk.name!r} needs a {blk.dim}x{blk.dim} covariance"
                    )
                parts.extend([cov] * blk.n_levels)
            else:
                if cov.shape != (1, 1):
                    raise DimensionError(f"iid block {blk.name!r} needs a scalar variance")
                parts.append(cov[0, 0] * np.eye(blk.dim))
        g = linalg.block_diag(*parts) if parts else np.zeros((0, 0))
        return cls(error_cov=error_cov, ranef_cov=g, block_covs=block_covs,
                   provenance=provenance)


def marginal_covariance(model: ModelSpec, cov: CovarianceModel) -> np.ndarray:
    """Sigma = Z G Z' + R, dense, validated PD."""
    z = model.random_design
    if cov.ranef_cov is None:
        sig = cov.error_cov.as_matrix()
    else:
        if cov.ranef_cov.shape[0] != model.q:
            raise DimensionError("G dimension does not match Z")
        sig = z @ cov.ranef_cov @ z.T + cov.error_cov.as_matrix()
    sig = 0.5 * (sig + sig.T)
    assert_pd(sig, "marginal covariance")
    return sig


def penalty_matrix(model: ModelSpec, cov: CovarianceModel | None) -> np.ndarray:
    """A = blockdiag(0_p, G^{-1}) with blockwise pseudo-inverse on zero blocks.

    A zero block contributes zero to A (the G = 0 working covariance), so
    the penalized solve degrades to the unpenalized one exactly.  When the
    covariance carries no G at all, the model's fixed penalty (lambda_m P_m
    blocks) is used; with neither, A = 0.
    """
    m = model.n_coef
    a = np.zeros((m, m))
    if cov is None or cov.ranef_cov is None:
        if model.penalty is not None:
            return model.penalty
        return a
    if model.q == 0:
        return a
    if cov.block_covs is not None and len(cov.block_covs) == len(model.ranef_blocks):
        at = model.p
        for blk, bc in zip(model.ranef_blocks, cov.block_covs):
            if blk.kind == "unstructured":
                inv = _pinv_block(bc, blk.name)
                for _ in range(blk.n_levels):
                    a[at:at + blk.dim, at:at + blk.dim] = inv
                    at += blk.dim
            else:
                tau2 = bc[0, 0]
                inv = 0.0 if tau2 == 0.0 else 1.0 / tau2
                a[at:at + blk.dim, at:at + blk.dim] = inv * np.eye(blk.dim)
                at += blk.dim
        return a
    a[model.p:, model.p:] = _pinv_block(cov.ranef_cov, "G")
    return a


def _pinv_block(g: np.ndarray, name: str) -> np.ndarray:
    """Inverse of a PSD block; exact-zero blocks map to zero (A = 0)."""
    if not np.any(g):
        return np.zeros_like(g)
    try:
        return sym_inv(g)
    except NotPositiveDefinite:
        return np.linalg.pinv(g, hermitian=True)


def project(metric: np.ndarray, direction: np.ndarray, y: np.ndarray):
    """Metric-oblique projection of y along a direction (vector or matrix).

    For a vector v the projector is P = M v v' / (v' M v); for a matrix W
    it is P = M W (W' M W)^{-1} W'.  Returns (parallel, orthogonal) with
    parallel + orthogonal = y and Cov-orthogonality P M (I - P)' = 0.
    """
    metric = _as_matrix(metric, "metric")
    y = np.asarray(y, dtype=float)
    d = np.asarray(direction, dtype=float)
    if d.ndim == 1:
        if not np.any(d):
            raise ValueError("zero direction")
        mv = metric @ d
        denom = float(d @ mv)
        if denom <= 0:
            raise NotPositiveDefinite("v' M v <= 0: metric not PD along direction")
        parallel = mv * (float(d @ y) / denom)
    else:
        if d.shape[1] == 0 or np.linalg.matrix_rank(d) < d.shape[1]:
            raise ValueError("direction matrix must have full column rank")
        mw = metric @ d
        s = d.T @ mw
        parallel = mw @ sym_solve(0.5 * (s + s.T), d.T @ y)
    return parallel, y - parallel
