"""Model and covariance container contracts."""

import numpy as np
import pytest
from scipy import linalg

from selmix.modelcore import (
    CovarianceModel,
    DimensionError,
    ErrorCov,
    ModelSpec,
    NotPositiveDefinite,
    RanefBlock,
    ResponseVector,
    as_response,
    assert_pd,
    is_psd,
    marginal_covariance,
    penalty_matrix,
    project,
    sym_inv,
    sym_solve,
)


def toy_model(n=12, seed=0):
    rng = np.random.default_rng(seed)
    x = np.column_stack([np.ones(n), rng.standard_normal(n)])
    lev = np.repeat(np.arange(3), n // 3)
    z = np.zeros((n, 6))
    z[np.arange(n), 2 * lev] = 1.0
    z[np.arange(n), 2 * lev + 1] = x[:, 1]
    return ModelSpec(
        fixed_design=x, random_design=z,
        column_labels=("(Intercept)", "x") + tuple(f"u{j}" for j in range(6)),
        ranef_blocks=(RanefBlock("g", "unstructured", 3, 2),),
    )


class TestBasics:
    def test_response_validation(self):
        with pytest.raises(ValueError, match="non-finite"):
            ResponseVector(np.array([1.0, np.nan]))
        with pytest.raises(DimensionError):
            ResponseVector(np.ones((2, 2)))
        assert np.array_equal(as_response([1, 2]), np.array([1.0, 2.0]))
        rv = ResponseVector(np.arange(3.0))
        assert as_response(rv) is rv.values

    def test_sym_solve_and_inv(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((5, 5))
        m = a @ a.T + 5 * np.eye(5)
        b = rng.standard_normal(5)
        np.testing.assert_allclose(sym_solve(m, b), np.linalg.solve(m, b),
                                   rtol=1e-10)
        np.testing.assert_allclose(sym_inv(m), np.linalg.inv(m), rtol=1e-9,
                                   atol=1e-12)
        with pytest.raises(NotPositiveDefinite):
            sym_solve(np.diag([1.0, -1.0]), np.ones(2))

    def test_pd_checks(self):
        assert is_psd(np.zeros((2, 2)))
        assert not is_psd(np.diag([1.0, -0.5]))
        with pytest.raises(NotPositiveDefinite):
            assert_pd(np.diag([1.0, 0.0]))
        assert_pd(np.empty((0, 0)))


class TestRanefBlock:
    def test_validation(self):
        with pytest.raises(ValueError, match="kind"):
            RanefBlock("a", "other", 1, 1)
        with pytest.raises(ValueError, match="n_levels"):
            RanefBlock("a", "iid", 3, 2)
        with pytest.raises(ValueError, match="empty"):
            RanefBlock("a", "unstructured", 0, 1)

    def test_counts(self):
        blk = RanefBlock("g", "unstructured", 5, 3)
        assert blk.ncols == 15
        assert blk.n_par == 6
        assert RanefBlock("s", "iid", 1, 8).n_par == 1


class TestModelSpec:
    def test_shape_validation(self):
        with pytest.raises(DimensionError, match="row counts"):
            ModelSpec(np.ones((3, 1)), np.ones((4, 1)), ("a", "b"),
                      (RanefBlock("g", "iid", 1, 1),))
        with pytest.raises(DimensionError, match="column_labels"):
            ModelSpec(np.ones((3, 1)), np.ones((3, 1)), ("a",),
                      (RanefBlock("g", "iid", 1, 1),))
        with pytest.raises(DimensionError, match="cover"):
            ModelSpec(np.ones((3, 1)), np.ones((3, 2)), ("a", "b", "c"),
                      (RanefBlock("g", "iid", 1, 1),))

    def test_term_lookup(self):
        m = toy_model()
        assert m.fixed_terms == ("(Intercept)", "x")
        assert m.ranef_terms == ("g",)
        assert m.term_columns("x").tolist() == [1]
        assert m.block_columns(0) == slice(0, 6)
        with pytest.raises(KeyError):
            m.term_columns("nope")

    def test_drop_fixed_term(self):
        m = toy_model()
        dropped = m.drop_fixed_term("x")
        assert dropped.p == 1
        assert dropped.q == m.q
        assert dropped.fixed_terms == ("(Intercept)",)
        np.testing.assert_array_equal(dropped.random_design, m.random_design)
        with pytest.raises(KeyError):
            m.drop_fixed_term("u0")

    def test_validate_rank(self):
        rng = np.random.default_rng(4)
        ok = ModelSpec(
            np.column_stack([np.ones(9), rng.standard_normal(9)]),
            rng.standard_normal((9, 2)),
            ("a", "b", "s", "s"), (RanefBlock("s", "iid", 1, 2),))
        ok.validate_rank()
        # the grouped toy model is genuinely deficient: the global intercept
        # and slope lie in the span of the per-level columns
        with pytest.raises(NotPositiveDefinite, match="rank"):
            toy_model().validate_rank()
        x = np.column_stack([np.ones(4), np.ones(4)])
        bad = ModelSpec(x, np.empty((4, 0)), ("a", "b"))
        with pytest.raises(NotPositiveDefinite, match="rank"):
            bad.validate_rank()

    def test_with_rows(self):
        m = toy_model()
        sub = m.with_rows(np.arange(6))
        assert sub.n == 6
        np.testing.assert_array_equal(sub.fixed_design, m.fixed_design[:6])
        mask = np.zeros(m.n, dtype=bool)
        mask[[0, 5, 7]] = True
        assert m.with_rows(mask).n == 3


class TestErrorCov:
    @pytest.mark.parametrize("make", [
        lambda rng: ErrorCov.scalar(2.5, 6),
        lambda rng: ErrorCov.diagonal(rng.uniform(0.5, 3.0, size=6)),
        lambda rng: ErrorCov.block_diagonal(
            [np.eye(2) + 0.3, 2 * np.eye(4) + 0.1]),
        lambda rng: ErrorCov.from_dense(
            np.diag(rng.uniform(1, 2, size=6)) + 0.2),
    ])
    def test_solve_matmul_logdet_match_dense(self, make):
        rng = np.random.default_rng(5)
        r = make(rng)
        dense = r.as_matrix()
        b = rng.standard_normal(6)
        np.testing.assert_allclose(r.solve(b), np.linalg.solve(dense, b),
                                   rtol=1e-10)
        np.testing.assert_allclose(r.matmul(b), dense @ b, rtol=1e-12)
        assert r.logdet() == pytest.approx(np.linalg.slogdet(dense)[1],
                                           rel=1e-10)
        bm = rng.standard_normal((6, 3))
        np.testing.assert_allclose(r.solve(bm), np.linalg.solve(dense, bm),
                                   rtol=1e-10)
        np.testing.assert_allclose(r.diagonal_values(), np.diag(dense),
                                   rtol=1e-12)

    def test_validation(self):
        with pytest.raises(NotPositiveDefinite):
            ErrorCov.scalar(0.0, 3)
        with pytest.raises(NotPositiveDefinite):
            ErrorCov.diagonal([1.0, -2.0])
        with pytest.raises(NotPositiveDefinite):
            ErrorCov.from_dense(np.diag([1.0, 0.0]))

    def test_free_params(self):
        assert ErrorCov.scalar(1.0, 9).free_params == 1
        assert ErrorCov.diagonal(np.ones(4)).free_params == 4
        assert ErrorCov.diagonal(np.ones(4), n_params=2).free_params == 2
        r = ErrorCov.block_diagonal([np.eye(2), np.eye(3)])
        assert r.free_params == 3 + 6


class TestCovarianceModel:
    def test_from_blocks_layout(self):
        blocks = (RanefBlock("g", "unstructured", 2, 2),
                  RanefBlock("s", "iid", 1, 3))
        g0 = np.array([[2.0, 0.5], [0.5, 1.0]])
        cov = CovarianceModel.from_blocks(ErrorCov.scalar(1.0, 5), blocks,
                                          (g0, np.array([[0.7]])))
        expect = linalg.block_diag(g0, g0, 0.7 * np.eye(3))
        np.testing.assert_allclose(cov.ranef_cov, expect)

    def test_validation(self):
        with pytest.raises(ValueError, match="provenance"):
            CovarianceModel(ErrorCov.scalar(1.0, 2), provenance="Guess")
        with pytest.raises(NotPositiveDefinite):
            CovarianceModel(ErrorCov.scalar(1.0, 2),
                            ranef_cov=np.diag([1.0, -0.1]))
        with pytest.raises(DimensionError):
            CovarianceModel.from_blocks(
                ErrorCov.scalar(1.0, 4),
                (RanefBlock("g", "unstructured", 2, 2),),
                (np.eye(3),))

    def test_marginal_covariance(self):
        m = toy_model()
        g0 = np.array([[1.5, 0.2], [0.2, 0.8]])
        cov = CovarianceModel.from_blocks(ErrorCov.scalar(0.5, m.n),
                                          m.ranef_blocks, (g0,))
        sig = marginal_covariance(m, cov)
        expect = (m.random_design @ cov.ranef_cov @ m.random_design.T
                  + 0.5 * np.eye(m.n))
        np.testing.assert_allclose(sig, expect, rtol=1e-12)

    def test_penalty_matrix_blockwise(self):
        m = toy_model()
        g0 = np.array([[1.5, 0.2], [0.2, 0.8]])
        cov = CovarianceModel.from_blocks(ErrorCov.scalar(1.0, m.n),
                                          m.ranef_blocks, (g0,))
        a = penalty_matrix(m, cov)
        assert np.all(a[: m.p] == 0.0) and np.all(a[:, : m.p] == 0.0)
        inv = np.linalg.inv(g0)
        for lev in range(3):
            s = slice(m.p + 2 * lev, m.p + 2 * lev + 2)
            np.testing.assert_allclose(a[s, s], inv, rtol=1e-12)

    def test_penalty_matrix_zero_block_drops_out(self):
        m = toy_model()
        cov = CovarianceModel.from_blocks(ErrorCov.scalar(1.0, m.n),
                                          m.ranef_blocks, (np.zeros((2, 2)),))
        assert not np.any(penalty_matrix(m, cov))

    def test_penalty_matrix_fixed_lambda(self):
        n = 8
        pen = np.zeros((2, 2))
        pen[1, 1] = 3.0
        m = ModelSpec(np.ones((n, 1)), np.linspace(0, 1, n)[:, None],
                      ("a", "s"), (RanefBlock("s", "iid", 1, 1),),
                      penalty=pen)
        cov = CovarianceModel(ErrorCov.scalar(1.0, n), ranef_cov=None)
        np.testing.assert_array_equal(penalty_matrix(m, cov), pen)
        assert not np.any(penalty_matrix(m, None)[0])


class TestProject:
    def test_vector_projection_identities(self):
        rng = np.random.default_rng(9)
        for _ in range(25):
            n = rng.integers(3, 12)
            a = rng.standard_normal((n, n))
            metric = a @ a.T + n * np.eye(n)
            v = rng.standard_normal(n)
            y = rng.standard_normal(n)
            par, orth = project(metric, v, y)
            np.testing.assert_allclose(par + orth, y, rtol=0, atol=1e-12)
            assert v @ orth == pytest.approx(0.0, abs=1e-10)
            par2, _ = project(metric, v, par)
            np.testing.assert_allclose(par2, par, rtol=0, atol=1e-10)

    def test_matrix_projection(self):
        rng = np.random.default_rng(2)
        n = 10
        a = rng.standard_normal((n, n))
        metric = a @ a.T + n * np.eye(n)
        w = rng.standard_normal((n, 3))
        y = rng.standard_normal(n)
        par, orth = project(metric, w, y)
        np.testing.assert_allclose(par + orth, y, atol=1e-12)
        np.testing.assert_allclose(w.T @ orth, np.zeros(3), atol=1e-9)

    def test_degenerate_directions(self):
        with pytest.raises(ValueError, match="zero direction"):
            project(np.eye(2), np.zeros(2), np.ones(2))
        w = np.ones((3, 2))
        with pytest.raises(ValueError, match="rank"):
            project(np.eye(3), w, np.ones(3))
