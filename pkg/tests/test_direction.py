import numpy as np
import pytest

from selmix.direction import TestDirection as DirectionSpec
from selmix.direction import (
    conditional,
    group,
    lm_marginal,
    spline_pointwise,
)
from selmix.mmfit import solve_blup
from selmix.modelcore import CovarianceModel, ErrorCov, ModelSpec, RanefBlock
from selmix.splines import build_additive_model, smooth_term


def lm_fixture(seed=0, n=80, p=4):
    rng = np.random.default_rng(seed)
    x = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    model = ModelSpec(
        fixed_design=x, random_design=np.zeros((n, 0)),
        column_labels=("(Intercept)",) + tuple(f"x{i}" for i in range(1, p)),
        ranef_blocks=(),
    )
    cov = CovarianceModel(
        error_cov=ErrorCov.scalar(2.0, n), ranef_cov=np.zeros((0, 0)),
        block_covs=(), provenance="Truth",
    )
    return model, cov, rng


def lmm_fixture(seed=1, n_levels=15, per=6):
    rng = np.random.default_rng(seed)
    n = n_levels * per
    x = np.column_stack([np.ones(n), rng.standard_normal((n, 3))])
    lev = np.repeat(np.arange(n_levels), per)
    z = np.zeros((n, n_levels))
    z[np.arange(n), lev] = 1.0
    model = ModelSpec(
        fixed_design=x, random_design=z,
        column_labels=("(Intercept)", "x1", "x2", "x3")
        + tuple(f"u{i}" for i in range(n_levels)),
        ranef_blocks=(RanefBlock(name="g", kind="unstructured",
                                 n_levels=n_levels, dim=1),),
    )
    cov = CovarianceModel.from_blocks(
        ErrorCov.scalar(1.5, n), model.ranef_blocks, (np.array([[0.8]]),),
        provenance="Truth",
    )
    return model, cov, rng


class TestScalarDecomposition:
    def test_reconstruction_is_exact(self):
        model, cov, rng = lmm_fixture()
        y = rng.standard_normal(model.n)
        d = lm_marginal(model, cov, "x1")
        t, carrier, zeta = d.decompose(y)
        assert np.allclose(carrier * t + zeta, y, atol=1e-12)
        assert d.t_obs(y) == pytest.approx(t)

    def test_rebuild_moves_only_the_statistic(self):
        model, cov, rng = lmm_fixture(seed=3)
        y = rng.standard_normal(model.n)
        d = lm_marginal(model, cov, "x2", use_gls=True)
        ts = np.array([-1.0, 0.0, 2.5])
        yb = d.rebuild(y, ts)
        assert yb.shape == (3, model.n)
        for row, t in zip(yb, ts):
            assert d.t_obs(row) == pytest.approx(t, abs=1e-10)
        # zeta is shared: differences lie along the carrier only
        diff = yb[2] - yb[0]
        carrier = d.decompose(y).carrier
        assert np.allclose(diff, carrier * (ts[2] - ts[0]), atol=1e-10)

    def test_carrier_statistic_is_one(self):
        model, cov, rng = lmm_fixture(seed=5)
        for target in ("x1", "x3"):
            d = conditional(model, cov, target)
            carrier = d.decompose(rng.standard_normal(model.n)).carrier
            assert float(d.v @ carrier) == pytest.approx(1.0)

    def test_cov_orthogonality_of_zeta(self):
        # Cov(T, zeta) = M v - d (v' M v) = 0
        model, cov, rng = lmm_fixture(seed=7)
        d = lm_marginal(model, cov, "x1")
        carrier = d.decompose(rng.standard_normal(model.n)).carrier
        cross = d.metric @ d.v - carrier * d.kappa
        assert np.max(np.abs(cross)) < 1e-10


class TestMarginalDirections:
    def test_plain_statistic_is_ols_coef(self):
        model, cov, rng = lm_fixture()
        y = rng.standard_normal(model.n)
        beta = np.linalg.lstsq(model.fixed_design, y, rcond=None)[0]
        d = lm_marginal(model, cov, "x2")
        assert d.t_obs(y) == pytest.approx(beta[2])

    def test_plain_kappa_is_sandwich(self):
        model, cov, _ = lmm_fixture()
        from selmix.modelcore import marginal_covariance
        sig = marginal_covariance(model, cov)
        x = model.fixed_design
        xtx_inv = np.linalg.inv(x.T @ x)
        j = 1
        sand = (xtx_inv @ x.T @ sig @ x @ xtx_inv)[j, j]
        assert lm_marginal(model, cov, "x1").kappa == pytest.approx(sand)

    def test_gls_kappa_never_exceeds_plain(self):
        # Gauss-Markov: the GLS functional has the smallest variance
        rng = np.random.default_rng(42)
        for _ in range(20):
            n, p = 40, 3
            x = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
            a = rng.standard_normal((n, n))
            sig = a @ a.T + n * np.eye(n)
            model = ModelSpec(
                fixed_design=x, random_design=np.zeros((n, 0)),
                column_labels=("(Intercept)", "x1", "x2"), ranef_blocks=(),
            )
            cov = CovarianceModel(
                error_cov=ErrorCov.from_dense(sig),
                ranef_cov=np.zeros((0, 0)), block_covs=(), provenance="Truth",
            )
            plain = lm_marginal(model, cov, "x1").kappa
            gls = lm_marginal(model, cov, "x1", use_gls=True).kappa
            assert gls <= plain * (1 + 1e-10)

    def test_gls_equals_plain_under_iid(self):
        model, cov, _ = lm_fixture()
        a = lm_marginal(model, cov, "x1")
        b = lm_marginal(model, cov, "x1", use_gls=True)
        assert a.kappa == pytest.approx(b.kappa)
        assert np.allclose(a.v, b.v, atol=1e-12)

    def test_rejects_random_targets(self):
        model, cov, _ = lmm_fixture()
        with pytest.raises(ValueError, match="fixed"):
            lm_marginal(model, cov, model.p + 1)


class TestConditionalDirections:
    def test_scalar_toy_kappas(self):
        # C = [1], R = [1], G = [1] => A = 1, K = 2:
        # classical kappa = 1/4, Bayesian kappa = 1/2
        model = ModelSpec(
            fixed_design=np.zeros((1, 0)), random_design=np.array([[1.0]]),
            column_labels=("u",),
            ranef_blocks=(RanefBlock(name="u", kind="iid", n_levels=1, dim=1),),
        )
        cov = CovarianceModel.from_blocks(
            ErrorCov.scalar(1.0, 1), model.ranef_blocks, (np.array([[1.0]]),),
            provenance="Truth",
        )
        d = conditional(model, cov, 0)
        assert d.kappa == pytest.approx(0.25)
        assert d.kappa_bayes == pytest.approx(0.5)

    def test_statistic_matches_blup_coefficient(self):
        model, cov, rng = lmm_fixture(seed=9)
        y = rng.standard_normal(model.n)
        fit = solve_blup(model, cov, y)
        for j in (1, 2, model.p + 3):
            d = conditional(model, cov, j)
            assert d.t_obs(y) == pytest.approx(fit.gamma_hat[j], abs=1e-10)

    def test_bayes_kappa_dominates_classical(self):
        model, cov, rng = lmm_fixture(seed=11)
        for j in range(model.p):
            d = conditional(model, cov, j)
            assert d.kappa_bayes >= d.kappa - 1e-12

    def test_kappas_match_covariance_formulas(self):
        model, cov, _ = lmm_fixture(seed=13)
        c = model.joint_design
        r_inv_c = cov.error_cov.solve(c)
        from selmix.modelcore import penalty_matrix, sym_inv
        k_inv = sym_inv(c.T @ r_inv_c + penalty_matrix(model, cov))
        classical = k_inv @ (c.T @ r_inv_c) @ k_inv
        d = conditional(model, cov, 1)
        assert d.kappa == pytest.approx(classical[1, 1])
        assert d.kappa_bayes == pytest.approx(k_inv[1, 1])

    def test_zero_working_g_reduces_to_unshrunken(self):
        # random slopes on a covariate absent from X keep [X | Z] full rank,
        # so K is invertible even with A = 0; G = 0 must then give exactly
        # the unshrunken direction
        rng = np.random.default_rng(15)
        n_levels, per = 12, 6
        n = n_levels * per
        x = np.column_stack([np.ones(n), rng.standard_normal((n, 2))])
        lev = np.repeat(np.arange(n_levels), per)
        slope_var = rng.standard_normal(n)
        z = np.zeros((n, n_levels))
        z[np.arange(n), lev] = slope_var
        model = ModelSpec(
            fixed_design=x, random_design=z,
            column_labels=("(Intercept)", "x1", "x2")
            + tuple(f"u{i}" for i in range(n_levels)),
            ranef_blocks=(RanefBlock(name="g", kind="unstructured",
                                     n_levels=n_levels, dim=1),),
        )
        zero_g = CovarianceModel.from_blocks(
            ErrorCov.scalar(1.5, n), model.ranef_blocks, (np.zeros((1, 1)),),
            provenance="VarY",
        )
        a = conditional(model, zero_g, 1)
        b = conditional(model, zero_g, 1, unshrunken=True)
        assert np.allclose(a.v, b.v, atol=1e-10)
        assert a.kappa == pytest.approx(b.kappa)

    def test_rejects_zero_combination(self):
        model, cov, _ = lmm_fixture()
        with pytest.raises(ValueError, match="zero combination"):
            conditional(model, cov, np.zeros(model.n_coef))


class TestSplinePointwise:
    def test_t_obs_is_fitted_value(self):
        rng = np.random.default_rng(21)
        n = 120
        z = rng.uniform(-1, 1, n)
        term = smooth_term("f1", z, d=8)
        model = build_additive_model(n, smooths=[term])
        y = np.sin(2.5 * z) + rng.standard_normal(n) * 0.3
        cov = CovarianceModel.from_blocks(
            ErrorCov.scalar(0.09, n), model.ranef_blocks,
            (np.array([[0.05]]),), provenance="Truth",
        )
        fit = solve_blup(model, cov, y)
        for z0 in (-0.7, 0.0, 0.4):
            d = spline_pointwise(model, cov, term, z0)
            cols = model.term_columns("f1")
            xr, zr = term.row([z0])
            row = np.concatenate([xr[0], zr[0]])
            assert d.t_obs(y) == pytest.approx(
                float(row @ fit.gamma_hat[cols]), abs=1e-10)
            assert d.kappa_bayes >= d.kappa - 1e-12

    def test_label_and_layout_guard(self):
        rng = np.random.default_rng(22)
        n = 60
        z1 = rng.uniform(-1, 1, n)
        z2 = rng.uniform(-1, 1, n)
        z2[0], z2[-1] = -1.0, 1.0  # keep the tested location in support
        t1 = smooth_term("f1", z1, d=6)
        t2 = smooth_term("f2", z2, d=6)
        model = build_additive_model(n, smooths=[t1, t2])
        cov = CovarianceModel.from_blocks(
            ErrorCov.scalar(1.0, n), model.ranef_blocks,
            (np.array([[0.1]]), np.array([[0.1]])), provenance="Truth",
        )
        d = spline_pointwise(model, cov, t2, -1.0)
        assert d.label == "f2(-1)"
        model_wrong = build_additive_model(n, smooths=[t1])
        with pytest.raises(KeyError):
            spline_pointwise(model_wrong, cov, t2, 0.0)


class TestGroupDirections:
    def test_orthogonal_design_keeps_own_span(self):
        n = 50
        rng = np.random.default_rng(31)
        q, _ = np.linalg.qr(rng.standard_normal((n, 5)))
        model = ModelSpec(
            fixed_design=q, random_design=np.zeros((n, 0)),
            column_labels=("a", "a", "a", "b", "b"), ranef_blocks=(),
        )
        cov = CovarianceModel(
            error_cov=ErrorCov.scalar(4.0, n), ranef_cov=np.zeros((0, 0)),
            block_covs=(), provenance="Truth",
        )
        d = group(model, "a", cov)
        assert d.dof == 3
        assert d.sigma_scale == pytest.approx(2.0)
        # span(Q) == span(X_a): projections agree
        xa = q[:, :3]
        y = rng.standard_normal(n)
        p_q = d.q_basis @ (d.q_basis.T @ y)
        p_x = xa @ np.linalg.lstsq(xa, y, rcond=None)[0]
        assert np.allclose(p_q, p_x, atol=1e-10)

    def test_statistic_is_projection_norm(self):
        n = 40
        rng = np.random.default_rng(33)
        x = np.column_stack([np.ones(n), rng.standard_normal((n, 4))])
        model = ModelSpec(
            fixed_design=x, random_design=np.zeros((n, 0)),
            column_labels=("(Intercept)", "g", "g", "x1", "x2"),
            ranef_blocks=(),
        )
        cov = CovarianceModel(
            error_cov=ErrorCov.scalar(1.0, n), ranef_cov=np.zeros((0, 0)),
            block_covs=(), provenance="Truth",
        )
        d = group(model, "g", cov)
        y = rng.standard_normal(n)
        t, carrier, zeta = d.decompose(y)
        assert t == pytest.approx(d.t_obs(y))
        assert np.allclose(carrier * t + zeta, y, atol=1e-12)
        assert np.linalg.norm(carrier) == pytest.approx(1.0)
        # rebuilt responses reproduce the requested statistic values
        for tb in (0.5, 2.0):
            assert d.t_obs(d.rebuild(y, [tb])[0]) == pytest.approx(tb)

    def test_zero_statistic_still_decomposes(self):
        n = 30
        rng = np.random.default_rng(35)
        q, _ = np.linalg.qr(rng.standard_normal((n, 3)))
        d = DirectionSpec(kind="group", label="g", q_basis=q[:, :2],
                          sigma_scale=1.0, dof=2)
        y = q[:, 2]  # orthogonal to the tested span
        t, carrier, zeta = d.decompose(y)
        assert t == pytest.approx(0.0, abs=1e-12)
        assert np.linalg.norm(carrier) == pytest.approx(1.0)
        assert np.allclose(zeta, y, atol=1e-12)

    def test_collinear_term_raises(self):
        n = 30
        x1 = np.random.default_rng(0).standard_normal(n)
        model = ModelSpec(
            fixed_design=np.column_stack([x1, x1]),
            random_design=np.zeros((n, 0)),
            column_labels=("a", "b"), ranef_blocks=(),
        )
        cov = CovarianceModel(
            error_cov=ErrorCov.scalar(1.0, n), ranef_cov=np.zeros((0, 0)),
            block_covs=(), provenance="Truth",
        )
        with pytest.raises(ValueError, match="span"):
            group(model, "b", cov)

    def test_requires_scalar_error(self):
        model, cov, _ = lm_fixture()
        het = CovarianceModel(
            error_cov=ErrorCov.diagonal(np.linspace(1, 2, model.n)),
            ranef_cov=np.zeros((0, 0)), block_covs=(), provenance="Truth",
        )
        with pytest.raises(ValueError, match="sigma"):
            group(model, "x1", het)


class TestValidation:
    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            DirectionSpec(kind="other", label="x")

    def test_scalar_needs_positive_kappa(self):
        with pytest.raises(ValueError, match="kappa"):
            DirectionSpec(kind="scalar", label="x", v=np.ones(3),
                          metric=np.eye(3), kappa=0.0)

    def test_v_sde(self):
        d = DirectionSpec(kind="scalar", label="x", v=np.ones(2),
                          metric=np.eye(2), kappa=4.0)
        assert d.v_sde == pytest.approx(2.0)
