"""REML estimation, Henderson solves, plug-in covariances, and caic."""

import numpy as np
import pytest
from numpy.linalg import inv

from selmix.mmfit import (
    FitError,
    caic,
    fit_model,
    fit_reml,
    penalty_matrix,
    plugin_covariance,
    solve_blup,
)
from selmix.modelcore import (
    CovarianceModel,
    ErrorCov,
    ModelSpec,
    RanefBlock,
    is_psd,
)


def one_way(m=8, k=6):
    """Balanced random-intercept layout: X = 1, Z = level indicators."""
    n = m * k
    z = np.kron(np.eye(m), np.ones((k, 1)))
    return ModelSpec(
        fixed_design=np.ones((n, 1)),
        random_design=z,
        column_labels=("(Intercept)",) + ("g",) * m,
        ranef_blocks=(RanefBlock("g", "unstructured", m, 1),),
    )


def one_way_data(m=8, k=6, sd_b=2.0, sd_e=1.0, seed=0):
    rng = np.random.default_rng(seed)
    b = sd_b * rng.standard_normal(m)
    y = 1.5 + np.repeat(b, k) + sd_e * rng.standard_normal(m * k)
    return one_way(m, k), y


def anova_moments(y, m, k):
    """(MSE, MSB) for the balanced one-way table."""
    cells = y.reshape(m, k)
    means = cells.mean(axis=1)
    mse = np.sum((cells - means[:, None]) ** 2) / (m * (k - 1))
    msb = k * np.sum((means - y.mean()) ** 2) / (m - 1)
    return float(mse), float(msb)


def slope_model(n=40, seed=1):
    """Two-column fixed design with an unstructured two-dim random block."""
    rng = np.random.default_rng(seed)
    x = np.column_stack([np.ones(n), rng.standard_normal(n)])
    z = rng.standard_normal((n, 4))
    return ModelSpec(
        fixed_design=x,
        random_design=z,
        column_labels=("(Intercept)", "x", "g", "g", "g", "g"),
        ranef_blocks=(RanefBlock("g", "unstructured", 2, 2),),
    ), rng


class TestRemlClosedForm:
    def test_balanced_anova(self):
        m, k = 8, 6
        model, y = one_way_data(m, k)
        mse, msb = anova_moments(y, m, k)
        cov = fit_reml(model, y)
        assert cov.provenance == "ModelEstimate"
        sigma2 = cov.error_cov.diagonal_values()[0]
        tau2 = cov.block_covs[0][0, 0]
        assert sigma2 == pytest.approx(mse, rel=1e-5)
        assert tau2 == pytest.approx((msb - mse) / k, rel=1e-5)

    def test_boundary_at_zero_between_variance(self):
        m, k = 5, 4
        model = one_way(m, k)
        # identical within-group pattern: the group means coincide exactly
        y = np.tile([0.3, -1.1, 0.8, 0.0], m)
        cov = fit_reml(model, y)
        assert cov.block_covs[0][0, 0] == pytest.approx(0.0, abs=1e-8)
        fit = fit_model(model, y)
        assert fit.boundary

    def test_determinism(self):
        model, y = one_way_data(seed=3)
        f1 = fit_model(model, y)
        f2 = fit_model(model, y)
        assert np.array_equal(f1.reml_theta, f2.reml_theta)
        assert np.array_equal(f1.beta_hat, f2.beta_hat)
        assert f1.loglik == f2.loglik

    def test_fit_model_matches_two_step(self):
        model, y = one_way_data(seed=4)
        joint = fit_model(model, y)
        two_step = solve_blup(model, fit_reml(model, y), y)
        assert joint.beta_hat == pytest.approx(two_step.beta_hat, rel=1e-8)
        assert joint.edf == pytest.approx(two_step.edf, rel=1e-8)
        assert joint.loglik == pytest.approx(two_step.loglik, rel=1e-8)


class TestSolveBlup:
    def test_henderson_identity(self):
        model, rng = slope_model()
        cov = CovarianceModel.from_blocks(
            ErrorCov.diagonal(rng.uniform(0.5, 2.0, model.n)),
            model.ranef_blocks,
            [np.array([[1.0, 0.3], [0.3, 0.8]])],
        )
        y = rng.standard_normal(model.n)
        fit = solve_blup(model, cov, y)
        gamma = np.concatenate([fit.beta_hat, fit.b_hat])
        c = model.joint_design
        rinv_c = cov.error_cov.solve(c)
        lhs = (c.T @ rinv_c + penalty_matrix(model, cov)) @ gamma
        np.testing.assert_allclose(lhs, rinv_c.T @ y, atol=1e-9)
        np.testing.assert_allclose(fit.fitted, c @ gamma, atol=1e-12)

    def test_q0_is_ols(self):
        rng = np.random.default_rng(5)
        x = np.column_stack([np.ones(30), rng.standard_normal((30, 2))])
        model = ModelSpec(x, np.empty((30, 0)), ("(Intercept)", "a", "b"))
        y = rng.standard_normal(30)
        fit = fit_model(model, y)
        ref, *_ = np.linalg.lstsq(x, y, rcond=None)
        np.testing.assert_allclose(fit.beta_hat, ref, atol=1e-10)
        assert fit.b_hat.size == 0
        assert fit.edf == pytest.approx(3.0, abs=1e-10)
        resid = y - x @ ref
        sigma2 = float(resid @ resid) / (30 - 3)
        np.testing.assert_allclose(fit.k_inv, sigma2 * inv(x.T @ x), rtol=1e-9)

    def test_dense_r_gls(self):
        rng = np.random.default_rng(6)
        x = np.column_stack([np.ones(20), rng.standard_normal(20)])
        model = ModelSpec(x, np.empty((20, 0)), ("(Intercept)", "x"))
        a = rng.standard_normal((20, 20))
        sigma = a @ a.T + 20 * np.eye(20)
        cov = CovarianceModel(error_cov=ErrorCov.from_dense(sigma),
                              ranef_cov=np.zeros((0, 0)), block_covs=(),
                              provenance="Truth")
        y = rng.standard_normal(20)
        fit = solve_blup(model, cov, y)
        si = inv(sigma)
        ref = inv(x.T @ si @ x) @ x.T @ si @ y
        np.testing.assert_allclose(fit.beta_hat, ref, atol=1e-10)

    def test_one_way_blup_closed_form(self):
        m, k = 6, 5
        model, y = one_way_data(m, k, seed=7)
        sigma2, tau2 = 1.3, 0.9
        cov = CovarianceModel.from_blocks(
            ErrorCov.scalar(sigma2, m * k), model.ranef_blocks, [tau2])
        fit = solve_blup(model, cov, y)
        # balanced data: beta_hat is the grand mean and each b_hat shrinks
        # the group-mean deviation by k tau2 / (sigma2 + k tau2)
        assert fit.beta_hat[0] == pytest.approx(y.mean(), abs=1e-10)
        shrink = k * tau2 / (sigma2 + k * tau2)
        means = y.reshape(m, k).mean(axis=1)
        np.testing.assert_allclose(
            fit.b_hat, shrink * (means - y.mean()), atol=1e-10)

    def test_shrinkage_and_edf_monotone(self):
        m, k = 6, 5
        model, y = one_way_data(m, k, seed=8)
        norms, edfs = [], []
        for tau2 in [1e-10, 1e-2, 1e-1, 1.0, 10.0, 1e4, 1e10]:
            cov = CovarianceModel.from_blocks(
                ErrorCov.scalar(1.0, m * k), model.ranef_blocks, [tau2])
            fit = solve_blup(model, cov, y)
            norms.append(float(np.linalg.norm(fit.b_hat)))
            edfs.append(fit.edf)
        assert all(a <= b + 1e-12 for a, b in zip(norms, norms[1:]))
        assert all(a <= b + 1e-12 for a, b in zip(edfs, edfs[1:]))
        assert edfs[0] == pytest.approx(model.p, abs=1e-6)
        # intercept overlaps the indicator span, so the saturated trace is
        # p + m - 1 rather than p + m
        assert edfs[-1] == pytest.approx(model.p + m - 1, abs=1e-4)

    def test_bayes_covariance_dominates_classical(self):
        model, rng = slope_model(seed=9)
        cov = CovarianceModel.from_blocks(
            ErrorCov.scalar(0.7, model.n), model.ranef_blocks,
            [np.array([[0.5, -0.1], [-0.1, 0.4]])])
        fit = solve_blup(model, cov, rng.standard_normal(model.n))
        c = model.joint_design
        ctr_c = c.T @ cov.error_cov.solve(c)
        classical = fit.k_inv @ ctr_c @ fit.k_inv
        assert is_psd(fit.k_inv - classical)

    def test_length_mismatch(self):
        model, y = one_way_data(seed=17)
        cov = plugin_covariance("VarY", model, y)
        with pytest.raises(FitError, match="length"):
            solve_blup(model, cov, np.zeros(5))


class TestFitErrors:
    def test_singular_fixed_design(self):
        x = np.column_stack([np.ones(10), np.ones(10)])
        model = ModelSpec(x, np.empty((10, 0)), ("a", "b"))
        with pytest.raises(FitError, match="singular"):
            fit_reml(model, np.arange(10.0))

    def test_no_residual_dof(self):
        x = np.eye(4)
        model = ModelSpec(x, np.empty((4, 0)), ("a", "b", "c", "d"))
        with pytest.raises(FitError, match="degrees of freedom"):
            fit_reml(model, np.ones(4))


class TestPlugins:
    def test_var_y(self):
        model, y = one_way_data(seed=10)
        cov = plugin_covariance("VarY", model, y)
        assert cov.provenance == "VarY"
        np.testing.assert_allclose(
            cov.error_cov.diagonal_values(), np.var(y, ddof=1))
        np.testing.assert_allclose(cov.ranef_cov, 0.0)
        np.testing.assert_allclose(cov.block_covs[0], 0.0)

    def test_model_estimate(self):
        model, y = one_way_data(seed=11)
        cov = plugin_covariance("ModelEstimate", model, y)
        ref = fit_reml(model, y)
        np.testing.assert_allclose(cov.ranef_cov, ref.ranef_cov)
        assert cov.provenance == "ModelEstimate"

    def test_icm_uses_intercept_only_fixed_part(self):
        model, rng = slope_model(seed=12)
        beta = np.array([0.5, 3.0])
        y = model.fixed_design @ beta + rng.standard_normal(model.n)
        cov = plugin_covariance("ICM", model, y)
        assert cov.provenance == "ICM"
        icm_model = ModelSpec(
            np.ones((model.n, 1)), model.random_design,
            ("(Intercept)",) + ("g",) * 4, model.ranef_blocks)
        ref = fit_reml(icm_model, y)
        np.testing.assert_allclose(cov.ranef_cov, ref.ranef_cov)
        np.testing.assert_allclose(cov.error_cov.as_matrix(),
                                   ref.error_cov.as_matrix())

    def test_truth_and_unknown(self):
        model, y = one_way_data(seed=13)
        truth = CovarianceModel.from_blocks(
            ErrorCov.scalar(1.0, model.n), model.ranef_blocks, [4.0])
        assert plugin_covariance("Truth", model, y, truth=truth) is truth
        with pytest.raises(ValueError, match="Truth"):
            plugin_covariance("Truth", model, y)
        with pytest.raises(ValueError, match="unknown"):
            plugin_covariance("Oracle", model, y)


class TestCaic:
    def test_formula(self):
        model, y = one_way_data(seed=14)
        cov = fit_reml(model, y)
        fit = solve_blup(model, cov, y)
        expect = -2.0 * fit.loglik + 2.0 * (fit.edf + 1)
        assert caic(model, cov, y) == pytest.approx(expect, rel=1e-12)
        assert caic(model, cov, y, fit=fit) == pytest.approx(expect, rel=1e-12)

    def test_q0_reduces_to_gaussian_aic_form(self):
        rng = np.random.default_rng(15)
        x = np.column_stack([np.ones(25), rng.standard_normal(25)])
        model = ModelSpec(x, np.empty((25, 0)), ("(Intercept)", "x"))
        y = x @ np.array([1.0, 2.0]) + rng.standard_normal(25)
        cov = fit_reml(model, y)
        s2 = cov.error_cov.diagonal_values()[0]
        resid = y - x @ np.linalg.lstsq(x, y, rcond=None)[0]
        loglik = -0.5 * (25 * np.log(2 * np.pi * s2) + resid @ resid / s2)
        assert caic(model, cov, y) == pytest.approx(
            -2 * loglik + 2 * (2 + 1), rel=1e-10)

    def test_prefers_true_signal_column(self):
        rng = np.random.default_rng(16)
        x_extra = rng.standard_normal(60)
        y = 2.0 + 3.0 * x_extra + rng.standard_normal(60)
        null = ModelSpec(np.ones((60, 1)), np.empty((60, 0)), ("(Intercept)",))
        full = ModelSpec(np.column_stack([np.ones(60), x_extra]),
                         np.empty((60, 0)), ("(Intercept)", "x"))
        c_null = caic(null, fit_reml(null, y), y)
        c_full = caic(full, fit_reml(full, y), y)
        assert c_full < c_null
