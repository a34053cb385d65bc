import numpy as np
import pytest
from scipy import linalg

import vcadjust as v
from vcadjust.errors import ValidationError
from vcadjust.rcb_classical import rcb_arrays


def _one_factor_instance(seed=0, n=30, p=2, d=5, s2e=1.0, s2b=2.0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    codes = rng.integers(0, d, size=n)
    Z = np.zeros((n, d))
    Z[np.arange(n), codes] = 1.0
    beta = np.array([1.0, -2.0])
    y = X @ beta + Z @ rng.normal(size=d) * np.sqrt(s2b) + rng.normal(size=n) * np.sqrt(s2e)
    return v.LmmSpec(y=y, X=X, random=(Z,), names=("g",))


def _profile_loglik_oracle(spec):
    """Grid-plus-golden maximization of the one-ratio profile likelihood."""
    y, X, Z = spec.y, spec.X, spec.random[0]
    n, p = X.shape
    G = Z @ Z.T

    def prof(log_phi):
        K = np.eye(n) + np.exp(log_phi) * G
        c, low = linalg.cho_factor(K, lower=True)
        ld = 2 * np.sum(np.log(np.diag(c)))
        KiX = linalg.cho_solve((c, low), X)
        beta = np.linalg.solve(X.T @ KiX, KiX.T @ y)
        r = y - X @ beta
        rss = r @ linalg.cho_solve((c, low), r)
        return -0.5 * (n * np.log(2 * np.pi) + n * np.log(rss / n) + ld + n)

    grid = np.linspace(np.log(1e-8), np.log(1e8), 4001)
    vals = [prof(g) for g in grid]
    k = int(np.argmax(vals))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    gr = (np.sqrt(5) - 1) / 2
    a, b = lo, hi
    c1, c2 = b - gr * (b - a), a + gr * (b - a)
    f1, f2 = prof(c1), prof(c2)
    for _ in range(200):
        if f1 < f2:
            a, c1, f1 = c1, c2, f2
            c2 = a + gr * (b - a)
            f2 = prof(c2)
        else:
            b, c2, f2 = c2, c1, f1
            c1 = b - gr * (b - a)
            f1 = prof(c1)
    return max(prof(0.5 * (a + b)), max(vals))


class TestFitLmm:
    def test_gls_identity_at_fitted_components(self):
        spec = _one_factor_instance(seed=3)
        fit = v.fit_lmm(spec, method="ml")
        n = len(spec.y)
        V = fit.sigma_e2 * np.eye(n) + fit.sigma2[0] * (spec.random[0] @ spec.random[0].T)
        Vi = np.linalg.inv(V)
        beta_direct = np.linalg.solve(spec.X.T @ Vi @ spec.X, spec.X.T @ Vi @ spec.y)
        assert np.max(np.abs(fit.beta_hat - beta_direct)) < 1e-10
        cov_direct = np.linalg.inv(spec.X.T @ Vi @ spec.X)
        assert np.max(np.abs(fit.beta_cov - cov_direct)) < 1e-10

    def test_profile_likelihood_oracle(self):
        spec = _one_factor_instance(seed=0, n=30, p=2, d=5)
        fit = v.fit_lmm(spec, method="ml")
        oracle = _profile_loglik_oracle(spec)
        assert fit.loglik >= oracle - 1e-6
        assert abs(fit.loglik - oracle) < 1e-6

    def test_duplicated_residual_flagged(self):
        rng = np.random.default_rng(4)
        n = 20
        X = np.ones((n, 1))
        y = rng.normal(size=n) * 2.0 + 1.0
        spec = v.LmmSpec(y=y, X=X, random=(np.eye(n),), names=("dup",))
        fit = v.fit_lmm(spec, method="ml")
        # total variance is identified even though the split is not
        total = fit.sigma_e2 + fit.sigma2[0]
        ll_direct = -0.5 * n * (
            np.log(2 * np.pi) + np.log(np.mean((y - y.mean()) ** 2)) + 1.0
        )
        assert np.isclose(total, np.mean((y - y.mean()) ** 2), rtol=1e-4)
        assert abs(fit.loglik - ll_direct) < 1e-6
        assert "weakly_identified" in fit.flags or "boundary" in fit.flags

    def test_scaling_equivariance(self):
        spec = _one_factor_instance(seed=8)
        n, p = spec.X.shape
        c = 3.7
        for method, dof in (("ml", n), ("reml", n - p)):
            f1 = v.fit_lmm(spec, method=method)
            f2 = v.fit_lmm(
                v.LmmSpec(y=c * spec.y, X=spec.X, random=spec.random), method=method
            )
            assert np.allclose(f2.beta_hat, c * f1.beta_hat, rtol=1e-6)
            assert np.isclose(f2.sigma_e2, c**2 * f1.sigma_e2, rtol=1e-5)
            assert np.isclose(f2.sigma2[0], c**2 * f1.sigma2[0], rtol=1e-4)
            assert np.isclose(f2.loglik, f1.loglik - dof * np.log(c), atol=1e-6)

    def test_ml_beats_random_admissible_points(self):
        spec = _one_factor_instance(seed=12)
        fit = v.fit_lmm(spec, method="ml")
        rng = np.random.default_rng(0)
        n = len(spec.y)
        G = spec.random[0] @ spec.random[0].T

        def ll(s2e, s2b):
            V = s2e * np.eye(n) + s2b * G
            c, low = linalg.cho_factor(V, lower=True)
            ld = 2 * np.sum(np.log(np.diag(c)))
            ViX = linalg.cho_solve((c, low), spec.X)
            beta = np.linalg.solve(spec.X.T @ ViX, ViX.T @ spec.y)
            r = spec.y - spec.X @ beta
            return -0.5 * (n * np.log(2 * np.pi) + ld + r @ linalg.cho_solve((c, low), r))

        vary = np.var(spec.y)
        for _ in range(100):
            s2e = vary * 10 ** rng.uniform(-2, 2)
            s2b = vary * 10 ** rng.uniform(-2, 2)
            assert fit.loglik >= ll(s2e, s2b) - 1e-8

    def test_rank_deficient_rejected(self):
        rng = np.random.default_rng(1)
        X = np.ones((10, 2))
        with pytest.raises(ValidationError):
            v.LmmSpec(y=rng.normal(size=10), X=X, random=())

    def test_reml_exceeds_its_own_random_points(self):
        spec = _one_factor_instance(seed=21)
        fit = v.fit_lmm(spec, method="reml")
        assert fit.converged
        assert fit.sigma2[0] >= 0.0


class TestEq7Identity:
    def test_balanced_rcb_slope_matches_weighted_form(self, rcb_dataset):
        ds, spec = rcb_dataset
        mx = v.fit_mixed_rcb(ds, spec, method="ml")
        Y, Z, _, _ = rcb_arrays(ds, spec)
        expected = v.gamma_mixed(Z, Y, mx.rho_hat)
        assert abs(mx.gamma_mixed - expected) < 1e-8


class TestContrast:
    def test_unit_vector_returns_coordinate(self):
        spec = _one_factor_instance(seed=5)
        fit = v.fit_lmm(spec, method="ml")
        e1 = np.zeros(len(fit.beta_hat))
        e1[0] = 1.0
        est, se = v.contrast(fit, e1)
        assert np.isclose(est, fit.beta_hat[0])
        assert np.isclose(se, np.sqrt(fit.beta_cov[0, 0]))

    def test_length_mismatch_rejected(self):
        spec = _one_factor_instance(seed=5)
        fit = v.fit_lmm(spec, method="ml")
        with pytest.raises(ValidationError):
            v.contrast(fit, np.ones(5))
