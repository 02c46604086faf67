"""
Tests for constrained maximum likelihood estimation.
"""

from dataclasses import replace

import numpy as np
import pytest

import core.estimate as estimate
from core.estimate import FitOptions, FitResult, _Packer, fit_pair, mle_full, mle_null, starting_values
from core.exceptions import EstimationError
from core.likelihood import loglik, simulate_dataset
from core.model import ModelSpec, TestSpec, Theta


class TestFitOptions:
    """Test optimiser settings."""

    def test_from_config(self):
        """Test the bounds sub-mapping is flattened."""
        opts = FitOptions.from_config(
            {"n_starts": 2, "bounds": {"beta": 50.0, "sigma2_floor": 1e-4}, "ignored": True}, seed=9
        )
        assert opts.n_starts == 2
        assert opts.beta_bound == 50.0
        assert opts.sigma2_floor == 1e-4
        assert opts.seed == 9

    def test_invalid(self):
        """Test rejected settings."""
        with pytest.raises(ValueError):
            FitOptions(n_starts=0)
        with pytest.raises(ValueError):
            FitOptions(x_tol=0.0)
        with pytest.raises(ValueError):
            FitOptions(sigma2_floor=1e-9)


class TestPacker:
    """Test the optimiser vector layout."""

    def test_full_structure_round_trip(self, m1):
        """Test pack/unpack with a full Lambda."""
        packer = _Packer(m1.with_structure("full"), 2, FitOptions())
        theta = Theta(beta=[1.0, 2.0], lam=[[0.5, 0.0], [-0.3, 0.2]], sigma2=1.5)
        assert packer.size == 2 + 3 + 1
        assert packer.unpack(packer.pack(theta)) == theta
        assert packer.diagonal_positions() == [2, 4]

    def test_null_rows_excluded(self, m1):
        """Test only free rows enter the vector and diagonals are bounded below by 0."""
        packer = _Packer(m1, 1, FitOptions())
        assert packer.size == 2 + 1 + 1
        assert packer.lower[2] == 0.0
        theta = packer.unpack(np.array([0.0, 7.0, -1.0, 2.0]))
        assert theta.lam[0, 0] == 0.0
        assert theta.lam[1, 1] == 0.0


class TestStartingValues:
    """Test the heuristic start."""

    def test_reasonable_start(self, m1, m1_data):
        """Test beta from least squares and positive variances."""
        theta = starting_values(m1, m1_data)
        np.testing.assert_allclose(theta.beta, [0.0, 7.0], atol=1.5)
        assert theta.sigma2 > 0
        assert np.all(np.diag(theta.lam) > 0)

    def test_free_rows(self, m1, m1_data):
        """Test rows outside the free block start at zero."""
        theta = starting_values(m1, m1_data, free_rows=1)
        assert theta.lam[1, 1] == 0.0


class TestMaximumLikelihood:
    """Test full and null fits."""

    def test_full_fit(self, m1, m1_data, m1_theta, fast_opts):
        """Test the estimate beats the generating parameter."""
        fit = mle_full(m1, m1_data, opts=fast_opts)
        assert isinstance(fit, FitResult)
        assert fit.loglik >= loglik(m1, m1_data, m1_theta) - 1e-6
        assert fit.loglik == pytest.approx(loglik(m1, m1_data, fit.theta_hat), rel=1e-12)
        assert np.all(np.diag(fit.theta_hat.lam) >= 0)
        np.testing.assert_allclose(fit.theta_hat.beta, [0.0, 7.0], atol=1.5)
        assert fit.restarts_used == 1
        assert fit.summary()["loglik"] == fit.loglik

    def test_null_fit(self, m1, m1_data, fast_opts):
        """Test the null estimate lies in the null space."""
        spec = TestSpec((2,))
        fit = mle_null(m1, m1_data, spec, opts=fast_opts)
        assert spec.contains(fit.theta_hat)
        assert np.all(fit.theta_hat.lam[1, :] == 0.0)

    def test_null_fit_first_row(self, m1, m1_data, fast_opts):
        """Test a tested row that is not last in the original order."""
        spec = TestSpec((1,))
        fit = mle_null(m1, m1_data, spec, opts=fast_opts)
        assert np.all(fit.theta_hat.lam[0, :] == 0.0)
        assert fit.theta_hat.lam[1, 1] >= 0.0

    def test_deterministic(self, m1, m1_data, fast_opts):
        """Test identical inputs give identical estimates."""
        opts = replace(fast_opts, n_starts=2)
        a = mle_full(m1, m1_data, opts=opts)
        b = mle_full(m1, m1_data, opts=opts)
        assert a.theta_hat == b.theta_hat
        assert a.loglik == b.loglik

    def test_powell_agrees(self, m1, m1_data, fast_opts):
        """Test another bounded optimiser reaches the same maximum."""
        nelder = mle_full(m1, m1_data, opts=fast_opts)
        powell = mle_full(m1, m1_data, opts=replace(fast_opts, method="Powell"))
        assert powell.loglik == pytest.approx(nelder.loglik, abs=1e-2)

    def test_all_starts_fail(self, m1_data):
        """Test EstimationError when no start gives a finite likelihood."""

        def mean_fn(x, beta, s):
            s = np.asarray(s)
            value = beta[0] * x[:, 0] + np.zeros(s.shape[:-1] + (x.shape[0],))
            return value if s.ndim == 1 else np.full_like(value, np.nan)

        model = ModelSpec(name="broken", p=1, b=1, mean_fn=mean_fn, linear=False)
        with pytest.raises(EstimationError):
            mle_full(model, m1_data, opts=FitOptions(n_starts=1, max_evals=50))

    @pytest.mark.slow
    def test_logistic_fit(self, m4, m4_data, m4_theta, fast_opts):
        """Test the nonlinear model fit by quadrature."""
        fit = mle_full(m4, m4_data, opts=fast_opts)
        assert fit.loglik >= loglik(m4, m4_data, m4_theta) - 1e-3
        np.testing.assert_allclose(fit.theta_hat.beta, [200.0, 500.0, 150.0], rtol=0.1)


class TestFitPair:
    """Test nesting of the full and null fits."""

    def test_nesting(self, m1, m1_data, fast_opts):
        """Test the full maximum is never below the null maximum."""
        full, null = fit_pair(m1, m1_data, TestSpec((2,)), opts=fast_opts)
        assert full.loglik >= null.loglik

    def test_repair_from_null(self, m1, m1_data, fast_opts, mocker):
        """Test a full fit below the null fit is re-run from the null solution."""
        real = estimate.mle_full
        calls = []

        def degraded(model, dataset, quad=None, opts=None, initial=()):
            calls.append(list(initial))
            result = real(model, dataset, quad, opts, initial)
            return result if initial else replace(result, loglik=-1e9)

        mocker.patch.object(estimate, "mle_full", side_effect=degraded)
        full, null = fit_pair(m1, m1_data, TestSpec((2,)), opts=fast_opts)
        assert len(calls) == 2
        assert calls[1][0] == null.theta_hat
        assert full.loglik >= null.loglik

    def test_fallback_to_null(self, m1, m1_data, fast_opts, mocker):
        """Test the null solution is adopted when refitting does not help."""
        real = estimate.mle_full

        def always_low(model, dataset, quad=None, opts=None, initial=()):
            return replace(real(model, dataset, quad, opts, initial), loglik=-1e9)

        mocker.patch.object(estimate, "mle_full", side_effect=always_low)
        full, null = fit_pair(m1, m1_data, TestSpec((2,)), opts=fast_opts)
        assert full.theta_hat == null.theta_hat
        assert full.loglik == null.loglik
        assert full.converged is False


class TestBoundaryEstimates:
    """Test that variance estimates reach zero exactly."""

    @pytest.mark.slow
    def test_share_of_null_fits_on_boundary(self, m1, m1_theta, m1_design, fast_opts):
        """Test some, but not all, fits under a zero slope variance put it exactly at zero."""
        estimates = []
        for seed in range(12):
            data = simulate_dataset(m1, m1_theta, m1_design, np.random.default_rng(100 + seed))
            estimates.append(mle_full(m1, data, opts=fast_opts).theta_hat.lam[1, 1])
        on_boundary = sum(value == 0.0 for value in estimates)
        assert 0 < on_boundary < len(estimates)
        assert all(value >= 0.0 for value in estimates)
