"""
Tests for the parameter, model and dataset types.
"""

import numpy as np
import pytest

from core.exceptions import ConfigurationError, EvaluationError, SchemaError
from core.mean_functions import model_m1, model_m2, model_m4
from core.model import (
    SIGMA2_FLOOR,
    Dataset,
    Individual,
    ModelSpec,
    TestSpec,
    Theta,
    gamma_of,
    mean_eval,
    permute_theta,
    project_to_null,
    psd_factor,
    theta_from_gamma,
    unpermute_theta,
)


class TestTheta:
    """Test parameter validation and derived quantities."""

    def test_valid_theta(self):
        """Test construction and the flat view."""
        theta = Theta(beta=[1.0, 2.0], lam=[[1.0, 0.0], [0.5, 2.0]], sigma2=0.3)
        assert theta.p == 2
        assert theta.b == 2
        assert list(theta.as_dict()) == ["beta1", "beta2", "lambda11", "lambda21", "lambda22", "sigma2"]
        assert theta.as_dict()["lambda21"] == 0.5

    def test_immutable(self):
        """Test that arrays cannot be modified in place."""
        theta = Theta(beta=[1.0], lam=[[1.0]], sigma2=1.0)
        with pytest.raises(ValueError):
            theta.lam[0, 0] = 2.0

    def test_invalid_theta(self):
        """Test rejected parameters."""
        with pytest.raises(ConfigurationError):
            Theta(beta=[0.0], lam=[[1.0, 0.5], [0.0, 1.0]], sigma2=1.0)
        with pytest.raises(ConfigurationError):
            Theta(beta=[0.0], lam=[[-1.0]], sigma2=1.0)
        with pytest.raises(ConfigurationError):
            Theta(beta=[0.0], lam=[[1.0]], sigma2=-1.0)
        with pytest.raises(ConfigurationError):
            Theta(beta=[np.nan], lam=[[1.0]], sigma2=1.0)

    @pytest.mark.parametrize("sigma2", [0.0, 1e-9, SIGMA2_FLOOR / 2])
    def test_residual_variance_floor(self, sigma2):
        """Test sigma2 below the floor is rejected and the floor itself accepted."""
        with pytest.raises(ConfigurationError, match="sigma2"):
            Theta(beta=[0.0], lam=[[1.0]], sigma2=sigma2)
        assert Theta(beta=[0.0], lam=[[1.0]], sigma2=SIGMA2_FLOOR).sigma2 == SIGMA2_FLOOR

    def test_equality(self):
        """Test value equality."""
        a = Theta(beta=[1.0], lam=np.diag([1.0, 0.0]), sigma2=1.0)
        b = Theta(beta=[1.0], lam=np.diag([1.0, 0.0]), sigma2=1.0)
        assert a == b
        assert a != a.replace(sigma2=2.0)


class TestCovarianceFactor:
    """Test Gamma = Lambda Lambda^T and its inverse map."""

    def test_gamma_of(self):
        """Test the covariance of the scaled random effect."""
        theta = Theta(beta=[], lam=[[1.0, 0.0], [0.5, 2.0]], sigma2=1.0)
        np.testing.assert_allclose(gamma_of(theta), [[1.0, 0.5], [0.5, 4.25]])
        assert np.array_equal(theta.gamma, gamma_of(theta))

    def test_psd_factor_recovers_lambda(self):
        """Test that factorising Gamma returns the original factor."""
        lam = np.array([[2.0, 0.0, 0.0], [0.3, 1.0, 0.0], [-0.4, 0.2, 0.5]])
        np.testing.assert_allclose(psd_factor(lam @ lam.T), lam, atol=1e-12)

    def test_psd_factor_singular(self):
        """Test zero variances give zero columns."""
        lam = psd_factor(np.diag([1.0, 0.0, 4.0]))
        np.testing.assert_allclose(lam, np.diag([1.0, 0.0, 2.0]))

    def test_psd_factor_rejects_invalid(self):
        """Test non-PSD matrices are refused."""
        with pytest.raises(ConfigurationError):
            psd_factor(np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(ConfigurationError):
            psd_factor(np.array([[0.0, 1.0], [1.0, 1.0]]))

    def test_theta_from_gamma(self):
        """Test building theta from a covariance."""
        theta = theta_from_gamma([1.0], np.diag([4.0, 9.0]), 0.5)
        np.testing.assert_allclose(theta.lam, np.diag([2.0, 3.0]))
        assert theta.sigma2 == 0.5


class TestTestSpec:
    """Test the null space description."""

    def test_validation(self):
        """Test rejected row lists."""
        with pytest.raises(ConfigurationError):
            TestSpec(())
        with pytest.raises(ConfigurationError):
            TestSpec((0,))
        with pytest.raises(ConfigurationError):
            TestSpec((2, 2))
        with pytest.raises(ConfigurationError):
            TestSpec((4,)).validate(3)

    def test_orders(self):
        """Test zero-based, untested and canonical orders."""
        spec = TestSpec((1,))
        assert spec.r == 1
        assert spec.zero_based() == (0,)
        assert spec.untested(3) == (1, 2)
        assert spec.canonical_order(3) == (1, 2, 0)
        assert TestSpec((3, 1)).canonical_order(4) == (1, 3, 0, 2)

    def test_contains_and_project(self):
        """Test null-space membership and projection."""
        spec = TestSpec((2,))
        theta = Theta(beta=[0.0], lam=[[1.0, 0.0], [0.4, 0.7]], sigma2=1.0)
        assert not spec.contains(theta)
        projected = project_to_null(theta, spec)
        assert spec.contains(projected)
        np.testing.assert_allclose(projected.lam, [[1.0, 0.0], [0.0, 0.0]])
        # Projection is idempotent
        assert project_to_null(projected, spec) == projected


class TestPermutation:
    """Test reordering of random effects."""

    def test_round_trip(self):
        """Test permute then unpermute preserves Gamma."""
        theta = Theta(
            beta=[0.0], lam=[[1.0, 0.0, 0.0], [0.5, 2.0, 0.0], [0.1, -0.3, 0.7]], sigma2=1.0
        )
        order = (1, 2, 0)
        permuted = permute_theta(theta, order)
        np.testing.assert_allclose(gamma_of(permuted), gamma_of(theta)[np.ix_(order, order)], atol=1e-12)
        back = unpermute_theta(permuted, order)
        np.testing.assert_allclose(gamma_of(back), gamma_of(theta), atol=1e-12)

    def test_permuted_model(self):
        """Test the permuted model sees the reordered random effects."""
        model = model_m2()
        order = (2, 0, 1)
        x = np.arange(1.0, 4.0).reshape(-1, 1)
        beta = np.array([1.0, 2.0, 0.5])
        s = np.array([0.3, -0.2, 0.1])
        np.testing.assert_allclose(
            model.permuted(order).evaluate(x, beta, s[list(order)]), model.evaluate(x, beta, s)
        )
        assert model.permuted((0, 1, 2)) is model

        with pytest.raises(ConfigurationError):
            model.permuted((0, 0, 1))


class TestModelSpec:
    """Test mean function evaluation."""

    def test_mean_eval(self):
        """Test the scalar evaluation helper."""
        model = model_m1()
        # (1 + 0.5) + 2 * (3 + 0.1)
        assert mean_eval(model, [2.0], [1.0, 3.0], [0.5, 0.1]) == pytest.approx(7.7)

        with pytest.raises(ConfigurationError):
            mean_eval(model, [2.0], [1.0], [0.5, 0.1])

    def test_worked_examples(self):
        """Test known values of the random slope and logistic growth means."""
        assert mean_eval(model_m1(), [3.0], [0.0, 7.0], [0.0, 0.0]) == pytest.approx(21.0)

        m4 = model_m4()
        late = mean_eval(m4, [1500.0], [200.0, 500.0, 150.0], [0.0, 0.0, 0.0])
        assert late == pytest.approx(200.0 / (1.0 + np.exp(-1000.0 / 150.0)), rel=1e-12)
        assert late == pytest.approx(199.746, abs=1e-3)
        # At the shifted inflexion point the curve is at half its shifted asymptote
        midpoint = mean_eval(m4, [530.0], [200.0, 500.0, 150.0], [20.0, 30.0, -40.0])
        assert midpoint == pytest.approx(110.0)

    def test_non_finite_mean(self):
        """Test non-finite means raise EvaluationError with context."""
        model = ModelSpec(
            name="bad",
            p=1,
            b=1,
            mean_fn=lambda x, beta, s: np.full(np.shape(s)[:-1] + (x.shape[0],), np.inf),
        )
        with pytest.raises(EvaluationError) as exc:
            model.evaluate(np.ones((2, 1)), np.ones(1), np.zeros(1), individual_id="7")
        assert exc.value.individual_id == "7"
        assert "7" in str(exc.value)

    def test_invalid_model(self):
        """Test rejected model definitions."""
        with pytest.raises(ConfigurationError):
            ModelSpec(name="m", p=1, b=1, mean_fn=lambda x, b, s: x, lambda_structure="banded")
        with pytest.raises(ConfigurationError):
            ModelSpec(name="m", p=1, b=2, mean_fn=lambda x, b, s: x, beta_start=(1.0,))
        with pytest.raises(ConfigurationError):
            model_m1().check_theta(Theta(beta=[0.0], lam=[[1.0]], sigma2=1.0))


class TestDataset:
    """Test individuals and datasets."""

    def test_individual_validation(self):
        """Test schema checks on one individual."""
        ind = Individual(3, [1.0, 2.0], [0.0, 1.0])
        assert ind.id == "3"
        assert ind.x.shape == (2, 1)
        assert ind.n_obs == 2

        with pytest.raises(SchemaError):
            Individual("a", [1.0, 2.0], [[0.0]])
        with pytest.raises(SchemaError):
            Individual("a", [1.0, np.nan], [0.0, 1.0])
        with pytest.raises(SchemaError):
            Individual("a", [], np.zeros((0, 1)))

    def test_design_groups(self):
        """Test individuals with identical covariates share a group."""
        x = [1.0, 2.0]
        data = Dataset(
            (
                Individual("a", [1.0, 2.0], x),
                Individual("b", [1.0, 2.0, 3.0], [1.0, 2.0, 3.0]),
                Individual("c", [0.5, 0.7], x),
            )
        )
        groups = data.design_groups()
        assert [members for _, members in groups] == [(0, 2), (1,)]
        assert data.n_individuals == 3
        assert data.n_obs == 7
        assert data.n_covariates == 1

    def test_invalid_dataset(self):
        """Test dataset-level schema checks."""
        with pytest.raises(SchemaError):
            Dataset(())
        with pytest.raises(SchemaError):
            Dataset((Individual("a", [1.0], [[1.0]]), Individual("b", [1.0], [[1.0, 2.0]])))
        with pytest.raises(SchemaError):
            Dataset((Individual("a", [1.0, 2.0], [1.0, 2.0]),), j_max=1)

    def test_derived_datasets(self):
        """Test new responses, duplication and the long frame."""
        data = Dataset((Individual("a", [1.0, 2.0], [1.0, 2.0]), Individual("b", [3.0], [5.0])))
        renewed = data.with_responses([np.array([9.0, 8.0]), np.array([7.0])])
        assert [ind.id for ind in renewed] == ["a", "b"]
        np.testing.assert_allclose(renewed.individuals[0].y, [9.0, 8.0])

        doubled = data.duplicated(2)
        assert [ind.id for ind in doubled] == ["a#0", "b#0", "a#1", "b#1"]

        frame = data.to_frame(["age"])
        assert list(frame.columns) == ["id", "y", "age"]
        assert frame["id"].tolist() == ["a", "a", "b"]
