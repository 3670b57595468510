import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.special import expit
from scipy.stats import norm

from difgate.errors import EmptyData, TooFewNodes, ValidationError
from difgate.irt import GroupModel, ItemParams, make_grid, marginal_loglik, response_prob

slopes = st.floats(0.05, 5.0)
intercepts = st.floats(-5.0, 5.0)
thetas = st.floats(-6.0, 6.0)


class TestResponseProb:
    def test_logit_zero_is_half(self):
        assert response_prob(ItemParams(1.0, 0.0), 0.0) == 0.5

    def test_direct_substitution(self):
        assert response_prob(ItemParams(2.0, 0.0), 0.5) == pytest.approx(0.731059, abs=1e-6)

    def test_zero_linear_predictor(self):
        assert response_prob(ItemParams(1.5, -0.75), 0.5) == 0.5

    @given(slopes, intercepts, thetas, st.floats(0.01, 2.0))
    def test_monotone_in_theta_and_intercept(self, a, b, theta, step):
        item = ItemParams(a, b)
        assert response_prob(item, theta + step) >= response_prob(item, theta)
        assert response_prob(ItemParams(a, b + step), theta) >= response_prob(item, theta)

    @given(slopes, intercepts, thetas)
    def test_intercept_derivative_positive(self, a, b, theta):
        p = response_prob(ItemParams(a, b), theta)
        # d p / d b = p (1 - p)
        assert p * (1 - p) > 0 or p in (0.0, 1.0)

    @pytest.mark.parametrize("a,b", [(0.0, 0.0), (-1.0, 0.0), (1.0, np.inf), (np.nan, 0.0)])
    def test_invalid_params(self, a, b):
        with pytest.raises(ValidationError):
            ItemParams(a, b)


class TestGrid:
    def test_too_few_nodes(self):
        with pytest.raises(TooFewNodes):
            make_grid(20)

    def test_moments(self):
        grid = make_grid(61)
        assert abs(grid.weights.sum() - 1) < 1e-12
        assert abs(grid.weights @ grid.nodes) < 1e-10
        assert abs(grid.weights @ grid.nodes**2 - 1) < 1e-8
        assert np.all(np.diff(grid.nodes) > 0)
        assert np.all(grid.weights > 0)

    def test_fourth_moment(self):
        grid = make_grid(21)
        assert grid.weights @ grid.nodes**4 == pytest.approx(3.0, rel=1e-10)

    def test_immutable(self):
        grid = make_grid()
        with pytest.raises(ValueError):
            grid.nodes[0] = 1.0


class TestMarginalLoglik:
    def model(self, a, b):
        return GroupModel.from_arrays(a, b)

    def test_matches_numeric_integral(self):
        grid = make_grid(61)
        # single-item model is not allowed, so add a second item left missing
        model = self.model([1.0, 1.0], [0.0, 0.0])
        x = np.array([[1.0, np.nan]])
        oracle, _ = quad(lambda t: expit(t) * norm.pdf(t), -np.inf, np.inf, epsabs=1e-13)
        assert marginal_loglik(model, x, grid) == pytest.approx(np.log(oracle), abs=1e-8)

    def test_asymmetric_item_matches_integral(self):
        grid = make_grid(61)
        model = self.model([1.7, 0.6], [-0.4, 0.9])
        x = np.array([[1.0, 0.0]])
        integrand = lambda t: expit(1.7 * t - 0.4) * (1 - expit(0.6 * t + 0.9)) * norm.pdf(t)  # noqa: E731
        oracle, _ = quad(integrand, -np.inf, np.inf, epsabs=1e-13)
        assert marginal_loglik(model, x, grid) == pytest.approx(np.log(oracle), abs=1e-8)

    def test_all_missing_person_contributes_zero(self):
        grid = make_grid()
        model = self.model([1.0, 2.0], [0.3, -0.2])
        x = np.array([[1.0, 0.0], [np.nan, np.nan]])
        assert marginal_loglik(model, x, grid) == pytest.approx(marginal_loglik(model, x[:1], grid), abs=1e-14)

    def test_empty(self):
        grid = make_grid()
        model = self.model([1.0, 2.0], [0.3, -0.2])
        with pytest.raises(EmptyData):
            marginal_loglik(model, np.empty((0, 2)), grid)
        with pytest.raises(EmptyData):
            marginal_loglik(model, np.full((3, 2), np.nan), grid)

    def test_rejects_non_binary(self):
        model = self.model([1.0, 2.0], [0.3, -0.2])
        with pytest.raises(ValidationError):
            marginal_loglik(model, np.array([[2.0, 0.0]]), make_grid())

    def test_additive_and_permutation_invariant(self):
        rng = np.random.default_rng(3)
        grid = make_grid()
        model = self.model(rng.uniform(0.5, 2, 5), rng.normal(size=5))
        x = (rng.random((40, 5)) < 0.5).astype(float)
        x[rng.random(x.shape) < 0.1] = np.nan
        total = marginal_loglik(model, x, grid)
        per_person = sum(marginal_loglik(model, x[j : j + 1], grid) for j in range(len(x)) if not np.all(np.isnan(x[j])))
        assert total == pytest.approx(per_person, rel=1e-12)
        assert marginal_loglik(model, x[rng.permutation(len(x))], grid) == pytest.approx(total, rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(slopes, intercepts.filter(lambda b: abs(b) > 1e-6))
    def test_flipping_to_modal_response_does_not_lower_loglik(self, a, b):
        # a lone observed response: the marginal endorsement rate exceeds 1/2 iff b > 0
        grid = make_grid()
        model = self.model([a, 1.0], [b, 0.0])
        modal = float(b > 0)
        towards = marginal_loglik(model, np.array([[modal, np.nan]]), grid)
        away = marginal_loglik(model, np.array([[1 - modal, np.nan]]), grid)
        assert towards >= away
