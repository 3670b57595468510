import numpy as np
import pytest
from scipy.special import expit

from difgate.errors import EmptyData, EstimationError, GroupMissing, TooFewItems, ValidationError
from difgate.estimation import (
    EMSettings,
    ResponseDataset,
    ScreenRules,
    _score,
    fit_both_groups,
    fit_group,
    screen_and_fit,
    screen_items,
    with_duplicates,
)
from difgate.irt import GroupModel, make_grid, marginal_loglik


def simulate(a, b, n, rng, group=0):
    a, b = np.asarray(a, float), np.asarray(b, float)
    theta = rng.standard_normal(n)
    x = (rng.random((n, a.size)) < expit(np.outer(theta, a) + b)).astype(float)
    return ResponseDataset(x, np.full(n, group))


@pytest.fixture(scope="module")
def small_fit():
    rng = np.random.default_rng(5)
    data = simulate(rng.uniform(0.7, 1.8, 6), rng.uniform(-1, 1, 6), 800, rng)
    return data, fit_group(data)


class TestDataset:
    def test_counts(self):
        d = ResponseDataset(np.array([[1, 0], [0, np.nan], [1, 1]]), [0, 1, 1])
        assert (d.n0, d.n1, d.m, d.n) == (1, 2, 2, 3)
        assert d.item_names == ("item1", "item2")

    @pytest.mark.parametrize("x,g", [([[2, 0]], [0]), ([[1, 0]], [3]), ([[1, 0]], [0, 1])])
    def test_invalid(self, x, g):
        with pytest.raises(ValidationError):
            ResponseDataset(np.array(x, float), g)

    def test_read_only(self):
        d = ResponseDataset(np.array([[1.0, 0.0]]), [0])
        with pytest.raises(ValueError):
            d.responses[0, 0] = 0.0


class TestFitGroup:
    def test_recovery(self):
        rng = np.random.default_rng(2024)
        m = 16
        data = simulate(np.full(m, 1.2), np.full(m, 0.3), 5000, rng)
        fit = fit_group(data)
        se = fit.standard_errors.reshape(m, 2)
        est = fit.params.reshape(m, 2)
        within = np.all(np.abs(est - [1.2, 0.3]) <= 3 * se, axis=1)
        assert within.sum() >= 15

    def test_score_at_maximum(self, small_fit):
        data, fit = small_fit
        x = data.responses
        obs = (~np.isnan(x)).astype(float)
        score, ll = _score(fit.params, np.nan_to_num(x), obs, make_grid())
        assert np.max(np.abs(score)) <= 1e-5
        assert ll == pytest.approx(fit.loglik, rel=1e-12)
        assert ll == pytest.approx(marginal_loglik(fit.model, x, make_grid()), rel=1e-10)

    def test_em_ascent(self, small_fit):
        trace = np.array(small_fit[1].convergence.loglik_trace)
        assert np.all(np.diff(trace) >= -1e-8 * np.abs(trace[1:]))

    def test_covariance_psd_symmetric(self, small_fit):
        cov = small_fit[1].covariance
        assert np.allclose(cov, cov.T, atol=1e-12)
        assert np.linalg.eigvalsh(cov).min() >= -1e-8

    def test_deterministic(self, small_fit):
        data, fit = small_fit
        again = fit_group(data)
        assert np.array_equal(again.params, fit.params)
        assert np.array_equal(again.covariance, fit.covariance)

    def test_item_order_invariance(self, small_fit):
        data, fit = small_fit
        perm = np.array([3, 0, 5, 1, 4, 2])
        refit = fit_group(data.items(perm))
        idx = np.ravel([[2 * i, 2 * i + 1] for i in perm])
        assert np.allclose(refit.params, fit.params[idx], atol=1e-5)
        assert np.allclose(refit.covariance, fit.covariance[np.ix_(idx, idx)], rtol=1e-3, atol=1e-7)

    def test_duplicated_persons_halve_covariance(self, small_fit):
        data, fit = small_fit
        twice = fit_group(with_duplicates(data), settings=EMSettings(tol=1e-7))
        once = fit_group(data, settings=EMSettings(tol=1e-7))
        assert np.allclose(twice.params, once.params, atol=1e-6)
        assert np.allclose(twice.covariance, once.covariance / 2, rtol=1e-3)

    def test_all_correct_item(self):
        rng = np.random.default_rng(1)
        data = simulate([1.0, 1.3, 0.8, 1.1], [0.0, 0.4, -0.3, 0.2], 400, rng)
        x = data.responses.copy()
        x[:, 0] = 1.0
        with pytest.raises(EstimationError):
            fit_group(ResponseDataset(x, data.group))

    def test_all_correct_item_caught_by_screen(self):
        rng = np.random.default_rng(1)
        data = simulate([1.0, 1.3, 0.8, 1.1], [0.0, 0.4, -0.3, 0.2], 400, rng)
        x = data.responses.copy()
        x[:, 0] = 1.0
        screened, report = screen_items(ResponseDataset(x, data.group))
        assert report.dropped == (("item1", "endorsement"),)
        assert screened.m == 3

    def test_empty(self):
        with pytest.raises(EmptyData):
            fit_group(np.full((3, 2), np.nan))

    def test_plain_matrix_input(self, small_fit):
        data, fit = small_fit
        assert np.array_equal(fit_group(data.responses).params, fit.params)

    def test_missing_responses_allowed(self):
        rng = np.random.default_rng(8)
        data = simulate(np.ones(5), np.zeros(5), 600, rng)
        x = data.responses.copy()
        x[rng.random(x.shape) < 0.2] = np.nan
        fit = fit_group(ResponseDataset(x, data.group))
        assert np.all(fit.model.slopes > 0)


class TestBothGroups:
    def test_group_missing(self):
        data = ResponseDataset(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 0])
        with pytest.raises(GroupMissing):
            fit_both_groups(data)

    def test_same_distribution_agrees(self):
        rng = np.random.default_rng(77)
        a, b = rng.uniform(0.7, 1.6, 6), rng.uniform(-1, 1, 6)
        d0, d1 = simulate(a, b, 4000, rng), simulate(a, b, 4000, rng, group=1)
        data = ResponseDataset(np.vstack([d0.responses, d1.responses]), np.r_[d0.group, d1.group])
        params = fit_both_groups(data)
        nu = params.nu().reshape(-1, 4)
        se = np.sqrt(np.diag(params.nu_covariance())).reshape(-1, 4)
        diff = np.abs(nu[:, :2] - nu[:, 2:])
        pooled = np.hypot(se[:, :2], se[:, 2:])
        assert np.all(diff <= 3 * pooled)

    def test_cross_group_covariance_zero(self):
        rng = np.random.default_rng(3)
        d0, d1 = simulate(np.ones(3), np.zeros(3), 300, rng), simulate(np.ones(3), np.zeros(3), 300, rng, 1)
        data = ResponseDataset(np.vstack([d0.responses, d1.responses]), np.r_[d0.group, d1.group])
        cov = fit_both_groups(data).nu_covariance().reshape(3, 4, 3, 4)
        assert np.all(cov[:, :2, :, 2:] == 0)
        assert np.all(cov[:, 2:, :, :2] == 0)


class TestScreening:
    def data(self, rng, n=1000):
        d = simulate(np.ones(4), np.zeros(4), n, rng)
        return ResponseDataset(d.responses, rng.integers(0, 2, n))

    def test_high_endorsement_dropped(self):
        rng = np.random.default_rng(0)
        d = self.data(rng)
        x = d.responses.copy()
        x[:, 2] = (rng.random(d.n) < 0.99).astype(float)
        screened, report = screen_items(ResponseDataset(x, d.group))
        assert report.dropped == (("item3", "endorsement"),)
        assert screened.item_names == ("item1", "item2", "item4")

    def test_low_coverage_dropped(self):
        rng = np.random.default_rng(0)
        d = self.data(rng)
        x = d.responses.copy()
        x[rng.random(d.n) > 0.05, 1] = np.nan
        _, report = screen_items(ResponseDataset(x, d.group))
        assert report.dropped == (("item2", "coverage"),)

    def test_clean_data_unchanged(self):
        d = self.data(np.random.default_rng(0))
        screened, report = screen_items(d)
        assert screened is d
        assert not report

    def test_persons_without_responses_dropped(self):
        d = self.data(np.random.default_rng(0))
        x = d.responses.copy()
        x[:3] = np.nan
        screened, report = screen_items(ResponseDataset(x, d.group))
        assert report.dropped_persons == 3
        assert screened.n == d.n - 3

    def test_too_few_items(self):
        x = np.array([[1.0, 1.0, 0.0]] * 50 + [[1.0, 1.0, 1.0]] * 50)
        with pytest.raises(TooFewItems):
            screen_items(ResponseDataset(x, [0, 1] * 50))

    def test_discrimination_screen_refits(self):
        rng = np.random.default_rng(12)
        n = 3000
        a = np.array([1.2, 1.0, 1.5, 0.9, 1.1, 0.01])
        d0, d1 = simulate(a, np.zeros(6), n, rng), simulate(a, np.zeros(6), n, rng, 1)
        data = ResponseDataset(np.vstack([d0.responses, d1.responses]), np.r_[d0.group, d1.group])
        screened, params, report = screen_and_fit(data, rules=ScreenRules())
        assert ("item6", "discrimination") in report.dropped
        assert params.m == 5
