import itertools
import math

import numpy as np
import numpy.testing as npt
import pytest
from scipy import stats

from lomaxrace.v1 import distributions
from lomaxrace.v1.errors import DomainError, NumericalError, ParameterError


class TestRng:

    def test_generator_passes_through(self, rng):
        assert distributions.make_rng(rng) is rng

    def test_seeded_is_reproducible(self):
        a = distributions.make_rng(5).random(4)
        b = distributions.make_rng(5).random(4)
        npt.assert_array_equal(a, b)

    def test_split_children_differ(self, rng):
        children = distributions.split_rng(rng, 3)
        assert len(children) == 3
        draws = [c.random() for c in children]
        assert len(set(draws)) == 3


class TestCensorInterval:

    def test_right(self):
        iv = distributions.CensorInterval.right(2.5)
        assert iv.is_right_censored
        assert iv == distributions.CensorInterval(2.5)

    @pytest.mark.parametrize('lower,upper', [(-1.0, 2.0), (3.0, 3.0), (4.0, 1.0)])
    def test_invalid(self, lower, upper):
        with pytest.raises(ParameterError):
            distributions.CensorInterval(lower, upper)


class TestTruncatedExponential:

    def test_right_censored_is_shifted(self, rng):
        iv = distributions.CensorInterval.right(2.0)
        t = distributions.sample_truncated_exponential(0.5, iv, rng, size=100000)
        assert np.all(t > 2.0)
        assert abs(t.mean() - 4.0) < 0.05

    def test_bounded_stays_inside(self, rng):
        iv = distributions.CensorInterval(1.0, 1.5)
        t = distributions.sample_truncated_exponential(3.0, iv, rng, size=50000)
        assert np.all(t >= 1.0) and np.all(t < 1.5)

    def test_bounded_matches_truncated_cdf(self, rng):
        iv = distributions.CensorInterval(0.5, 2.0)
        rate = 1.5
        t = distributions.sample_truncated_exponential(rate, iv, rng, size=20000)
        mass = math.exp(-rate * 0.5) - math.exp(-rate * 2.0)

        def cdf(s):
            return (math.exp(-rate * 0.5) - np.exp(-rate * s)) / mass

        assert stats.kstest(t, cdf).pvalue > 1e-3

    def test_rejects_nonpositive_rate(self, rng):
        with pytest.raises(ParameterError):
            distributions.sample_truncated_exponential(0.0, distributions.CensorInterval.right(1.0), rng)


class TestLomax:

    p = distributions.LomaxParams(3.0, 2.0)

    def test_closed_forms(self):
        t = np.array([0.0, 0.5, 4.0])
        r, b = 3.0, 2.0
        npt.assert_allclose(distributions.lomax_density(t, self.p), r * b ** r / (t + b) ** (r + 1))
        npt.assert_allclose(distributions.lomax_survival(t, self.p), (1 + t / b) ** -r)
        npt.assert_allclose(distributions.lomax_hazard(t, self.p), r / (t + b))

    def test_scalar_in_scalar_out(self):
        assert isinstance(distributions.lomax_survival(1.0, self.p), float)

    def test_mean(self):
        assert self.p.mean == pytest.approx(1.0)
        with pytest.raises(ParameterError):
            distributions.LomaxParams(0.5, 1.0).mean

    def test_negative_time(self):
        with pytest.raises(DomainError):
            distributions.lomax_density(-0.1, self.p)

    def test_invalid_params(self):
        with pytest.raises(ParameterError):
            distributions.LomaxParams(0.0, 1.0)

    def test_sampler_matches_scipy(self, rng):
        t = distributions.sample_lomax(self.p, rng, size=20000)
        assert stats.kstest(t, self.p.frozen().cdf).pvalue > 1e-3

    def test_tiny_shape_stays_finite(self, rng):
        t = distributions.sample_lomax(distributions.LomaxParams(1e-3, 1.0), rng, size=2000)
        assert t.shape == (2000,)
        assert np.all(np.isfinite(t)) and np.all(t > 0)

    def test_scalar_draw(self, rng):
        assert isinstance(distributions.sample_lomax(self.p, rng), float)


class TestLogGamma:

    def test_mean_of_exp(self, rng):
        g = np.exp(distributions.sample_log_gamma(2.5, rng, size=100000))
        assert abs(g.mean() - 2.5) < 0.03

    def test_tiny_shape_stays_finite(self, rng):
        lg = distributions.sample_log_gamma(np.full(1000, 1e-3), rng)
        assert lg.shape == (1000,)
        assert np.all(np.isfinite(lg))


class TestPolyaGamma:

    def test_moments_at_zero_tilt(self):
        mean, var = distributions.polya_gamma_moments(1.0, 0.0)
        assert float(mean) == pytest.approx(0.25)
        assert float(var) == pytest.approx(1.0 / 24.0)

    def test_moments_continuous_across_branch(self):
        lo = distributions.polya_gamma_moments(2.0, 0.0099)
        hi = distributions.polya_gamma_moments(2.0, 0.0101)
        npt.assert_allclose(lo, hi, rtol=1e-4)

    def test_closed_form_mean(self):
        mean, _ = distributions.polya_gamma_moments(3.0, 2.0)
        assert float(mean) == pytest.approx(3.0 * math.tanh(1.0) / 4.0)

    def test_approx_draws_match_moments(self, rng):
        b = np.full(100000, 1.5)
        c = np.full(100000, 2.0)
        draws = distributions.sample_polya_gamma_approx(b, c, rng)
        mean, var = distributions.polya_gamma_moments(1.5, 2.0)
        assert np.all(draws > 0)
        assert draws.mean() == pytest.approx(float(mean), rel=0.02)
        assert draws.var() == pytest.approx(float(var), rel=0.1)

    def test_approx_variance_at_zero_tilt(self, rng):
        draws = distributions.sample_polya_gamma_approx(np.full(100000, 2.0), 0.0, rng)
        assert draws.mean() == pytest.approx(0.5, rel=0.01)
        assert draws.var() == pytest.approx(2.0 / 24.0, rel=0.05)


class TestCrt:

    def test_zero_customers(self, rng):
        assert distributions.sample_crt(0, 2.0, rng) == 0

    def test_bounds_and_mean(self, rng):
        n, r = 30, 1.7
        draws = np.array([distributions.sample_crt(n, r, rng) for _ in range(20000)])
        assert draws.min() >= 1 and draws.max() <= n
        expected = np.sum(r / (r + np.arange(n)))
        assert abs(draws.mean() - expected) < 0.05

    @pytest.mark.parametrize('n', [1, 2, 3, 4, 5])
    def test_pmf_matches_enumeration(self, n, rng):
        r = 1.3
        probs = r / (r + np.arange(n))
        pmf = np.zeros(n + 1)
        for outcome in itertools.product((0, 1), repeat=n):
            b = np.array(outcome)
            pmf[b.sum()] += np.prod(np.where(b == 1, probs, 1.0 - probs))
        draws = np.array([distributions.sample_crt(n, r, rng) for _ in range(20000)])
        assert draws.min() >= 1 and draws.max() <= n
        observed = np.bincount(draws, minlength=n + 1)[1:]
        if n == 1:
            assert observed[0] == draws.size
            return
        assert stats.chisquare(observed, pmf[1:] * draws.size).pvalue > 1e-3

    def test_bad_concentration(self, rng):
        with pytest.raises(ParameterError):
            distributions.sample_crt(3, 0.0, rng)


class TestGaussian:

    def test_cholesky_reconstructs(self):
        m = np.array([[4.0, 1.0], [1.0, 3.0]])
        factor = distributions.jittered_cholesky(m)
        npt.assert_allclose(factor @ factor.T, m)

    def test_singular_gets_jitter(self):
        factor = distributions.jittered_cholesky(np.ones((2, 2)))
        npt.assert_allclose(factor @ factor.T, np.ones((2, 2)), atol=1e-5)

    def test_indefinite_raises(self):
        with pytest.raises(NumericalError):
            distributions.jittered_cholesky(-np.eye(3))

    def test_precision_draws(self, rng):
        precision = np.array([[2.0, 0.5], [0.5, 1.0]])
        linear = np.array([1.0, 1.0])
        draws = np.array([distributions.sample_mvn_precision(precision, linear, rng) for _ in range(20000)])
        npt.assert_allclose(draws.mean(axis=0), np.linalg.solve(precision, linear), atol=0.03)
        npt.assert_allclose(np.cov(draws.T), np.linalg.inv(precision), atol=0.04)

    def test_covariance_draws(self, rng):
        covariance = np.array([[1.0, 0.9], [0.9, 1.0]])
        draws = np.array([distributions.sample_mvn(np.array([1.0, -2.0]), covariance, rng) for _ in range(20000)])
        npt.assert_allclose(draws.mean(axis=0), [1.0, -2.0], atol=0.03)
        assert np.corrcoef(draws.T)[0, 1] == pytest.approx(0.9, abs=0.02)

    def test_mvn_rejects_asymmetric(self, rng):
        with pytest.raises(ParameterError):
            distributions.sample_mvn(np.zeros(2), np.array([[1.0, 0.2], [0.0, 1.0]]), rng)


class TestExponentialRace:

    def test_winner_frequencies(self, rng):
        rates = np.array([1.0, 2.0, 3.0])
        wins = np.zeros(3)
        for _ in range(30000):
            winner, t = distributions.exponential_race(rates, rng)
            assert t > 0
            wins[winner] += 1
        npt.assert_allclose(wins / wins.sum(), rates / rates.sum(), atol=0.015)

    def test_winner_independent_of_time(self, rng):
        races = [distributions.exponential_race([2.0, 3.0, 5.0], rng) for _ in range(20000)]
        winners = np.array([w for w, _ in races])
        times = np.array([t for _, t in races])
        quartile = np.searchsorted(np.quantile(times, [0.25, 0.5, 0.75]), times)
        table = np.zeros((3, 4))
        np.add.at(table, (winners, quartile), 1)
        assert stats.chi2_contingency(table)[1] > 0.01
        # The winning time is Exp(10) whoever wins.
        assert stats.kstest(times, stats.expon(scale=0.1).cdf).pvalue > 1e-3

    def test_empty(self, rng):
        with pytest.raises(ParameterError):
            distributions.exponential_race([], rng)
