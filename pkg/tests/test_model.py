import numpy as np
import numpy.testing as npt
import pytest
from scipy import stats

from lomaxrace.v1 import distributions
from lomaxrace.v1 import model
from lomaxrace.v1.errors import ConvergenceError, DomainError, ParameterError


def two_risk_params(r=(1.0, 3.0)):
    """One atom per risk, identical coefficients, so shares depend on r only."""
    beta = np.array([[0.2, 0.5], [0.2, 0.5]])
    return model.LdrParams(np.array(r), beta, [0, 1], 2, 1)


X1 = np.array([1.0, -0.4])


class TestHyperparams:

    def test_defaults(self):
        h = model.Hyperparams()
        assert h.to_dict() == {k: 0.01 for k in ('a0', 'b0', 'e0', 'f0', 'e1', 'f1')}

    def test_rejects_nonpositive(self):
        with pytest.raises(ParameterError):
            model.Hyperparams(a0=0.0)

    def test_unknown_key(self):
        with pytest.raises(ParameterError):
            model.Hyperparams.from_dict({'a0': 1.0, 'zeta': 2.0})


class TestLdrParams:

    def test_from_grid_drops_inactive(self):
        r = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        beta = np.arange(18, dtype=float).reshape(2, 3, 3)
        active = np.array([[True, False, True], [False, False, True]])
        p = model.LdrParams.from_grid(r, beta, active)
        assert p.num_atoms == 3
        npt.assert_array_equal(p.risk, [0, 0, 1])
        npt.assert_array_equal(p.subrisk, [0, 2, 2])
        npt.assert_array_equal(p.active_counts(), [2, 1])
        r2, beta2, active2 = p.grid()
        npt.assert_array_equal(active2, active)
        npt.assert_array_equal(r2[active], r[active])
        npt.assert_array_equal(beta2[active], beta[active])

    def test_dict_document(self):
        p = two_risk_params()
        d = p.to_dict()
        assert d['J'] == 2 and d['K'] == 1
        assert d['r'] == [[1.0], [3.0]]
        q = model.LdrParams.from_dict(d)
        npt.assert_array_equal(q.r, p.r)
        npt.assert_array_equal(q.beta, p.beta)
        npt.assert_array_equal(q.risk, p.risk)

    def test_save_load(self, tmp_path):
        p = two_risk_params()
        path = str(tmp_path / 'params.json')
        p.save(path)
        npt.assert_array_equal(model.LdrParams.load(path).beta, p.beta)

    def test_arrays_are_read_only(self):
        p = two_risk_params()
        with pytest.raises(ValueError):
            p.r[0] = 5.0

    @pytest.mark.parametrize('kwargs', [
        dict(r=[1.0, -1.0], beta=[[0.0], [0.0]], risk=[0, 1], num_risks=2, num_subrisks=1),
        dict(r=[1.0], beta=[[0.0]], risk=[2], num_risks=2, num_subrisks=1),
        dict(r=[1.0, 1.0], beta=[[0.0]], risk=[0, 1], num_risks=2, num_subrisks=1),
        dict(r=[], beta=np.zeros((0, 1)), risk=[], num_risks=1, num_subrisks=1),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ParameterError):
            model.LdrParams(**kwargs)

    def test_dimension_mismatch(self):
        with pytest.raises(ParameterError):
            two_risk_params().linear_predictor(np.ones(3))

    def test_bad_document(self):
        with pytest.raises(ParameterError):
            model.LdrParams.from_dict({'J': 2, 'K': 1, 'r': [[1.0]], 'beta': [[[0.0]]]})


class TestSurvival:

    def test_product_of_lomax_survivals(self):
        p = two_risk_params()
        t = np.array([0.0, 0.3, 2.0, 10.0])
        eta = p.linear_predictor(X1)
        expected = np.prod([(1 + np.exp(e) * t) ** -r for e, r in zip(eta, p.r)], axis=0)
        npt.assert_allclose(model.ldr_survival(t, X1, p), expected)

    def test_survival_at_zero(self):
        assert model.ldr_survival(0.0, X1, two_risk_params()) == pytest.approx(1.0)

    def test_single_atom_is_lomax(self):
        p = model.LdrParams([2.5], [[0.3, -1.0]], [0], 1, 1)
        eta = float(p.linear_predictor(X1)[0])
        lomax = distributions.LomaxParams(2.5, np.exp(-eta))
        t = np.linspace(0.0, 5.0, 11)
        npt.assert_allclose(model.ldr_survival(t, X1, p), distributions.lomax_survival(t, lomax))
        npt.assert_allclose(model.ldr_hazard(t, X1, p), distributions.lomax_hazard(t, lomax))

    def test_hazard_is_log_survival_slope(self):
        p = two_risk_params()
        t, h = 1.3, 1e-6
        slope = -(model.ldr_log_survival(t + h, X1, p) - model.ldr_log_survival(t - h, X1, p)) / (2 * h)
        assert model.ldr_hazard(t, X1, p) == pytest.approx(slope, rel=1e-5)

    def test_large_predictor_stays_finite(self):
        p = model.LdrParams([1.0], [[800.0, 0.0]], [0], 1, 1)
        assert np.isfinite(model.ldr_log_survival(1.0, X1, p))

    def test_negative_time(self):
        with pytest.raises(DomainError):
            model.ldr_survival(-1.0, X1, two_risk_params())


class TestSampling:

    def test_event_fields(self, rng):
        t, risk, sub = model.sample_event(X1, two_risk_params(), rng)
        assert t > 0 and risk in (0, 1) and sub == 0

    def test_risk_frequencies_follow_weights(self, rng):
        p = two_risk_params((1.0, 3.0))
        X = np.tile(X1, (40000, 1))
        _, risks, _ = model.sample_events(X, p, rng)
        assert np.mean(risks == 0) == pytest.approx(0.25, abs=0.01)

    def test_times_follow_survival(self, rng):
        p = two_risk_params()
        X = np.tile(X1, (20000, 1))
        times, _, _ = model.sample_events(X, p, rng)
        result = stats.kstest(times, lambda t: 1.0 - model.ldr_survival(t, X1, p))
        assert result.pvalue > 1e-3


class TestCif:

    def test_zero_at_zero(self, rng):
        assert model.cif(X1, 0.0, two_risk_params(), 0, 100, rng) == 0.0

    def test_monotone_in_tau(self, rng):
        values = model.cif(X1, np.array([0.1, 0.5, 1.0, 5.0]), two_risk_params(), 1, 500, rng)
        assert np.all(np.diff(values) >= 0)

    def test_limit_is_risk_share(self, rng):
        # Equal scales make the share of each atom Beta(r_a, sum r - r_a).
        value = model.cif(X1, 1e8, two_risk_params((1.0, 3.0)), 0, 20000, rng)
        assert value == pytest.approx(0.25, abs=0.01)

    def test_risks_sum_to_failure_probability(self, rng):
        p = two_risk_params()
        tau = 0.8
        total = sum(model.cif(X1, tau, p, j, 20000, rng) for j in range(2))
        assert total == pytest.approx(1.0 - model.ldr_survival(tau, X1, p), abs=0.01)

    def test_matrix_agrees_with_scalar(self, rng):
        p = two_risk_params()
        X = np.array([X1, [1.0, 0.7]])
        taus = np.array([0.5, 2.0])
        out = model.cif_matrix(X, taus, p, 20000, rng)
        assert out.shape == (2, 2, 2)
        for i in range(2):
            for j in range(2):
                npt.assert_allclose(out[i, j], model.cif(X[i], taus, p, j, 20000, rng), atol=0.01)

    def test_risk_out_of_range(self, rng):
        with pytest.raises(ParameterError):
            model.cif(X1, 1.0, two_risk_params(), 2, 10, rng)

    def test_n_mc(self, rng):
        with pytest.raises(ParameterError):
            model.cif(X1, 1.0, two_risk_params(), 0, 0, rng)


class TestGammaConvolution:

    shapes = np.array([0.7, 1.5, 2.0])
    scales = np.array([0.5, 1.2, 3.0])

    def exact_cdf(self, q):
        q = np.asarray(q, dtype=float)[..., None]
        return 1.0 - np.prod((self.scales / (q + self.scales)) ** self.shapes, axis=-1)

    def test_single_component(self):
        spec = model.GammaConvolutionSpec([2.0], [1.5])
        npt.assert_allclose(spec.mixture_weights(), [1.0])
        assert spec.num_terms() == 0
        lomax = distributions.LomaxParams(2.0, 1.5)
        assert model.marginal_time_cdf(0.9, spec) == pytest.approx(1.0 - distributions.lomax_survival(0.9, lomax))

    def test_equal_scales_collapse_to_lomax(self):
        spec = model.GammaConvolutionSpec([0.4, 1.1, 2.5], [1.7, 1.7, 1.7])
        q = np.array([0.0, 0.3, 2.0, 15.0])
        npt.assert_allclose(model.marginal_time_cdf(q, spec), 1.0 - (1.0 + q / 1.7) ** -4.0, atol=1e-8)

    @pytest.mark.slow
    def test_cdf_matches_monte_carlo_on_random_specs(self, rng):
        for _ in range(50):
            size = int(rng.integers(2, 6))
            shapes = rng.uniform(0.2, 3.0, size)
            scales = rng.uniform(0.1, 5.0, size)
            spec = model.GammaConvolutionSpec(shapes, scales)
            lam = rng.gamma(shapes, 1.0 / scales, size=(400000, size)).sum(axis=1)
            t = rng.standard_exponential(400000) / lam
            q = np.quantile(t, [0.25, 0.5, 0.75])
            empirical = np.array([np.mean(t < x) for x in q])
            npt.assert_allclose(model.marginal_time_cdf(q, spec), empirical, atol=0.003)

    def test_mass(self):
        spec = model.GammaConvolutionSpec(self.shapes, self.scales)
        w = spec.mixture_weights(1e-6)
        assert 1.0 - 1e-6 <= w.sum() <= 1.0 + 1e-12
        assert np.all(w >= 0)

    def test_cdf_matches_product_form(self):
        spec = model.GammaConvolutionSpec(self.shapes, self.scales)
        q = np.array([0.0, 0.1, 1.0, 4.0, 30.0])
        npt.assert_allclose(model.marginal_time_cdf(q, spec, 1e-8), self.exact_cdf(q), atol=1e-7)

    def test_for_subject_matches_ldr(self):
        p = two_risk_params()
        spec = model.GammaConvolutionSpec.for_subject(X1, p)
        q = np.array([0.2, 1.0, 3.0])
        npt.assert_allclose(model.marginal_time_cdf(q, spec, 1e-8), 1.0 - model.ldr_survival(q, X1, p), atol=1e-7)

    def test_pdf_is_cdf_slope(self):
        spec = model.GammaConvolutionSpec(self.shapes, self.scales)
        q, h = 0.8, 1e-6
        slope = (model.marginal_time_cdf(q + h, spec, 1e-8) - model.marginal_time_cdf(q - h, spec, 1e-8)) / (2 * h)
        assert model.marginal_time_pdf(q, spec, 1e-8) == pytest.approx(slope, rel=1e-4)

    def test_term_cap(self):
        spec = model.GammaConvolutionSpec([1.0, 1.0], [1e-3, 1.0])
        with pytest.raises(ConvergenceError):
            spec.mixture_weights(1e-6, max_terms=3)

    def test_invalid(self):
        with pytest.raises(ParameterError):
            model.GammaConvolutionSpec([1.0, 2.0], [1.0])
        with pytest.raises(ParameterError):
            model.GammaConvolutionSpec([1.0], [1.0]).mixture_weights(0.0)

    def test_sampler_follows_cdf(self, rng):
        spec = model.GammaConvolutionSpec(self.shapes, self.scales)
        draws = model.sample_marginal_time(spec, 1e-6, rng, size=2000)
        assert draws.shape == (2000,)
        assert np.all(draws >= 0)
        assert stats.kstest(draws, lambda q: self.exact_cdf(q)).pvalue > 1e-3

    def test_scalar_draw(self, rng):
        spec = model.GammaConvolutionSpec(self.shapes, self.scales)
        assert isinstance(model.sample_marginal_time(spec, 1e-4, rng), float)
