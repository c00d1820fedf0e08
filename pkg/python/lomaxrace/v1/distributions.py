"""Random-variate samplers and density primitives used by the LDR model.

Every sampler takes a numpy Generator; nothing here touches global random
state, so independent generators from split_rng can be used concurrently.
"""

import logging
import math

import numpy as np
from scipy import linalg
from scipy import stats

from lomaxrace.v1.errors import DomainError, NumericalError, ParameterError

# Explicit terms of the Polya-Gamma series before the moment-matched remainder.
PG_TRUNCATION = 5

_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
_LOG_MAX_FLOAT = math.log(np.finfo(float).max)


def make_rng(seed=None):
    """Returns a Generator for seed; a Generator passed in is returned as is."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def split_rng(rng, n):
    """Returns n statistically independent child generators of rng."""
    return make_rng(rng).spawn(int(n))


class CensorInterval(object):
    """An open interval (lower, upper) known to contain an event time.

    Right censoring at T is CensorInterval(T, inf).
    """

    __slots__ = ('lower', 'upper')

    def __init__(self, lower, upper=math.inf):
        lower = float(lower)
        upper = float(upper)
        if not lower >= 0:
            raise ParameterError("censor interval lower bound must be >= 0, got {!r}".format(lower))
        if not upper > lower:
            raise ParameterError("censor interval needs lower < upper, got ({!r}, {!r})".format(lower, upper))
        self.lower = lower
        self.upper = upper

    @classmethod
    def right(cls, censor_time):
        return cls(censor_time, math.inf)

    @property
    def is_right_censored(self):
        return math.isinf(self.upper)

    def __eq__(self, other):
        return isinstance(other, CensorInterval) and (self.lower, self.upper) == (other.lower, other.upper)

    def __repr__(self):
        return "CensorInterval({!r}, {!r})".format(self.lower, self.upper)


class LomaxParams(object):
    """Shape r and scale b of a Lomax (Pareto type II) distribution."""

    __slots__ = ('shape', 'scale')

    def __init__(self, shape, scale):
        shape = float(shape)
        scale = float(scale)
        if not (shape > 0 and scale > 0):
            raise ParameterError("Lomax shape and scale must be > 0, got ({!r}, {!r})".format(shape, scale))
        self.shape = shape
        self.scale = scale

    @property
    def mean(self):
        if self.shape <= 1:
            raise ParameterError("Lomax mean is undefined for shape {!r} <= 1".format(self.shape))
        return self.scale / (self.shape - 1)

    def frozen(self):
        """The equivalent scipy.stats frozen distribution."""
        return stats.lomax(c=self.shape, scale=self.scale)

    def __repr__(self):
        return "LomaxParams(shape={!r}, scale={!r})".format(self.shape, self.scale)


def _positive(name, value):
    value = np.asarray(value, dtype=float)
    if not np.all(value > 0):
        raise ParameterError("{} must be > 0, got {!r}".format(name, value))
    return value


def _nonnegative_time(t):
    t = np.asarray(t, dtype=float)
    if np.any(~(t >= 0)):
        raise DomainError("t", t, ">= 0")
    return t


def _scalar_or_array(x):
    return x.item() if np.ndim(x) == 0 else x


def sample_exponential(rate, rng, size=None):
    """Draws Exp(rate) times (mean 1/rate)."""
    rate = _positive("rate", rate)
    return rng.exponential(1.0 / rate, size=size)


def sample_truncated_exponential(rate, interval, rng, size=None):
    """Draws an Exp(rate) time conditioned to lie in interval.

    Right-censored intervals use memorylessness (lower + Exp(rate)); bounded
    intervals invert the truncated CDF, so no draw is ever rejected.
    """
    rate = _positive("rate", rate)
    if not isinstance(interval, CensorInterval):
        raise ParameterError("interval must be a CensorInterval, got {!r}".format(interval))
    if interval.is_right_censored:
        return interval.lower + rng.exponential(1.0 / rate, size=size)
    width = interval.upper - interval.lower
    u = rng.random(size=size)
    # F(s) = (1 - e^{-rate s}) / (1 - e^{-rate width}) on [0, width].
    offset = -np.log1p(u * np.expm1(-rate * width)) / rate
    return interval.lower + np.minimum(offset, np.nextafter(width, 0.0))


def lomax_density(t, p):
    t = _nonnegative_time(t)
    return _scalar_or_array(p.frozen().pdf(t))


def lomax_survival(t, p):
    t = _nonnegative_time(t)
    return _scalar_or_array(p.frozen().sf(t))


def lomax_hazard(t, p):
    """Hazard r / (t + b) of a Lomax distribution."""
    t = _nonnegative_time(t)
    return _scalar_or_array(p.shape / (t + p.scale))


def sample_lomax(p, rng, size=None):
    """Draws Lomax times as Exp(lam) with lam ~ Gamma(r, 1/b).

    lam is drawn as a log so tiny shapes never give a zero rate; times beyond
    the largest float are clamped to it.
    """
    log_lam = sample_log_gamma(np.full(size if size is not None else (), float(p.shape)), rng) - math.log(p.scale)
    log_t = np.log(rng.standard_exponential(size=log_lam.shape)) - log_lam
    return _scalar_or_array(np.exp(np.minimum(log_t, _LOG_MAX_FLOAT)))


def sample_log_gamma(shape, rng, size=None):
    """Draws log(Gamma(shape, 1)) without underflow for tiny shapes.

    Uses Gamma(a) = Gamma(a + 1) * U^(1/a), which stays representable in log
    space even when the gamma draw itself would round to zero.
    """
    shape = _positive("shape", shape)
    if size is None:
        size = shape.shape
    g = rng.gamma(shape + 1.0, 1.0, size=size)
    u = rng.random(size=size)
    return np.log(g) + np.log(u) / shape


def polya_gamma_moments(shape, tilt):
    """Exact mean and variance of PG(shape, tilt).

    Returns:
        (mean, variance) arrays broadcast from shape and tilt.
    """
    b = np.asarray(shape, dtype=float)
    c = np.abs(np.asarray(tilt, dtype=float))
    small = c < 1e-2
    cs = np.where(small, 1.0, c)
    half = cs / 2.0
    th = np.tanh(half)
    e = np.exp(-cs)
    sech2 = 4.0 * e / (1.0 + e) ** 2
    mean = np.where(small, 0.25 * (1.0 - c * c / 12.0), th / (2.0 * cs))
    var = np.where(small, 1.0 / 24.0 - c * c / 120.0, (2.0 * th - cs * sech2) / (4.0 * cs ** 3))
    return b * mean, b * var


def sample_polya_gamma_approx(shape, tilt, rng, truncation=PG_TRUNCATION):
    """Approximate PG(shape, tilt) draws.

    PG(b, c) is (1 / 2 pi^2) sum_k g_k / ((k - 1/2)^2 + c^2 / 4 pi^2) with
    g_k ~ Gamma(b, 1). The first `truncation` terms are drawn explicitly; the
    rest is replaced by one gamma variable whose mean and variance equal those
    of the discarded tail.

    Args:
        shape: PG shape b > 0, scalar or array.
        tilt: PG tilt c, scalar or array broadcastable against shape.
        rng: numpy Generator.
        truncation: number of explicit series terms.

    Returns:
        Draws with the broadcast shape of (shape, tilt).
    """
    b = _positive("shape", shape)
    c = np.asarray(tilt, dtype=float)
    b, c = np.broadcast_arrays(b, c)
    k = np.arange(1, truncation + 1, dtype=float)
    denom = (k - 0.5) ** 2 + (c[..., None] / (2.0 * math.pi)) ** 2
    g = rng.gamma(np.repeat(b[..., None], truncation, axis=-1), 1.0)
    head = np.sum(g / denom, axis=-1) / (2.0 * math.pi ** 2)

    head_mean = b * np.sum(1.0 / denom, axis=-1) / (2.0 * math.pi ** 2)
    head_var = b * np.sum(1.0 / denom ** 2, axis=-1) / (4.0 * math.pi ** 4)
    total_mean, total_var = polya_gamma_moments(b, c)
    tiny = np.finfo(float).tiny
    tail_mean = np.maximum(total_mean - head_mean, tiny)
    tail_var = np.maximum(total_var - head_var, tiny)
    tail = rng.gamma(tail_mean ** 2 / tail_var, tail_var / tail_mean)
    return _scalar_or_array(head + tail)


def sample_crt(count, concentration, rng):
    """Draws the Chinese restaurant table count CRT(count, concentration).

    The table count is sum_{i=1..count} Bernoulli(r / (r + i - 1)).
    """
    count = int(count)
    if count < 0:
        raise ParameterError("CRT count must be >= 0, got {!r}".format(count))
    r = float(concentration)
    if not r > 0:
        raise ParameterError("CRT concentration must be > 0, got {!r}".format(concentration))
    if count == 0:
        return 0
    probs = r / (r + np.arange(count))
    return int(np.sum(rng.random(count) < probs))


def jittered_cholesky(matrix, what="covariance"):
    """Lower Cholesky factor of matrix, adding diagonal jitter on failure.

    Raises:
        NumericalError: if the factorization fails at every jitter level.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ParameterError("{} must be square, got shape {}".format(what, matrix.shape))
    scale = float(np.mean(np.abs(np.diag(matrix)))) if matrix.size else 1.0
    scale = scale if scale > 0 else 1.0
    eye = np.eye(matrix.shape[0])
    for jitter in _JITTERS:
        try:
            factor = linalg.cholesky(matrix + jitter * scale * eye, lower=True, check_finite=True)
        except (linalg.LinAlgError, ValueError):
            continue
        if jitter:
            logging.warning("%s factorization needed jitter %g", what, jitter)
        return factor
    raise NumericalError("{} is not positive definite even with jitter {:g}".format(what, _JITTERS[-1]))


def sample_mvn(mean, covariance, rng):
    """Draws one multivariate normal vector N(mean, covariance)."""
    mean = np.asarray(mean, dtype=float)
    covariance = np.asarray(covariance, dtype=float)
    if not np.allclose(covariance, covariance.T):
        raise ParameterError("covariance must be symmetric")
    factor = jittered_cholesky(covariance)
    return mean + factor @ rng.standard_normal(mean.shape[0])


def sample_mvn_precision(precision, linear, rng):
    """Draws N(P^-1 h, P^-1) given precision P and linear term h.

    Factorizes P = L L' once: the mean is a Cholesky solve and the draw
    L'^-1 z has covariance P^-1.
    """
    factor = jittered_cholesky(precision, what="precision")
    mean = linalg.cho_solve((factor, True), np.asarray(linear, dtype=float))
    z = rng.standard_normal(mean.shape[0])
    return mean + linalg.solve_triangular(factor.T, z, lower=False)


def exponential_race(rates, rng):
    """Races independent Exp(rate_j) clocks.

    Returns:
        (winner, time): 0-based index of the smallest draw and its value.
    """
    rates = np.atleast_1d(np.asarray(rates, dtype=float))
    if rates.size == 0:
        raise ParameterError("exponential_race needs at least one rate")
    rates = _positive("rates", rates)
    times = rng.exponential(1.0 / rates)
    winner = int(np.argmin(times))
    return winner, float(times[winner])
