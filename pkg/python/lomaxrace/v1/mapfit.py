"""MAP estimation of LDR parameters with Monte-Carlo score-function gradients.

Each subject's likelihood p_i = E[p_t(lambda) p_y(lambda)] is estimated from M
draws lambda_jk = lambda~_jk e^{x'beta_jk}, lambda~_jk ~ Gamma(r_jk, 1):

  p_t  observed at t:      Lambda e^{-t Lambda}
       censored at T:      e^{-T Lambda}
       time missing:       1
  p_y  known type j:       Lambda_j / Lambda
       type missing:       1

with Lambda the total rate and Lambda_j the rate of risk j's atoms. The beta
gradient differentiates p_t p_y through e^{x'beta}; the r gradient weights
the gamma score log lambda~ - digamma(r). Both are self-normalized over the
same draws. Everything is kept in log space.

Draws are passed around as log lambda~ arrays of shape (..., M, atoms).
"""

import collections
import dataclasses
import enum
import logging
import math

import numpy as np
import pandas as pd
from scipy import special

from lomaxrace.v1 import distributions
from lomaxrace.v1.datasets import Dataset, ObservationRecord, TimeStatus
from lomaxrace.v1.errors import OptimizationError, ParameterError
from lomaxrace.v1.model import LdrParams

R_PRIOR_GAMMA_SMALL = 'gamma_small'   # Gamma(0.01/K, scale 100)
R_PRIOR_GAMMA_UNIT = 'gamma_unit'     # Gamma(1/K, scale 1)
R_PRIOR_L2 = 'l2'                     # -0.001 ||r||_2
R_PRIORS = (R_PRIOR_GAMMA_SMALL, R_PRIOR_GAMMA_UNIT, R_PRIOR_L2)

L2_WEIGHT = 0.001

# A per-subject gradient; underflowed is True when every draw's likelihood
# rounded to zero and value is therefore all zeros.
SubjectGradient = collections.namedtuple('SubjectGradient', ['value', 'underflowed'])


@dataclasses.dataclass(frozen=True)
class MapConfig:
    """Optimizer settings.

    The step is Adam with base rate learning_rate; r is optimized as log r.
    Fitting stops after max_epochs or once the full-data objective has not
    improved by more than tol (relative) for patience epochs.
    """

    mc_samples: int = 10
    eval_mc_samples: int = 100
    learning_rate: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 100
    max_epochs: int = 200
    tol: float = 1e-4
    patience: int = 20
    t_df: float = 4.0
    r_prior: str = R_PRIOR_L2
    K: int = 10
    seed: int = None

    def __post_init__(self):
        if self.mc_samples < 1 or self.eval_mc_samples < 1:
            raise ParameterError("Monte-Carlo sample counts must be >= 1")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be > 0, got {!r}".format(self.learning_rate))
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ParameterError("Adam needs beta1, beta2 in [0, 1) and eps > 0")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ParameterError("batch_size and patience must be >= 1 and max_epochs >= 0")
        if not self.t_df > 0:
            raise ParameterError("t_df must be > 0, got {!r}".format(self.t_df))
        if self.r_prior not in R_PRIORS:
            raise ParameterError("r_prior must be one of {}, got {!r}".format(R_PRIORS, self.r_prior))
        if self.K < 1:
            raise ParameterError("K must be >= 1, got {!r}".format(self.K))

    def to_dict(self):
        return dataclasses.asdict(self)


class TimeKind(enum.Enum):
    UNCENSORED = 'uncensored'
    RIGHT_CENSORED = 'right_censored'
    TIME_MISSING = 'time_missing'


@dataclasses.dataclass(frozen=True)
class LikelihoodTerm:
    """Which p_t and p_y factors a subject contributes."""

    time_kind: TimeKind
    event_known: bool

    def __post_init__(self):
        if self.time_kind is TimeKind.TIME_MISSING and not self.event_known:
            raise ParameterError("a subject with missing time and missing event type has no likelihood term")

    @classmethod
    def for_record(cls, record):
        kind = {
            TimeStatus.OBSERVED: TimeKind.UNCENSORED,
            TimeStatus.RIGHT_CENSORED: TimeKind.RIGHT_CENSORED,
            TimeStatus.MISSING: TimeKind.TIME_MISSING,
        }[record.time_status]
        return cls(kind, record.event is not None)


class _Batch(object):
    """Column arrays of a set of subjects."""

    def __init__(self, X, time, observed, censored, event):
        self.X = X
        self.time = time
        self.observed = observed
        self.censored = censored
        self.event = event

    @classmethod
    def from_dataset(cls, dataset):
        a = dataset.arrays()
        return cls(a.X, np.nan_to_num(a.time), ~(a.censored | a.time_missing), a.censored, a.event)

    @classmethod
    def from_record(cls, record):
        if not isinstance(record, ObservationRecord):
            raise ParameterError("expected an ObservationRecord, got {!r}".format(record))
        LikelihoodTerm.for_record(record)
        return cls.from_dataset(Dataset([record]))

    def __len__(self):
        return self.X.shape[0]

    def take(self, idx):
        return _Batch(self.X[idx], self.time[idx], self.observed[idx], self.censored[idx], self.event[idx])


@np.errstate(over='ignore', invalid='ignore', divide='ignore')
def _log_factors(batch, params, log_draws):
    """Per-draw log(p_t p_y) and its derivative in each atom's x'beta.

    Args:
        batch: _Batch of B subjects.
        params: LdrParams with A atoms.
        log_draws: (B, M, A) log lambda~.

    Returns:
        (log_f, g): (B, M) and (B, M, A).
    """
    if batch.X.shape[1] != params.num_coefficients:
        raise ParameterError("data has {} coefficients, params {}".format(batch.X.shape[1], params.num_coefficients))
    eta = batch.X @ params.beta.T
    lr = log_draws + eta[:, None, :]
    ltot = special.logsumexp(lr, axis=2)
    obs = batch.observed[:, None]
    cens = batch.censored[:, None]
    known = (batch.event >= 0)[:, None]
    t = batch.time[:, None]
    tot = np.exp(ltot)
    rates = np.exp(lr)
    log_pt = np.where(obs, ltot - t * tot, np.where(cens, -t * tot, 0.0))

    own = params.risk[None, :] == batch.event[:, None]
    lown = special.logsumexp(np.where(own[:, None, :], lr, -np.inf), axis=2)
    log_py = np.where(known, lown - ltot, 0.0)

    share = np.exp(lr - ltot[..., None])
    g = np.where(obs[..., None], share - t[..., None] * rates, 0.0)
    g = g + np.where(cens[..., None], -t[..., None] * rates, 0.0)
    safe_lown = np.where(np.isfinite(lown), lown, 0.0)
    own_share = np.where(own[:, None, :] & np.isfinite(lown)[..., None], np.exp(lr - safe_lown[..., None]), 0.0)
    g = g + np.where(known[..., None], own_share - share, 0.0)
    return log_pt + log_py, g


def _weights(log_f):
    """Self-normalized weights over draws and the per-subject log-likelihood."""
    M = log_f.shape[1]
    loglik = special.logsumexp(log_f, axis=1) - math.log(M)
    underflow = ~np.isfinite(loglik)
    safe = np.where(underflow, 0.0, loglik + math.log(M))
    w = np.where(underflow[:, None], 0.0, np.exp(log_f - safe[:, None]))
    return w, loglik, underflow


def _beta_gradient(w, g, X):
    # Zero-weight draws may carry infinite g; 0 * inf must not turn into nan.
    return np.einsum('bm,bma,bp->ap', w, np.where(w[..., None] > 0, g, 0.0), X)


def _draws(batch_size, params, M, rng):
    shape = (batch_size, M, params.num_atoms)
    return distributions.sample_log_gamma(np.broadcast_to(params.r, shape), rng)


def _subject_draws(log_draws, params):
    log_draws = np.asarray(log_draws, dtype=float)
    if log_draws.ndim != 2 or log_draws.shape[1] != params.num_atoms:
        raise ParameterError("draws must have shape (M, {}), got {}".format(params.num_atoms, log_draws.shape))
    return log_draws[None]


def mc_log_likelihood(subject, params, log_draws):
    """log (1/M) sum_m p_t p_y for one subject and fixed draws (M, A) of log lambda~."""
    batch = _Batch.from_record(subject)
    log_f, _ = _log_factors(batch, params, _subject_draws(log_draws, params))
    return float(_weights(log_f)[1][0])


def grad_beta(subject, params, log_draws):
    """Self-normalized gradient of the log-likelihood estimate in every beta.

    Returns:
        SubjectGradient whose value has shape (A, P). It is all zeros, with
        underflowed set, when every draw underflows.
    """
    batch = _Batch.from_record(subject)
    log_f, g = _log_factors(batch, params, _subject_draws(log_draws, params))
    w, _, underflow = _weights(log_f)
    if underflow[0]:
        logging.warning("likelihood underflow for subject %s; zero gradient", subject)
    return SubjectGradient(_beta_gradient(w, g, batch.X), bool(underflow[0]))


def grad_r(subject, params, log_draws):
    """SubjectGradient with value sum_m w_m (log lambda~_m - digamma(r)), shape (A,)."""
    batch = _Batch.from_record(subject)
    draws = _subject_draws(log_draws, params)
    log_f, _ = _log_factors(batch, params, draws)
    w, _, underflow = _weights(log_f)
    return SubjectGradient(np.einsum('bm,bma->a', w, draws - special.digamma(params.r)), bool(underflow[0]))


def log_beta_prior(beta, df):
    """Unnormalized Student-t log density, summed over all coefficients."""
    return float(-0.5 * (df + 1) * np.sum(np.log1p(np.asarray(beta) ** 2 / df)))


def grad_log_beta_prior(beta, df):
    return -(df + 1) * beta / (df + beta ** 2)


def log_r_prior(r, prior, K):
    if prior == R_PRIOR_L2:
        return float(-L2_WEIGHT * np.linalg.norm(r))
    shape, scale = (0.01 / K, 100.0) if prior == R_PRIOR_GAMMA_SMALL else (1.0 / K, 1.0)
    return float(np.sum((shape - 1.0) * np.log(r) - r / scale))


def grad_log_r_prior(r, prior, K):
    if prior == R_PRIOR_L2:
        return -L2_WEIGHT * r / np.linalg.norm(r)
    shape, scale = (0.01 / K, 100.0) if prior == R_PRIOR_GAMMA_SMALL else (1.0 / K, 1.0)
    return (shape - 1.0) / r - 1.0 / scale


def _data_log_likelihood(batch, params, M, rng):
    log_f, _ = _log_factors(batch, params, _draws(len(batch), params, M, rng))
    return float(np.sum(_weights(log_f)[1]))


def map_objective(data, params, config, rng):
    """Full-data log posterior estimate: sum_i log p_i + log p(beta) + log p(r)."""
    batch = data if isinstance(data, _Batch) else _Batch.from_dataset(_as_dataset(data))
    loglik = _data_log_likelihood(batch, params, config.eval_mc_samples, rng)
    return (loglik + log_beta_prior(params.beta, config.t_df)
            + log_r_prior(params.r, config.r_prior, params.num_subrisks))


def _as_dataset(data):
    return data if isinstance(data, Dataset) else Dataset(data)


def default_init(dataset, K, rng):
    """K atoms per risk with unit weights and intercepts at the crude event rate.

    The intercept of risk j's atoms is log(rate_j / K) so the K atoms together
    match the observed rate; all coefficients get small noise.
    """
    dataset = _as_dataset(dataset)
    a = dataset.arrays()
    J = dataset.num_risks
    P = dataset.num_covariates + 1
    exposure = np.nansum(a.time) + 1.0
    beta = 0.1 * rng.standard_normal((J, K, P))
    for j in range(J):
        rate = (np.sum(a.event == j) + 1.0) / exposure
        beta[j, :, 0] += math.log(rate / K)
    return LdrParams.from_grid(np.ones((J, K)), beta)


@dataclasses.dataclass
class MapResult:
    params: LdrParams
    trace: pd.DataFrame
    best_epoch: int
    best_objective: float

    def write_trace(self, path):
        self.trace.to_csv(path, index=False)


def _with_theta(params, log_r, beta):
    return LdrParams(np.exp(log_r), beta, params.risk, params.num_risks, params.num_subrisks, params.subrisk)


def fit_map(data, init, config, rng=None):
    """Stochastic gradient ascent on the log posterior.

    Args:
        data: Dataset or list of ObservationRecords.
        init: LdrParams to start from, or None for default_init.
        config: MapConfig.
        rng: numpy Generator; defaults to one seeded from config.seed.

    Returns:
        MapResult holding the iterate with the best full-data objective.

    Raises:
        OptimizationError: if the objective or a parameter stops being finite.
    """
    dataset = _as_dataset(data)
    if len(dataset) == 0:
        raise ParameterError("cannot fit MAP on an empty dataset")
    rng = distributions.make_rng(config.seed if rng is None else rng)
    params = init if init is not None else default_init(dataset, config.K, rng)
    batch = _Batch.from_dataset(dataset)
    n = len(batch)
    # One seed for every full-data evaluation so epochs are compared on common draws.
    eval_seed = int(rng.integers(2 ** 63))

    def objective(p):
        return map_objective(batch, p, config, distributions.make_rng(eval_seed))

    best = params
    best_obj = objective(params)
    best_epoch = 0
    rows = [{'epoch': 0, 'minibatch': 0, 'objective': best_obj}]
    if config.max_epochs == 0:
        return MapResult(params, pd.DataFrame(rows), 0, best_obj)

    theta = [np.log(params.r), params.beta.copy()]
    first = [np.zeros_like(x) for x in theta]
    second = [np.zeros_like(x) for x in theta]
    step = 0
    stale = 0
    K = params.num_subrisks
    logging.info("MAP fit: n=%d atoms=%d M=%d batch=%d r_prior=%s",
                 n, params.num_atoms, config.mc_samples, config.batch_size, config.r_prior)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        flagged = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            current = _with_theta(params, theta[0], theta[1])
            sub = batch.take(idx)
            draws = _draws(len(sub), current, config.mc_samples, rng)
            log_f, g = _log_factors(sub, current, draws)
            w, _, underflow = _weights(log_f)
            flagged += int(underflow.sum())
            scale = n / float(len(sub))
            g_beta = scale * _beta_gradient(w, g, sub.X)
            g_r = scale * np.einsum('bm,bma->a', w, draws - special.digamma(current.r))
            g_beta = g_beta + grad_log_beta_prior(current.beta, config.t_df)
            g_r = g_r + grad_log_r_prior(current.r, config.r_prior, K)
            grads = [current.r * g_r, g_beta]
            step += 1
            for x, gr, m1, m2 in zip(theta, grads, first, second):
                m1 *= config.adam_beta1
                m1 += (1 - config.adam_beta1) * gr
                m2 *= config.adam_beta2
                m2 += (1 - config.adam_beta2) * gr * gr
                m1_hat = m1 / (1 - config.adam_beta1 ** step)
                m2_hat = m2 / (1 - config.adam_beta2 ** step)
                x += config.learning_rate * m1_hat / (np.sqrt(m2_hat) + config.adam_eps)
            if not all(np.all(np.isfinite(x)) for x in theta):
                raise OptimizationError(epoch, config.learning_rate, "parameters are not finite")
        if flagged:
            logging.warning("epoch %d: %d subject likelihoods underflowed; their gradients were zeroed",
                            epoch, flagged)
        current = _with_theta(params, theta[0], theta[1])
        obj = objective(current)
        rows.append({'epoch': epoch, 'minibatch': step, 'objective': obj})
        if not math.isfinite(obj):
            raise OptimizationError(epoch, config.learning_rate)
        logging.info("epoch %d: log posterior %.4f", epoch, obj)
        if obj > best_obj + config.tol * abs(best_obj):
            stale = 0
        else:
            stale += 1
        if obj > best_obj:
            best, best_obj, best_epoch = current, obj, epoch
        if stale >= config.patience:
            logging.info("no improvement for %d epochs; stopping", stale)
            break
    logging.info("MAP fit done: best epoch %d, log posterior %.4f", best_epoch, best_obj)
    return MapResult(best, pd.DataFrame(rows), best_epoch, best_obj)
