"""Data-augmentation Gibbs sampler for LDR under a truncated gamma process.

Each sweep runs eight conditional updates in a fixed order:

  1. step_assign_subrisk   which atom won each subject's race
  2. step_impute_time      event times of censored and time-missing subjects
  3. step_sample_lambda    latent atom rates
  4. step_sample_beta      Polya-Gamma draws, then atom coefficients
  5. step_sample_alpha     coefficient precisions
  6. step_sample_r_gamma0  table counts, gamma_0 and atom weights
  7. step_sample_c0        gamma-process scales
  8. step_prune            retire atoms that won no subject this sweep

Latent rates are held as log lambda so tiny weights never underflow to a
zero rate. Retired atoms stay retired for the rest of the run; their r and
beta keep being drawn from the prior but are never reported.
"""

import concurrent.futures
import dataclasses
import json
import logging

import numpy as np
import pandas as pd
from scipy import special

from lomaxrace.v1 import distributions
from lomaxrace.v1.datasets import Dataset
from lomaxrace.v1.errors import InvariantError, NumericalError, ParameterError
from lomaxrace.v1.model import Hyperparams, LdrParams

# Floor for gamma draws with small shapes, which can round to zero.
_TINY = np.finfo(float).tiny


@dataclasses.dataclass(frozen=True)
class ChainConfig:
    """Run length and truncation of one chain.

    Draws are stored from sweep burn_in on, every thin sweeps, so
    iterations=10, burn_in=5, thin=1 keeps five draws.
    """

    iterations: int = 10000
    burn_in: int = 8000
    thin: int = 1
    K: int = 10
    seed: int = None
    hyperparams: Hyperparams = dataclasses.field(default_factory=Hyperparams)
    log_every: int = 500

    def __post_init__(self):
        if self.thin < 1:
            raise ParameterError("thin must be >= 1, got {!r}".format(self.thin))
        if self.K < 1:
            raise ParameterError("K must be >= 1, got {!r}".format(self.K))
        if not 0 <= self.burn_in < self.iterations:
            raise ParameterError("need 0 <= burn_in < iterations, got burn_in={!r} iterations={!r}".format(
                self.burn_in, self.iterations))
        if isinstance(self.hyperparams, dict):
            object.__setattr__(self, 'hyperparams', Hyperparams.from_dict(self.hyperparams))

    @classmethod
    def fast(cls, **overrides):
        """Short profile for smoke runs and CI."""
        settings = dict(iterations=2000, burn_in=1500)
        settings.update(overrides)
        return cls(**settings)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d['hyperparams'] = self.hyperparams.to_dict()
        return d


class ChainData(object):
    """Array view of a Dataset in the form the conditional updates use."""

    def __init__(self, dataset):
        a = dataset.arrays()
        self.X = a.X
        self.num_risks = dataset.num_risks
        self.observed = ~(a.censored | a.time_missing)
        self.time = np.where(self.observed, a.time, 0.0)
        self.lower = np.where(a.censored, a.time, 0.0)
        self.event = a.event
        self.known = a.event >= 0

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def num_coefficients(self):
        return self.X.shape[1]


def _as_chain_data(data):
    if isinstance(data, ChainData):
        return data
    if not isinstance(data, Dataset):
        data = Dataset(data)
    return ChainData(data)


@dataclasses.dataclass
class GibbsState:
    """Mutable sampler state; shapes use n subjects, J risks, K atoms, P coefficients."""

    log_lam: np.ndarray       # (n, J, K); -inf for retired atoms
    t: np.ndarray             # (n,) imputed or observed event times
    y: np.ndarray             # (n,) risk of the winning atom
    kappa: np.ndarray         # (n,) sub-risk of the winning atom
    counts: np.ndarray        # (n, J, K) one-hot n_ijk
    omega: np.ndarray         # (n, J, K) Polya-Gamma auxiliaries
    alpha: np.ndarray         # (J, K, P)
    r: np.ndarray             # (J, K)
    gamma0: np.ndarray        # (J,)
    c0: np.ndarray            # (J,)
    beta: np.ndarray          # (J, K, P)
    active: np.ndarray        # (J, K) bool
    hyperparams: Hyperparams

    @classmethod
    def initialize(cls, data, K, hyperparams, rng):
        """Starting point: unit weights, small random coefficients, prior rates."""
        data = _as_chain_data(data)
        n, J, P = data.n, data.num_risks, data.num_coefficients
        beta = 0.1 * rng.standard_normal((J, K, P))
        r = np.ones((J, K))
        eta = np.einsum('np,jkp->njk', data.X, beta)
        log_lam = distributions.sample_log_gamma(np.broadcast_to(r, (n, J, K)), rng) + eta
        t = np.where(data.observed, data.time, data.lower + 1.0)
        return cls(
            log_lam=log_lam,
            t=t,
            y=np.full(n, -1, dtype=int),
            kappa=np.full(n, -1, dtype=int),
            counts=np.zeros((n, J, K), dtype=int),
            omega=np.zeros((n, J, K)),
            alpha=np.ones((J, K, P)),
            r=r,
            gamma0=np.ones(J),
            c0=np.ones(J),
            beta=beta,
            active=np.ones((J, K), dtype=bool),
            hyperparams=hyperparams,
        )

    @property
    def K(self):
        return self.r.shape[1]

    @property
    def m(self):
        """Wins per atom, m_jk = sum_i n_ijk."""
        return self.counts.sum(axis=0)

    def eta(self, data):
        return np.einsum('np,jkp->njk', data.X, self.beta)

    def params(self):
        return LdrParams.from_grid(self.r, self.beta, self.active)


def check_state(state, data):
    """Raises InvariantError if the per-sweep bookkeeping is inconsistent."""
    data = _as_chain_data(data)
    if data.n and not np.all(state.counts.reshape(data.n, -1).sum(axis=1) == 1):
        raise InvariantError("every subject must win exactly one atom")
    if np.any(state.counts[:, ~state.active]):
        raise InvariantError("a retired atom won a subject")
    if np.any(state.t[~data.observed] <= data.lower[~data.observed]):
        raise InvariantError("an imputed time is not above its censoring bound")
    if np.any(np.isfinite(state.log_lam[:, ~state.active])):
        raise InvariantError("a retired atom has a non-zero rate")


def step_assign_subrisk(state, data, rng):
    """Samples the winning atom of each subject, proportional to lambda_ijk.

    Subjects with a known event type choose among that risk's atoms; the
    rest choose the risk and the atom jointly.
    """
    n = data.n
    J, K = state.r.shape
    logw = np.where(state.active[None], state.log_lam, -np.inf)
    if np.any(data.known):
        other = np.arange(J)[None, :] != data.event[:, None]
        logw = np.where(data.known[:, None, None] & other[:, :, None], -np.inf, logw)
    flat = logw.reshape(n, J * K)
    top = flat.max(axis=1) if n else np.empty(0)
    if not np.all(np.isfinite(top)):
        bad = int(np.flatnonzero(~np.isfinite(top))[0])
        raise InvariantError("subject {} has no active atom it can be assigned to".format(bad))
    cum = np.cumsum(np.exp(flat - top[:, None]), axis=1)
    u = rng.random(n) * cum[:, -1] if n else np.empty(0)
    idx = np.minimum(np.sum(cum <= u[:, None], axis=1), J * K - 1)
    state.y = idx // K
    state.kappa = idx % K
    state.counts = np.zeros((n, J, K), dtype=int)
    state.counts[np.arange(n), state.y, state.kappa] = 1


def step_impute_time(state, data, rng):
    """t_i = T_ic + Exp(sum_jk lambda_ijk) where the time is not observed; T_ic = 0 when unknown."""
    n = data.n
    log_tot = special.logsumexp(np.where(state.active[None], state.log_lam, -np.inf).reshape(n, state.r.size), axis=1)
    extra = np.exp(np.log(rng.exponential(1.0, size=n)) - log_tot)
    imputed = np.maximum(data.lower + extra, np.nextafter(data.lower, np.inf))
    state.t = np.where(data.observed, data.time, imputed)


def step_sample_lambda(state, data, rng):
    """lambda_ijk ~ Gamma(r_jk + n_ijk, e^{x'beta} / (1 + t e^{x'beta}))."""
    eta = state.eta(data)
    log_t = np.log(state.t)[:, None, None]
    shape = np.where(state.active[None], state.r[None] + state.counts, 1.0)
    log_lam = distributions.sample_log_gamma(shape, rng) + eta - np.logaddexp(0.0, eta + log_t)
    state.log_lam = np.where(state.active[None], log_lam, -np.inf)


def step_sample_beta(state, data, rng):
    """Polya-Gamma augmentation, then a Gaussian draw of every beta_jk.

    omega_ijk ~ PG(r_jk + n_ijk, x_i'beta_jk + ln t_i); beta_jk has precision
    diag(alpha_jk) + X' Omega_jk X and linear term
    -sum_i (omega_ijk ln t_i + (r_jk - n_ijk) / 2) x_i. Retired atoms draw
    from the prior N(0, diag(1 / alpha_jk)).
    """
    X = data.X
    P = data.num_coefficients
    log_t = np.log(state.t)
    active = state.active
    state.omega = np.zeros_like(state.log_lam)
    if data.n and np.any(active):
        psi = state.eta(data) + log_t[:, None, None]
        shape = state.r[None] + state.counts
        state.omega[:, active] = distributions.sample_polya_gamma_approx(shape[:, active], psi[:, active], rng)
    beta = np.empty_like(state.beta)
    for j, k in np.ndindex(*active.shape):
        alpha = state.alpha[j, k]
        if not active[j, k]:
            beta[j, k] = rng.standard_normal(P) / np.sqrt(alpha)
            continue
        w = state.omega[:, j, k]
        precision = np.diag(alpha) + X.T @ (w[:, None] * X)
        linear = -X.T @ (w * log_t + 0.5 * (state.r[j, k] - state.counts[:, j, k]))
        beta[j, k] = distributions.sample_mvn_precision(precision, linear, rng)
    state.beta = beta


def step_sample_alpha(state, rng):
    """alpha_vjk ~ Gamma(a0 + 1/2, 1 / (b0 + beta_vjk^2 / 2))."""
    h = state.hyperparams
    state.alpha = rng.gamma(h.a0 + 0.5, 1.0 / (h.b0 + 0.5 * state.beta ** 2))


def step_sample_r_gamma0(state, data, rng):
    """CRT augmentation for the atom weights and the gamma-process mass.

    With q_jk = sum_i log(1 + t_i e^{x_i'beta_jk}) (zero for retired atoms):
    l_jk ~ CRT(m_jk, gamma_0j / K), then
    gamma_0j ~ Gamma(e0 + sum_k l_jk, 1 / (f0 + (1/K) sum_k log(1 + q_jk / c_0j))),
    then r_jk ~ Gamma(m_jk + gamma_0j / K, 1 / (c_0j + q_jk)). gamma_0 is drawn
    with r integrated out, so it precedes r.
    """
    h = state.hyperparams
    K = state.K
    m = state.m
    log_t = np.log(state.t)[:, None, None]
    q = np.sum(np.logaddexp(0.0, state.eta(data) + log_t), axis=0)
    q = np.where(state.active, q, 0.0)
    tables = np.zeros_like(m)
    for j, k in np.ndindex(*m.shape):
        if m[j, k]:
            tables[j, k] = distributions.sample_crt(m[j, k], state.gamma0[j] / K, rng)
    c0 = state.c0
    rate = h.f0 + np.sum(np.log1p(q / c0[:, None]), axis=1) / K
    state.gamma0 = np.maximum(rng.gamma(h.e0 + tables.sum(axis=1), 1.0 / rate), _TINY)
    state.r = rng.gamma(m + state.gamma0[:, None] / K, 1.0 / (c0[:, None] + q))


def step_sample_c0(state, rng):
    """c_0j ~ Gamma(e1 + gamma_0j, 1 / (f1 + sum_k r_jk))."""
    h = state.hyperparams
    state.c0 = np.maximum(rng.gamma(h.e1 + state.gamma0, 1.0 / (h.f1 + state.r.sum(axis=1))), _TINY)


def step_prune(state):
    """Retires every atom that won no subject this sweep."""
    retired = state.active & (state.m == 0)
    if np.any(retired):
        logging.debug("retiring atoms %s", [(int(j), int(k)) for j, k in zip(*np.nonzero(retired))])
    state.active = state.active & ~retired
    state.log_lam[:, ~state.active] = -np.inf


def sweep(state, data, rng):
    """One pass of every conditional update, in order."""
    step_assign_subrisk(state, data, rng)
    step_impute_time(state, data, rng)
    step_sample_lambda(state, data, rng)
    step_sample_beta(state, data, rng)
    step_sample_alpha(state, rng)
    step_sample_r_gamma0(state, data, rng)
    step_sample_c0(state, rng)
    step_prune(state)


def augmented_log_likelihood(state, data):
    """Joint log-likelihood of (t, y, kappa) with the rates integrated out.

    Sum over subjects and active atoms of
    log Gamma(r + n) - log Gamma(r) + n x'beta - (r + n) log(1 + t e^{x'beta}).
    """
    data = _as_chain_data(data)
    active = state.active[None]
    r = np.where(active, state.r[None], 1.0)
    nn = state.counts
    eta = state.eta(data)
    log_t = np.log(state.t)[:, None, None]
    term = special.gammaln(r + nn) - special.gammaln(r) + nn * eta - (r + nn) * np.logaddexp(0.0, eta + log_t)
    return float(np.sum(np.where(active, term, 0.0)))


class PosteriorSamples(object):
    """Stored post-burn-in draws of one or more chains.

    Attributes:
        r: (S, J, K) atom weights.
        beta: (S, J, K, P) coefficients.
        active: (S, J, K) masks.
        sweeps: (S,) sweep index of each draw.
        loglik: (S,) augmented log-likelihood at each draw.
        event_draws: (S, n) sampled risk of every subject, or None.
        diagnostics: DataFrame with one row per sweep, or None.
    """

    def __init__(self, r, beta, active, sweeps=None, loglik=None, event_draws=None, diagnostics=None):
        self.r = np.asarray(r, dtype=float)
        self.beta = np.asarray(beta, dtype=float)
        self.active = np.asarray(active, dtype=bool)
        S = self.r.shape[0]
        if S == 0:
            raise ParameterError("posterior samples need at least one draw")
        if self.r.ndim != 3 or self.beta.shape[:3] != self.r.shape or self.active.shape != self.r.shape:
            raise ParameterError("inconsistent draw shapes r={} beta={} active={}".format(
                self.r.shape, self.beta.shape, self.active.shape))
        self.sweeps = np.arange(S) if sweeps is None else np.asarray(sweeps, dtype=int)
        self.loglik = np.full(S, np.nan) if loglik is None else np.asarray(loglik, dtype=float)
        self.event_draws = None if event_draws is None else np.asarray(event_draws, dtype=int)
        self.diagnostics = diagnostics

    def __len__(self):
        return self.r.shape[0]

    @property
    def num_risks(self):
        return self.r.shape[1]

    @property
    def num_subrisks(self):
        return self.r.shape[2]

    def params(self, s):
        """LdrParams of draw s."""
        return LdrParams.from_grid(self.r[s], self.beta[s], self.active[s])

    def __iter__(self):
        for s in range(len(self)):
            yield self.params(s)

    def point_estimate(self):
        """Posterior-mean atoms, keeping atoms active in at least half the draws.

        Every risk keeps its most frequently active atom.
        """
        freq = self.active.mean(axis=0)
        keep = freq >= 0.5
        keep[np.arange(self.num_risks), np.argmax(freq, axis=1)] = True
        counts = np.maximum(self.active.sum(axis=0), 1)
        r = np.where(self.active, self.r, 0.0).sum(axis=0) / counts
        beta = np.where(self.active[..., None], self.beta, 0.0).sum(axis=0) / counts[..., None]
        keep &= r > 0
        return LdrParams.from_grid(r, beta, keep)

    @classmethod
    def concatenate(cls, chains):
        chains = list(chains)
        events = None
        if all(c.event_draws is not None for c in chains):
            events = np.concatenate([c.event_draws for c in chains])
        return cls(np.concatenate([c.r for c in chains]), np.concatenate([c.beta for c in chains]),
                   np.concatenate([c.active for c in chains]), np.concatenate([c.sweeps for c in chains]),
                   np.concatenate([c.loglik for c in chains]), events)

    def to_dict(self):
        J, K = self.num_risks, self.num_subrisks
        draws = [{'r': self.r[s].tolist(), 'beta': self.beta[s].tolist(), 'active': self.active[s].tolist()}
                 for s in range(len(self))]
        return {'J': J, 'K': K, 'draws': draws}

    @classmethod
    def from_dict(cls, d):
        try:
            draws = d['draws']
            r = np.array([dr['r'] for dr in draws], dtype=float)
            beta = np.array([dr['beta'] for dr in draws], dtype=float)
            active = np.array([dr['active'] for dr in draws], dtype=bool)
        except (KeyError, TypeError, ValueError) as e:
            raise ParameterError("posterior document is malformed: {}".format(e))
        if r.ndim != 3 or r.shape[1:] != (int(d['J']), int(d['K'])):
            raise ParameterError("posterior draws do not match J={} K={}".format(d.get('J'), d.get('K')))
        return cls(r, beta, active)

    def save(self, path):
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f)

    def write_trace(self, path):
        """One JSON line per stored draw."""
        with open(path, 'w') as f:
            for s in range(len(self)):
                f.write(json.dumps({
                    'sweep': int(self.sweeps[s]),
                    'r': self.r[s].tolist(),
                    'beta': self.beta[s].tolist(),
                    'active_mask': self.active[s].tolist(),
                    'loglik': None if np.isnan(self.loglik[s]) else float(self.loglik[s]),
                }) + '\n')

    def write_diagnostics(self, path):
        if self.diagnostics is None:
            raise ParameterError("these samples carry no per-sweep diagnostics")
        self.diagnostics.to_csv(path, index=False)


def _diagnostic_row(sweep_index, state, loglik):
    row = {'sweep': sweep_index}
    for j, count in enumerate(state.active.sum(axis=1)):
        row['active_risk{}'.format(j + 1)] = int(count)
    row['loglik'] = loglik
    return row


def run_chain(data, config, rng=None):
    """Runs one chain and returns its thinned post-burn-in draws.

    Args:
        data: Dataset, ChainData or list of ObservationRecords.
        config: ChainConfig.
        rng: numpy Generator; defaults to one seeded from config.seed.

    Raises:
        NumericalError: with the failing sweep attached.
    """
    data = _as_chain_data(data)
    rng = distributions.make_rng(config.seed if rng is None else rng)
    state = GibbsState.initialize(data, config.K, config.hyperparams, rng)
    logging.info("starting chain: n=%d J=%d K=%d iterations=%d burn_in=%d thin=%d",
                 data.n, data.num_risks, config.K, config.iterations, config.burn_in, config.thin)
    rs, betas, actives, sweeps, logliks, events, rows = [], [], [], [], [], [], []
    for it in range(config.iterations):
        try:
            sweep(state, data, rng)
        except NumericalError as e:
            raise NumericalError(str(e), sweep=it) from e
        loglik = augmented_log_likelihood(state, data)
        rows.append(_diagnostic_row(it, state, loglik))
        if config.log_every and (it + 1) % config.log_every == 0:
            logging.info("sweep %d: active atoms per risk %s, loglik %.3f",
                         it + 1, state.active.sum(axis=1).tolist(), loglik)
        if it >= config.burn_in and (it - config.burn_in) % config.thin == 0:
            rs.append(state.r.copy())
            betas.append(state.beta.copy())
            actives.append(state.active.copy())
            sweeps.append(it)
            logliks.append(loglik)
            events.append(state.y.copy())
    logging.info("chain finished: %d draws stored, active atoms per risk %s",
                 len(rs), state.active.sum(axis=1).tolist())
    return PosteriorSamples(np.array(rs), np.array(betas), np.array(actives), sweeps, logliks,
                            np.array(events).reshape(len(rs), data.n), pd.DataFrame(rows))


def run_chains(data, config, num_chains, rng=None):
    """Runs independent chains concurrently on split generators.

    Returns:
        A list of PosteriorSamples, one per chain, in chain order.
    """
    if num_chains < 1:
        raise ParameterError("num_chains must be >= 1, got {!r}".format(num_chains))
    data = _as_chain_data(data)
    rng = distributions.make_rng(config.seed if rng is None else rng)
    streams = distributions.split_rng(rng, num_chains)
    with concurrent.futures.ThreadPoolExecutor(max_workers=num_chains) as pool:
        futures = [pool.submit(run_chain, data, config, stream) for stream in streams]
        return [f.result() for f in futures]


def dominant_subrisks(samples, ratio=10.0):
    """Counts, per risk, the atoms whose posterior-mean weight is within ratio of the largest.

    An atom retired in a draw contributes zero weight to that draw.
    """
    r = np.where(samples.active, samples.r, 0.0).mean(axis=0)
    top = r.max(axis=1, keepdims=True)
    return np.sum((r > 0) & (r * ratio >= top), axis=1)


def impute_event_types(samples, indices=None):
    """Majority vote of the sampled event type of each subject (0-based)."""
    if samples.event_draws is None:
        raise ParameterError("these samples carry no event-type draws")
    draws = samples.event_draws if indices is None else samples.event_draws[:, np.asarray(indices, dtype=int)]
    if draws.shape[1] == 0:
        return np.empty(0, dtype=int)
    votes = (draws[None, :, :] == np.arange(samples.num_risks)[:, None, None]).sum(axis=1)
    return np.argmax(votes, axis=0)
