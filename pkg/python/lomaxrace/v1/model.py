"""Lomax delegate racing: parameters, generative sampling and predictions.

An LDR model races K sub-risks inside each of J risks. Sub-risk (j, k) is an
atom with weight r_jk and coefficients beta_jk; given covariates x (with a
leading 1 for the intercept) its latent rate is lambda_jk ~ Gamma(r_jk,
e^{x'beta_jk}) and its latent time is Exp(lambda_jk). The observed event is
the overall minimum, and its risk is the risk owning the winning atom.

Indices are 0-based throughout; file formats add 1.
"""

import dataclasses
import json
import math

import numpy as np
from scipy import optimize
from scipy import special

from lomaxrace.v1 import distributions
from lomaxrace.v1.errors import ConvergenceError, DomainError, NumericalError, ParameterError

DEFAULT_MASS_TOL = 1e-4
DEFAULT_MAX_TERMS = 10000

# Subjects per block in cif_matrix; bounds the (block, n_mc, atoms) temporaries.
_CIF_BLOCK = 128


@dataclasses.dataclass(frozen=True)
class Hyperparams:
    """Gamma-process hyperparameters.

    alpha_vjk ~ Gamma(a0, 1/b0), gamma_0j ~ Gamma(e0, 1/f0),
    c_0j ~ Gamma(e1, 1/f1).
    """

    a0: float = 0.01
    b0: float = 0.01
    e0: float = 0.01
    f0: float = 0.01
    e1: float = 0.01
    f1: float = 0.01

    def __post_init__(self):
        for field in dataclasses.fields(self):
            value = float(getattr(self, field.name))
            if not value > 0:
                raise ParameterError("hyperparameter {} must be > 0, got {!r}".format(field.name, value))
            object.__setattr__(self, field.name, value)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ParameterError("unknown hyperparameters: {}".format(sorted(unknown)))
        return cls(**d)


def _readonly(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


class LdrParams(object):
    """Active atoms of a fitted or sampled LDR model.

    Atoms are stored as a flat list; pruned atoms are dropped rather than
    given zero weight.

    Attributes:
        r: (A,) positive atom weights.
        beta: (A, P) coefficients; column 0 multiplies the intercept.
        risk: (A,) risk index of each atom.
        subrisk: (A,) sub-risk index of each atom within the truncation level.
        num_risks: J.
        num_subrisks: truncation level K the atoms were drawn under.
    """

    def __init__(self, r, beta, risk, num_risks, num_subrisks, subrisk=None):
        r = np.asarray(r, dtype=float).reshape(-1)
        beta = np.asarray(beta, dtype=float)
        risk = np.asarray(risk, dtype=int).reshape(-1)
        if beta.ndim != 2 or beta.shape[0] != r.shape[0]:
            raise ParameterError("beta must have shape (atoms, P) matching r, got {} for {} atoms".format(
                beta.shape, r.shape[0]))
        if risk.shape != r.shape:
            raise ParameterError("risk must list one risk per atom")
        if r.size == 0:
            raise ParameterError("LDR params need at least one atom")
        if not np.all(r > 0):
            raise ParameterError("atom weights r must all be > 0")
        if int(num_risks) < 1 or int(num_subrisks) < 1:
            raise ParameterError("need J >= 1 and K >= 1, got J={!r} K={!r}".format(num_risks, num_subrisks))
        if np.any((risk < 0) | (risk >= int(num_risks))):
            raise ParameterError("atom risk index out of range [0, {})".format(num_risks))
        if subrisk is None:
            subrisk = np.zeros_like(risk)
            for j in range(int(num_risks)):
                idx = np.flatnonzero(risk == j)
                subrisk[idx] = np.arange(idx.size)
        subrisk = np.asarray(subrisk, dtype=int).reshape(-1)
        if subrisk.shape != r.shape:
            raise ParameterError("subrisk must list one index per atom")
        self.r = _readonly(r)
        self.beta = _readonly(beta)
        self.risk = _readonly(risk)
        self.subrisk = _readonly(subrisk)
        self.num_risks = int(num_risks)
        self.num_subrisks = int(num_subrisks)

    @classmethod
    def from_grid(cls, r, beta, active=None):
        """Builds params from J x K weights and J x K x P coefficients.

        Args:
            r: (J, K) atom weights.
            beta: (J, K, P) coefficients.
            active: optional (J, K) bool mask; False atoms are dropped.
        """
        r = np.asarray(r, dtype=float)
        beta = np.asarray(beta, dtype=float)
        if r.ndim != 2 or beta.ndim != 3 or beta.shape[:2] != r.shape:
            raise ParameterError("grid shapes must be (J, K) and (J, K, P), got {} and {}".format(
                r.shape, beta.shape))
        J, K = r.shape
        if active is None:
            active = np.ones((J, K), dtype=bool)
        active = np.asarray(active, dtype=bool)
        jj, kk = np.nonzero(active)
        return cls(r[jj, kk], beta[jj, kk], jj, J, K, subrisk=kk)

    @property
    def num_atoms(self):
        return self.r.shape[0]

    @property
    def num_coefficients(self):
        return self.beta.shape[1]

    def atoms_of(self, risk):
        return np.flatnonzero(self.risk == risk)

    def risk_onehot(self):
        """(A, J) indicator matrix of atom-to-risk membership."""
        onehot = np.zeros((self.num_atoms, self.num_risks))
        onehot[np.arange(self.num_atoms), self.risk] = 1.0
        return onehot

    def active_counts(self):
        return np.bincount(self.risk, minlength=self.num_risks)

    def grid(self):
        """Returns (r, beta, active) on the J x K grid; dropped atoms are zero."""
        J, K, P = self.num_risks, self.num_subrisks, self.num_coefficients
        r = np.zeros((J, K))
        beta = np.zeros((J, K, P))
        active = np.zeros((J, K), dtype=bool)
        r[self.risk, self.subrisk] = self.r
        beta[self.risk, self.subrisk] = self.beta
        active[self.risk, self.subrisk] = True
        return r, beta, active

    def linear_predictor(self, x):
        """x'beta for every atom; x is (P,) or (n, P)."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.num_coefficients,) or x.ndim > 2:
            raise ParameterError("covariates must have length {} (intercept first), got shape {}".format(
                self.num_coefficients, x.shape))
        return x @ self.beta.T

    def check_risk(self, risk):
        if not (isinstance(risk, (int, np.integer)) and 0 <= risk < self.num_risks):
            raise ParameterError("risk index must be in [0, {}), got {!r}".format(self.num_risks, risk))
        return int(risk)

    def to_dict(self):
        rs, betas, subs = [], [], []
        for j in range(self.num_risks):
            idx = self.atoms_of(j)
            rs.append(self.r[idx].tolist())
            betas.append(self.beta[idx].tolist())
            subs.append(self.subrisk[idx].tolist())
        return {'J': self.num_risks, 'K': self.num_subrisks, 'r': rs, 'beta': betas, 'subrisk': subs}

    @classmethod
    def from_dict(cls, d):
        try:
            J, K = int(d['J']), int(d['K'])
            rs, betas = d['r'], d['beta']
        except (KeyError, TypeError, ValueError) as e:
            raise ParameterError("params document needs J, K, r, beta: {}".format(e))
        if len(rs) != J or len(betas) != J:
            raise ParameterError("params document lists {} risks for J={}".format(len(rs), J))
        subs = d.get('subrisk') or [list(range(len(rj))) for rj in rs]
        r, beta, risk, sub = [], [], [], []
        for j in range(J):
            if len(betas[j]) != len(rs[j]) or len(subs[j]) != len(rs[j]):
                raise ParameterError("risk {}: r, beta and subrisk lengths differ".format(j + 1))
            r.extend(rs[j])
            beta.extend(betas[j])
            risk.extend([j] * len(rs[j]))
            sub.extend(subs[j])
        return cls(r, np.array(beta, dtype=float).reshape(len(r), -1), risk, J, K, subrisk=sub)

    def save(self, path):
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def __repr__(self):
        return "LdrParams(J={}, K={}, atoms={}, P={})".format(
            self.num_risks, self.num_subrisks, self.num_atoms, self.num_coefficients)


def _check_vector(x, params):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ParameterError("covariates must be a vector, got shape {}".format(x.shape))
    return params.linear_predictor(x)


def _check_time(t):
    t = np.asarray(t, dtype=float)
    if np.any(~(t >= 0)):
        raise DomainError("t", t, ">= 0")
    return t


def ldr_hazard(t, x, params):
    """Hazard sum_jk r_jk / (t + e^{-x'beta_jk})."""
    t = _check_time(t)
    eta = _check_vector(x, params)
    h = np.sum(params.r / (t[..., None] + np.exp(-eta)), axis=-1)
    return h.item() if h.ndim == 0 else h


def ldr_log_survival(t, x, params):
    t = _check_time(t)
    eta = _check_vector(x, params)
    # log1p(e^eta t), written to stay finite for large eta.
    with np.errstate(divide='ignore'):
        log_t = np.log(t[..., None])
    s = -np.sum(params.r * np.logaddexp(0.0, eta + log_t), axis=-1)
    return s.item() if s.ndim == 0 else s


def ldr_survival(t, x, params):
    """Survival prod_jk (e^{x'beta_jk} t + 1)^{-r_jk}."""
    return np.exp(ldr_log_survival(t, x, params))


def _log_race_times(eta, r, rng, shape):
    log_lam = distributions.sample_log_gamma(np.broadcast_to(r, shape), rng) + eta
    log_e = np.log(rng.exponential(1.0, size=shape))
    return log_e - log_lam


def sample_event(x, params, rng):
    """Simulates one LDR event for covariates x.

    Returns:
        (time, risk, subrisk) of the winning atom.
    """
    eta = _check_vector(x, params)
    log_t = _log_race_times(eta, params.r, rng, eta.shape)
    a = int(np.argmin(log_t))
    return float(np.exp(log_t[a])), int(params.risk[a]), int(params.subrisk[a])


def sample_events(X, params, rng):
    """Vectorized sample_event for an (n, P) design matrix.

    Returns:
        (times, risks, subrisks), each of length n.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    eta = params.linear_predictor(X)
    log_t = _log_race_times(eta, params.r, rng, eta.shape)
    a = np.argmin(log_t, axis=1)
    times = np.exp(log_t[np.arange(X.shape[0]), a])
    return times, params.risk[a], params.subrisk[a]


def _check_mc(n_mc):
    n_mc = int(n_mc)
    if n_mc < 1:
        raise ParameterError("n_mc must be >= 1, got {!r}".format(n_mc))
    return n_mc


def cif(x, tau, params, risk, n_mc, rng):
    """Monte-Carlo cumulative incidence P(t <= tau, y = risk | x).

    Averages (sum_k lambda_jk / sum lambda)(1 - e^{-tau sum lambda}) over
    lambda_jk ~ Gamma(r_jk, e^{x'beta_jk}). One set of draws serves every tau,
    so the result is non-decreasing in tau.
    """
    risk = params.check_risk(risk)
    tau = _check_time(tau)
    n_mc = _check_mc(n_mc)
    eta = _check_vector(x, params)
    log_lam = distributions.sample_log_gamma(np.broadcast_to(params.r, (n_mc, params.num_atoms)), rng) + eta
    log_tot = special.logsumexp(log_lam, axis=1)
    own = params.risk == risk
    if not np.any(own):
        share = np.zeros(n_mc)
    else:
        share = np.exp(special.logsumexp(log_lam[:, own], axis=1) - log_tot)
    hit = -np.expm1(-np.exp(log_tot)[:, None] * np.atleast_1d(tau)[None, :])
    out = np.mean(share[:, None] * hit, axis=0)
    return out.item() if tau.ndim == 0 else out.reshape(tau.shape)


def cif_matrix(X, taus, params, n_mc, rng):
    """CIF for every subject, risk and tau.

    Args:
        X: (n, P) design matrix.
        taus: (T,) evaluation times.
        params: LdrParams.
        n_mc: gamma draws per subject.
        rng: numpy Generator.

    Returns:
        (n, J, T) array.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    taus = np.atleast_1d(_check_time(taus))
    n_mc = _check_mc(n_mc)
    eta = params.linear_predictor(X)
    onehot = params.risk_onehot()
    out = np.empty((X.shape[0], params.num_risks, taus.shape[0]))
    for start in range(0, X.shape[0], _CIF_BLOCK):
        e = eta[start:start + _CIF_BLOCK]
        shape = (e.shape[0], n_mc, params.num_atoms)
        log_lam = distributions.sample_log_gamma(np.broadcast_to(params.r, shape), rng) + e[:, None, :]
        log_tot = special.logsumexp(log_lam, axis=2, keepdims=True)
        shares = np.exp(log_lam - log_tot) @ onehot
        hit = -np.expm1(-np.exp(log_tot) * taus)
        out[start:start + _CIF_BLOCK] = np.einsum('nmj,nmt->njt', shares, hit) / n_mc
    return out


class GammaConvolutionSpec(object):
    """The law of t ~ Exp(sum_t lambda_t) with lambda_t ~ Gamma(shape_t, 1/scale_t).

    The sum of independent gammas with different rates is an infinite
    mixture of Gamma(rho + m, rate b1) laws with weights c * delta_m, where
    b1 is the largest scale, rho the total shape and c = prod (b_t/b1)^r_t.
    Mixing an exponential over each component gives Lomax(rho + m, b1),
    so P(t < q) = 1 - sum_m c delta_m (b1 / (q + b1))^(rho + m).
    """

    def __init__(self, shapes, scales):
        shapes = np.atleast_1d(np.asarray(shapes, dtype=float))
        scales = np.atleast_1d(np.asarray(scales, dtype=float))
        if shapes.shape != scales.shape or shapes.ndim != 1 or shapes.size == 0:
            raise ParameterError("shapes and scales must be equal-length non-empty vectors")
        if not (np.all(shapes > 0) and np.all(scales > 0) and np.all(np.isfinite(scales))):
            raise ParameterError("shapes and scales must be finite and > 0")
        self.shapes = _readonly(shapes)
        self.scales = _readonly(scales)
        self.b1 = float(np.max(scales))
        self.rho = float(np.sum(shapes))
        self.log_c = float(np.sum(shapes * np.log(scales / self.b1)))
        self._u = 1.0 - scales / self.b1
        self._cache = {}

    @classmethod
    def for_subject(cls, x, params):
        """Marginal event time of an LDR subject: scales e^{-x'beta_jk}."""
        eta = _check_vector(x, params)
        return cls(params.r, np.exp(-eta))

    def _gammas(self, count):
        h = np.arange(1, count + 1, dtype=float)
        return np.sum(self.shapes[:, None] * self._u[:, None] ** h[None, :], axis=0) / h

    def mixture_weights(self, mass_tol=DEFAULT_MASS_TOL, max_terms=DEFAULT_MAX_TERMS):
        """Weights c * delta_m for m = 0..M, M the smallest with mass >= 1 - mass_tol.

        delta is kept as d * exp(shift) with d rescaled whenever it grows
        large; the recursion is linear so a common factor carries through.

        Raises:
            ConvergenceError: if more than max_terms terms would be needed.
        """
        mass_tol = float(mass_tol)
        if not 0 < mass_tol < 1:
            raise ParameterError("mass_tol must be in (0, 1), got {!r}".format(mass_tol))
        key = (mass_tol, int(max_terms))
        if key in self._cache:
            return self._cache[key]

        target = math.log1p(-mass_tol)
        d = np.empty(64)
        d[0] = 1.0
        shift = 0.0
        total = 1.0
        hg = np.empty(0)
        m = 0
        while self.log_c + shift + math.log(total) < target:
            if m >= max_terms:
                raise ConvergenceError("gamma convolution series needs more than {} terms (mass {:.6g})".format(
                    max_terms, math.exp(self.log_c + shift + math.log(total))))
            if hg.shape[0] < m + 1:
                count = max(2 * hg.shape[0], 64)
                hg = np.arange(1, count + 1) * self._gammas(count)
            if d.shape[0] < m + 2:
                d = np.concatenate([d, np.empty(d.shape[0])])
            nxt = float(np.dot(hg[:m + 1], d[m::-1])) / (m + 1)
            m += 1
            d[m] = nxt
            total += nxt
            if total > 1e250:
                d[:m + 1] /= total
                shift += math.log(total)
                total = 1.0
        with np.errstate(divide='ignore'):
            weights = np.exp(self.log_c + shift + np.log(d[:m + 1]))
        self._cache[key] = weights
        return weights

    def num_terms(self, mass_tol=DEFAULT_MASS_TOL, max_terms=DEFAULT_MAX_TERMS):
        """Truncation level M."""
        return self.mixture_weights(mass_tol, max_terms).shape[0] - 1

    def _log_terms(self, q, mass_tol, max_terms):
        w = self.mixture_weights(mass_tol, max_terms)
        q = _check_time(q)
        log_z = -np.log1p(q / self.b1)
        powers = self.rho + np.arange(w.shape[0])
        with np.errstate(divide='ignore'):
            log_w = np.log(w)
        return q, log_w, log_z, powers


def marginal_time_cdf(q, spec, mass_tol=DEFAULT_MASS_TOL, max_terms=DEFAULT_MAX_TERMS):
    """Truncated-series CDF P(t < q) of a gamma-convolution spec.

    Clamped to [0, 1]. The retained mass is at least 1 - mass_tol, so the
    value at q = 0 is at most mass_tol.
    """
    q, log_w, log_z, powers = spec._log_terms(q, mass_tol, max_terms)
    tail = np.sum(np.exp(log_w + powers * log_z[..., None]), axis=-1)
    out = np.clip(1.0 - tail, 0.0, 1.0)
    return out.item() if q.ndim == 0 else out


def marginal_time_pdf(t, spec, mass_tol=DEFAULT_MASS_TOL, max_terms=DEFAULT_MAX_TERMS):
    """Density matching marginal_time_cdf's truncation (derivative of the retained terms)."""
    t, log_w, log_z, powers = spec._log_terms(t, mass_tol, max_terms)
    dens = np.sum(np.exp(log_w + np.log(powers) + powers * log_z[..., None]), axis=-1) / (t + spec.b1)
    return dens.item() if t.ndim == 0 else dens


def sample_marginal_time(spec, mass_tol, rng, size=None, max_doublings=1100):
    """Inverse-CDF draws from marginal_time_cdf.

    Each uniform u is matched by Brent's method on a bracket [0, hi] whose
    upper end starts at the largest component scale and doubles until
    F(hi) >= u.

    Raises:
        NumericalError: if the bracket cannot be grown or the root finder fails.
    """
    spec.mixture_weights(mass_tol)
    u = np.atleast_1d(rng.random(size=size))
    floor = marginal_time_cdf(0.0, spec, mass_tol)
    out = np.empty(u.size)
    for i, ui in enumerate(u.reshape(-1)):
        if ui <= floor:
            out[i] = 0.0
            continue
        hi = spec.b1
        for _ in range(max_doublings):
            if marginal_time_cdf(hi, spec, mass_tol) >= ui:
                break
            hi *= 2.0
        else:
            raise NumericalError("cannot bracket quantile {:.17g} of the marginal time".format(ui))
        try:
            out[i] = optimize.brentq(lambda q: marginal_time_cdf(q, spec, mass_tol) - ui, 0.0, hi, xtol=1e-10)
        except (RuntimeError, ValueError) as e:
            raise NumericalError("marginal time inversion failed at u={:.17g}: {}".format(ui, e))
    if size is None:
        return float(out[0])
    return out.reshape(size)
