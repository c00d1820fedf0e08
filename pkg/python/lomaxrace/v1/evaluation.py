"""Cause-specific concordance, Brier scores and prediction reports.

Both metrics are computed on fully observed test subjects: subjects with a
censored or missing time, or a missing event type, are dropped before
scoring.
"""

import dataclasses
import logging

import numpy as np
import pandas as pd

from lomaxrace.v1 import distributions
from lomaxrace.v1 import model
from lomaxrace.v1.datasets import Dataset, ObservationRecord
from lomaxrace.v1.errors import ParameterError, UndefinedMetricError
from lomaxrace.v1.gibbs import PosteriorSamples

CINDEX = 'cindex'
BRIER = 'brier'
METRICS = (CINDEX, BRIER)

DEFAULT_N_MC = 1000

# Rows of the pair matrix built at a time in c_index.
_PAIR_BLOCK = 1024


def fully_observed(dataset):
    return dataset.fully_observed()


def _outcomes(data):
    """(time, event) arrays of a fully observed dataset."""
    if not isinstance(data, Dataset):
        data = Dataset(data)
    if not all(rec.fully_observed for rec in data):
        raise ParameterError("metrics need fully observed subjects; filter with fully_observed first")
    a = data.arrays()
    return a.time, a.event


def _check_scores(scores, n):
    scores = np.asarray(scores, dtype=float).reshape(-1)
    if scores.shape[0] != n:
        raise ParameterError("got {} scores for {} subjects".format(scores.shape[0], n))
    return scores


def c_index(scores, data, risk):
    """Cause-specific concordance of scores for risk (0-based).

    A pair (i, i') is comparable when subject i failed from risk and either
    t_i < t_i' or i' failed from another risk; pairs tied in time are
    skipped. It is concordant when score_i > score_i'; tied scores count 1/2.

    Raises:
        UndefinedMetricError: if no pair is comparable.
    """
    time, event = _outcomes(data)
    scores = _check_scores(scores, time.shape[0])
    comparable = 0
    concordant = 0.0
    cases = np.flatnonzero(event == risk)
    for start in range(0, cases.shape[0], _PAIR_BLOCK):
        i = cases[start:start + _PAIR_BLOCK]
        ti = time[i][:, None]
        ok = (ti != time[None, :]) & ((ti < time[None, :]) | (event[None, :] != risk))
        si = scores[i][:, None]
        comparable += int(ok.sum())
        concordant += float(np.sum(ok & (si > scores[None, :])) + 0.5 * np.sum(ok & (si == scores[None, :])))
    if comparable == 0:
        raise UndefinedMetricError("no comparable pairs for risk {}".format(risk + 1))
    return concordant / comparable


def brier_score(cif_predictions, data, risk, tau):
    """Mean of (1(t_i <= tau, y_i = risk) - P(t_i <= tau, y_i = risk))^2.

    Raises:
        UndefinedMetricError: on an empty test set.
    """
    time, event = _outcomes(data)
    if time.shape[0] == 0:
        raise UndefinedMetricError("Brier score of an empty test set")
    pred = _check_scores(cif_predictions, time.shape[0])
    hit = ((time <= tau) & (event == risk)).astype(float)
    return float(np.mean((hit - pred) ** 2))


def _covariates(subject):
    if isinstance(subject, ObservationRecord):
        return np.asarray(subject.covariates)
    return np.asarray(subject, dtype=float)


def _per_draw(n_mc, samples):
    return max(1, int(n_mc) // len(samples))


def score_from_posterior(source, subject, risk, tau, n_mc, rng):
    """CIF of subject for risk at tau, averaged over posterior draws.

    Args:
        source: PosteriorSamples (n_mc is shared out over the draws) or
            LdrParams (evaluated directly).
        subject: ObservationRecord or covariate vector with leading 1.
    """
    x = _covariates(subject)
    if isinstance(source, model.LdrParams):
        return model.cif(x, tau, source, risk, n_mc, rng)
    if not isinstance(source, PosteriorSamples):
        raise ParameterError("params source must be LdrParams or PosteriorSamples, got {!r}".format(source))
    per = _per_draw(n_mc, source)
    values = [model.cif(x, tau, params, risk, per, rng) for params in source]
    return np.mean(values, axis=0) if np.ndim(tau) else float(np.mean(values))


def predict_cif(source, dataset, taus, n_mc=DEFAULT_N_MC, rng=None):
    """CIF of every subject, risk and tau, shape (n, J, T)."""
    rng = distributions.make_rng(rng)
    X = dataset.design_matrix() if isinstance(dataset, Dataset) else np.atleast_2d(dataset)
    if isinstance(source, model.LdrParams):
        return model.cif_matrix(X, taus, source, n_mc, rng)
    if not isinstance(source, PosteriorSamples):
        raise ParameterError("params source must be LdrParams or PosteriorSamples, got {!r}".format(source))
    per = _per_draw(n_mc, source)
    total = None
    for params in source:
        part = model.cif_matrix(X, taus, params, per, rng)
        total = part if total is None else total + part
    return total / len(source)


def train_test_split(data, fraction, seed):
    """Seeded shuffle split; the test part keeps only fully observed subjects.

    Returns:
        (train, test) Datasets.
    """
    if not 0 < fraction <= 1:
        raise ParameterError("train fraction must be in (0, 1], got {!r}".format(fraction))
    order = distributions.make_rng(seed).permutation(len(data))
    cut = int(round(fraction * len(data)))
    train = data.subset(order[:cut])
    test = data.subset(order[cut:]).fully_observed()
    if len(test) == 0:
        logging.warning("train fraction %g leaves no fully observed test subjects", fraction)
    return train, test


@dataclasses.dataclass(frozen=True)
class MetricReport:
    """One metric for one risk over a grid of evaluation times.

    Undefined values (no comparable pairs) are NaN.
    """

    risk: int
    taus: tuple
    metric: str
    values: tuple
    split: str = 'test'
    n_mc: int = DEFAULT_N_MC

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ParameterError("metric must be one of {}, got {!r}".format(METRICS, self.metric))
        taus = tuple(float(t) for t in self.taus)
        values = tuple(float(v) for v in self.values)
        if len(taus) != len(values):
            raise ParameterError("{} values for {} evaluation times".format(len(values), len(taus)))
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise ParameterError("evaluation times must be strictly increasing")
        if any(not (0 <= v <= 1) for v in values if not np.isnan(v)):
            raise ParameterError("metric values must lie in [0, 1]")
        object.__setattr__(self, 'taus', taus)
        object.__setattr__(self, 'values', values)

    def to_frame(self):
        """Rows of (risk, tau, metric, value, split); risk is 1-based."""
        return pd.DataFrame({
            'risk': self.risk + 1,
            'tau': list(self.taus),
            'metric': self.metric,
            'value': list(self.values),
            'split': self.split,
        })


def reports_frame(reports):
    return pd.concat([r.to_frame() for r in reports], ignore_index=True)


def _check_taus(taus):
    taus = np.asarray(taus, dtype=float).reshape(-1)
    if taus.size == 0 or np.any(np.diff(taus) <= 0) or np.any(taus < 0):
        raise ParameterError("evaluation times must be non-negative and strictly increasing")
    return taus


def evaluate(source, test, taus, metrics=METRICS, risks=None, n_mc=DEFAULT_N_MC, rng=None, split='test'):
    """Scores a fitted model on test data.

    Returns:
        A MetricReport per (metric, risk), metrics outermost.
    """
    taus = _check_taus(taus)
    for m in metrics:
        if m not in METRICS:
            raise ParameterError("unknown metric {!r}".format(m))
    test = test.fully_observed()
    if len(test) == 0:
        raise UndefinedMetricError("no fully observed subjects to evaluate on")
    cif = predict_cif(source, test, taus, n_mc, rng)
    risks = range(cif.shape[1]) if risks is None else risks
    reports = []
    for metric in metrics:
        for j in risks:
            values = []
            for ti, tau in enumerate(taus):
                scores = cif[:, j, ti]
                try:
                    if metric == CINDEX:
                        values.append(c_index(scores, test, j))
                    else:
                        values.append(brier_score(scores, test, j, tau))
                except UndefinedMetricError as e:
                    logging.warning("%s undefined at tau=%g: %s", metric, tau, e)
                    values.append(float('nan'))
            reports.append(MetricReport(j, tuple(taus), metric, tuple(values), split, n_mc))
    return reports
