"""Observation records, datasets, CSV ingestion and the synthetic generators.

CSV grammar (one row per subject, header required):

  time    positive number; "C<number>" for right-censored at that time;
          empty when the event time is missing.
  event   1..J for a known event type; 0 for a censored row; empty when the
          event type is missing.
  others  covariates, one column each. The intercept is not stored; it is
          prepended on load.
"""

import collections
import dataclasses
import enum
import json
import logging
import math

import numpy as np
import pandas as pd

from lomaxrace.v1.errors import IngestionError, InvalidRecordError, ParameterError

DATA1 = 'data1'
DATA2 = 'data2'

# Coefficients (intercept excluded) drawn once from N(0, I_3) and fixed here.
DEFAULT_BETAS = {
    DATA1: ((1.2, -0.9, 0.6), (-0.7, 1.1, 0.9)),
    DATA2: ((0.9, -1.3, 0.4), (-1.0, 0.5, 1.2)),
}

DEFAULT_CENSOR_TIMES = {DATA1: 3.5, DATA2: 6.5}


class TimeStatus(enum.Enum):
    OBSERVED = 'observed'
    RIGHT_CENSORED = 'right_censored'
    MISSING = 'missing'


@dataclasses.dataclass(frozen=True)
class ObservationRecord:
    """One subject.

    Attributes:
        covariates: tuple of V + 1 floats; the first is the intercept 1.0.
        time_status: TimeStatus.
        time: event time T (observed) or censoring time T_rc (censored);
            None when missing.
        event: 0-based event type, or None when missing. Censored records
            have no event type.
    """

    covariates: tuple
    time_status: TimeStatus
    time: float = None
    event: int = None

    def __post_init__(self):
        cov = tuple(float(c) for c in self.covariates)
        if not cov or cov[0] != 1.0:
            raise InvalidRecordError("covariates must start with the intercept 1.0, got {!r}".format(cov[:1]))
        if not all(math.isfinite(c) for c in cov):
            raise InvalidRecordError("covariates must be finite")
        object.__setattr__(self, 'covariates', cov)
        status = TimeStatus(self.time_status)
        object.__setattr__(self, 'time_status', status)
        if status is TimeStatus.MISSING:
            if self.time is not None:
                raise InvalidRecordError("a missing time cannot carry a value")
            if self.event is None:
                raise InvalidRecordError("event time and event type cannot both be missing")
        else:
            t = float(self.time) if self.time is not None else math.nan
            if not (t > 0 and math.isfinite(t)):
                raise InvalidRecordError("time must be positive and finite, got {!r}".format(self.time))
            object.__setattr__(self, 'time', t)
        if self.event is not None:
            if status is TimeStatus.RIGHT_CENSORED:
                raise InvalidRecordError("a right-censored record has no event type")
            if int(self.event) != self.event or self.event < 0:
                raise InvalidRecordError("event type must be a non-negative integer, got {!r}".format(self.event))
            object.__setattr__(self, 'event', int(self.event))

    @classmethod
    def observed(cls, covariates, time, event=None):
        return cls(covariates, TimeStatus.OBSERVED, time, event)

    @classmethod
    def censored(cls, covariates, time):
        return cls(covariates, TimeStatus.RIGHT_CENSORED, time, None)

    @classmethod
    def time_missing(cls, covariates, event):
        return cls(covariates, TimeStatus.MISSING, None, event)

    @property
    def is_censored(self):
        return self.time_status is TimeStatus.RIGHT_CENSORED

    @property
    def is_time_missing(self):
        return self.time_status is TimeStatus.MISSING

    @property
    def is_event_missing(self):
        return self.event is None and not self.is_censored

    @property
    def fully_observed(self):
        return self.time_status is TimeStatus.OBSERVED and self.event is not None

    @property
    def lower_bound(self):
        """Lower end of the interval known to hold the event time."""
        if self.time_status is TimeStatus.MISSING:
            return 0.0
        return self.time


# Column-oriented view of a Dataset. Missing or censored entries are NaN/-1.
Arrays = collections.namedtuple('Arrays', ['X', 'time', 'censored', 'time_missing', 'event', 'event_missing'])


class Dataset(object):
    """An immutable list of ObservationRecords with names and provenance."""

    def __init__(self, records, covariate_names=None, risk_labels=None, metadata=None):
        records = tuple(records)
        for rec in records:
            if not isinstance(rec, ObservationRecord):
                raise ParameterError("dataset records must be ObservationRecords, got {!r}".format(rec))
        dims = {len(rec.covariates) for rec in records}
        if len(dims) > 1:
            raise ParameterError("records disagree on covariate dimension: {}".format(sorted(dims)))
        num_cov = dims.pop() - 1 if dims else len(covariate_names or ())
        if covariate_names is None:
            covariate_names = ['x{}'.format(v + 1) for v in range(num_cov)]
        covariate_names = tuple(covariate_names)
        if len(covariate_names) != num_cov:
            raise ParameterError("{} covariate names for {} covariates".format(len(covariate_names), num_cov))
        max_event = max([rec.event for rec in records if rec.event is not None], default=-1)
        if risk_labels is None:
            risk_labels = ['risk{}'.format(j + 1) for j in range(max(max_event + 1, 1))]
        risk_labels = tuple(str(label) for label in risk_labels)
        if not risk_labels:
            raise ParameterError("a dataset needs at least one risk")
        if max_event >= len(risk_labels):
            raise ParameterError("event type {} exceeds J={}".format(max_event + 1, len(risk_labels)))
        self.records = records
        self.covariate_names = covariate_names
        self.risk_labels = risk_labels
        self.metadata = dict(metadata or {})

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.records == other.records
                and self.covariate_names == other.covariate_names and self.risk_labels == other.risk_labels)

    def __repr__(self):
        return "Dataset(n={}, J={}, V={})".format(len(self), self.num_risks, self.num_covariates)

    @property
    def num_risks(self):
        return len(self.risk_labels)

    @property
    def num_covariates(self):
        """V, excluding the intercept."""
        return len(self.covariate_names)

    def design_matrix(self):
        if not self.records:
            return np.empty((0, self.num_covariates + 1))
        return np.array([rec.covariates for rec in self.records])

    def arrays(self):
        n = len(self.records)
        time = np.full(n, np.nan)
        event = np.full(n, -1, dtype=int)
        for i, rec in enumerate(self.records):
            if rec.time is not None:
                time[i] = rec.time
            if rec.event is not None:
                event[i] = rec.event
        return Arrays(
            X=self.design_matrix(),
            time=time,
            censored=np.array([rec.is_censored for rec in self.records], dtype=bool),
            time_missing=np.array([rec.is_time_missing for rec in self.records], dtype=bool),
            event=event,
            event_missing=np.array([rec.is_event_missing for rec in self.records], dtype=bool),
        )

    def _with_records(self, records, **metadata):
        meta = dict(self.metadata)
        meta.update(metadata)
        return Dataset(records, self.covariate_names, self.risk_labels, meta)

    def subset(self, indices):
        return self._with_records([self.records[i] for i in indices])

    def fully_observed(self):
        """Rows with an observed time and a known event type."""
        return self._with_records([rec for rec in self.records if rec.fully_observed])

    def mask_event_types(self, fraction, rng):
        """Hides the event type of a random fraction of uncensored subjects.

        Returns:
            (masked dataset, indices of the masked subjects, sorted).
        """
        if not 0 <= fraction <= 1:
            raise ParameterError("mask fraction must be in [0, 1], got {!r}".format(fraction))
        eligible = np.flatnonzero([rec.fully_observed for rec in self.records])
        count = int(round(fraction * eligible.size))
        chosen = np.sort(rng.choice(eligible, size=count, replace=False)) if count else np.empty(0, dtype=int)
        records = list(self.records)
        for i in chosen:
            records[i] = dataclasses.replace(records[i], event=None)
        return self._with_records(records, masked_event_fraction=float(fraction)), chosen

    def summary(self):
        """Counts written to the metadata sidecar."""
        return {
            'n': len(self.records),
            'J': self.num_risks,
            'V': self.num_covariates,
            'censored_count': sum(rec.is_censored for rec in self.records),
            'missing_time_count': sum(rec.is_time_missing for rec in self.records),
            'missing_event_count': sum(rec.is_event_missing for rec in self.records),
        }


@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
    """Settings for the two synthetic two-risk generators.

    data1 races t_j ~ Exp(e^{x'beta_j}); data2 races t_1 ~ Exp(1/cosh(x'beta_1))
    and t_2 ~ Exp(1/|sinh(x'beta_2)|). Exp takes a rate. Covariates are
    N(0, I_3) and every time is capped at censor_time.
    """

    generator: str = DATA1
    n: int = 1000
    seed: int = None
    beta1: tuple = None
    beta2: tuple = None
    censor_time: float = None

    def __post_init__(self):
        if self.generator not in DEFAULT_BETAS:
            raise ParameterError("generator must be one of {}, got {!r}".format(sorted(DEFAULT_BETAS), self.generator))
        if int(self.n) != self.n or self.n < 1:
            raise ParameterError("n must be a positive integer, got {!r}".format(self.n))
        b1, b2 = DEFAULT_BETAS[self.generator]
        for name, default in (('beta1', b1), ('beta2', b2)):
            value = tuple(float(b) for b in (getattr(self, name) or default))
            if len(value) != 3:
                raise ParameterError("{} must have 3 entries, got {}".format(name, len(value)))
            object.__setattr__(self, name, value)
        censor = DEFAULT_CENSOR_TIMES[self.generator] if self.censor_time is None else float(self.censor_time)
        if not censor > 0:
            raise ParameterError("censor_time must be > 0, got {!r}".format(censor))
        object.__setattr__(self, 'censor_time', censor)
        object.__setattr__(self, 'n', int(self.n))


def synthetic_rates(generator, eta1, eta2):
    """Per-risk exponential rates given linear predictors x'beta_1 and x'beta_2."""
    if generator == DATA1:
        return np.exp(eta1), np.exp(eta2)
    return 1.0 / np.cosh(eta1), np.abs(np.sinh(eta2))


def simulate(spec, rng):
    """Draws a Dataset from a SyntheticSpec."""
    b1 = np.asarray(spec.beta1)
    b2 = np.asarray(spec.beta2)
    x = rng.standard_normal((spec.n, 3))
    if spec.generator == DATA2:
        # |sinh(0)| is a zero rate; redraw those subjects.
        while True:
            zero = np.sinh(x @ b2) == 0
            if not np.any(zero):
                break
            x[zero] = rng.standard_normal((int(zero.sum()), 3))
    rate1, rate2 = synthetic_rates(spec.generator, x @ b1, x @ b2)
    t1 = rng.exponential(1.0 / rate1)
    t2 = rng.exponential(1.0 / rate2)
    records = []
    for i in range(spec.n):
        cov = (1.0,) + tuple(x[i])
        t = min(t1[i], t2[i])
        if t >= spec.censor_time:
            records.append(ObservationRecord.censored(cov, spec.censor_time))
        else:
            records.append(ObservationRecord.observed(cov, t, 0 if t1[i] < t2[i] else 1))
    metadata = {'generator': spec.generator, 'seed': spec.seed, 'censor_time': spec.censor_time,
                'beta1': list(spec.beta1), 'beta2': list(spec.beta2)}
    logging.info("simulated %s: n=%d, censor time %g", spec.generator, spec.n, spec.censor_time)
    return Dataset(records, ('x1', 'x2', 'x3'), ('risk1', 'risk2'), metadata)


@dataclasses.dataclass(frozen=True)
class CsvSchema:
    """Column roles of a dataset CSV.

    covariate_columns=None takes every other column, in file order.
    num_risks=None infers J from the largest event type seen.
    """

    time_column: str = 'time'
    event_column: str = 'event'
    covariate_columns: tuple = None
    num_risks: int = None

    def __post_init__(self):
        if self.time_column == self.event_column:
            raise ParameterError("time and event columns must differ")
        if self.covariate_columns is not None:
            object.__setattr__(self, 'covariate_columns', tuple(self.covariate_columns))
        if self.num_risks is not None and int(self.num_risks) < 1:
            raise ParameterError("num_risks must be >= 1, got {!r}".format(self.num_risks))


def _parse_number(text, line, column):
    try:
        value = float(text)
    except ValueError:
        raise IngestionError("not a number: {!r}".format(text), line, column)
    if not math.isfinite(value):
        raise IngestionError("not a finite number: {!r}".format(text), line, column)
    return value


def _parse_time(text, line, column):
    """Returns (status, value) for a time field."""
    text = text.strip()
    if not text:
        return TimeStatus.MISSING, None
    status = TimeStatus.OBSERVED
    if text[0] in 'Cc':
        status = TimeStatus.RIGHT_CENSORED
        text = text[1:]
    value = _parse_number(text, line, column)
    if not value > 0:
        raise IngestionError("time must be positive, got {!r}".format(value), line, column)
    return status, value


def _parse_event(text, line, column, num_risks):
    """Returns 0-based event type, 'censored', or None when missing."""
    text = text.strip()
    if not text:
        return None
    try:
        value = int(text)
    except ValueError:
        raise IngestionError("event type must be an integer, got {!r}".format(text), line, column)
    if value == 0:
        return 'censored'
    if value < 0 or (num_risks is not None and value > num_risks):
        raise IngestionError("event type {} out of range".format(value), line, column)
    return value - 1


def load_csv(path, schema=None):
    """Reads a Dataset from CSV.

    Rows with both the time and the event type missing are skipped and
    counted; any other malformed row stops ingestion.

    Raises:
        IngestionError: on a malformed field, a missing column or an empty result.
    """
    schema = schema or CsvSchema()
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as e:
        raise IngestionError("cannot parse {}: {}".format(path, e))
    frame = frame.fillna("")
    columns = list(frame.columns)
    for needed in (schema.time_column, schema.event_column) + (schema.covariate_columns or ()):
        if needed not in columns:
            raise IngestionError("missing column {!r} in {}".format(needed, path), line=1)
    cov_cols = schema.covariate_columns
    if cov_cols is None:
        cov_cols = tuple(c for c in columns if c not in (schema.time_column, schema.event_column))

    records = []
    skipped = 0
    for offset, row in enumerate(frame.itertuples(index=False)):
        line = offset + 2
        fields = dict(zip(columns, row))
        status, time = _parse_time(fields[schema.time_column], line, schema.time_column)
        event = _parse_event(fields[schema.event_column], line, schema.event_column, schema.num_risks)
        cov = (1.0,) + tuple(_parse_number(fields[c].strip(), line, c) for c in cov_cols)
        if event == 'censored':
            if status is not TimeStatus.RIGHT_CENSORED:
                raise IngestionError("event 0 marks censoring but time is not C<value>", line, schema.event_column)
            event = None
        elif status is TimeStatus.RIGHT_CENSORED and event is not None:
            raise IngestionError("a censored time cannot carry event type {}".format(event + 1),
                                 line, schema.event_column)
        if status is TimeStatus.MISSING and event is None:
            skipped += 1
            continue
        try:
            records.append(ObservationRecord(cov, status, time, event))
        except InvalidRecordError as e:
            raise IngestionError(str(e), line)
    if skipped:
        logging.warning("%s: skipped %d rows with both time and event type missing", path, skipped)
    if not records:
        raise IngestionError("no usable rows in {}".format(path))
    risk_labels = None
    if schema.num_risks is not None:
        risk_labels = ['risk{}'.format(j + 1) for j in range(schema.num_risks)]
    logging.info("loaded %d records from %s", len(records), path)
    return Dataset(records, cov_cols, risk_labels, {'source': str(path), 'rejected_rows': skipped})


def _format_time(rec):
    if rec.is_time_missing:
        return ''
    text = repr(rec.time)
    return 'C' + text if rec.is_censored else text


def _format_event(rec):
    if rec.is_censored:
        return '0'
    return '' if rec.event is None else str(rec.event + 1)


def write_csv(dataset, path, schema=None):
    """Writes dataset in the grammar load_csv reads; floats use repr so values survive exactly."""
    schema = schema or CsvSchema()
    data = collections.OrderedDict()
    data[schema.time_column] = [_format_time(rec) for rec in dataset]
    data[schema.event_column] = [_format_event(rec) for rec in dataset]
    for v, name in enumerate(dataset.covariate_names):
        data[name] = [repr(rec.covariates[v + 1]) for rec in dataset]
    columns = list(data)
    pd.DataFrame(data, columns=columns).to_csv(path, index=False)


def write_metadata(dataset, path):
    """Writes the JSON sidecar: summary counts plus provenance."""
    doc = dataset.summary()
    doc['covariate_names'] = list(dataset.covariate_names)
    doc['risk_labels'] = list(dataset.risk_labels)
    doc['provenance'] = dataset.metadata
    with open(path, 'w') as f:
        json.dump(doc, f, indent=1, sort_keys=True)
