import json
import textwrap

import numpy as np
import numpy.testing as npt
import pytest

from lomaxrace.v1 import datasets
from lomaxrace.v1.datasets import ObservationRecord, TimeStatus
from lomaxrace.v1.errors import IngestionError, InvalidRecordError, ParameterError

COV = (1.0, 0.5, -0.2)


def write(tmp_path, text, name='data.csv'):
    path = tmp_path / name
    path.write_text(textwrap.dedent(text).lstrip())
    return str(path)


class TestObservationRecord:

    def test_observed(self):
        rec = ObservationRecord.observed(COV, 2.0, 1)
        assert rec.fully_observed and not rec.is_censored
        assert rec.lower_bound == 2.0

    def test_censored(self):
        rec = ObservationRecord.censored(COV, 3.5)
        assert rec.is_censored and rec.event is None
        assert not rec.is_event_missing

    def test_time_missing(self):
        rec = ObservationRecord.time_missing(COV, 0)
        assert rec.is_time_missing and rec.lower_bound == 0.0

    def test_event_missing(self):
        rec = ObservationRecord.observed(COV, 1.0)
        assert rec.is_event_missing and not rec.fully_observed

    @pytest.mark.parametrize('build', [
        lambda: ObservationRecord(COV, TimeStatus.MISSING, None, None),
        lambda: ObservationRecord(COV, TimeStatus.RIGHT_CENSORED, 2.0, 1),
        lambda: ObservationRecord.observed(COV, 0.0, 0),
        lambda: ObservationRecord.observed((0.0, 1.0), 1.0, 0),
        lambda: ObservationRecord.observed(COV, 1.0, -1),
        lambda: ObservationRecord.observed((1.0, float('nan')), 1.0, 0),
    ])
    def test_invalid(self, build):
        with pytest.raises(InvalidRecordError):
            build()


class TestDataset:

    def records(self):
        return [
            ObservationRecord.observed(COV, 1.0, 0),
            ObservationRecord.censored(COV, 3.0),
            ObservationRecord.time_missing(COV, 1),
            ObservationRecord.observed(COV, 0.5),
        ]

    def test_arrays(self):
        a = datasets.Dataset(self.records()).arrays()
        npt.assert_array_equal(a.event, [0, -1, 1, -1])
        npt.assert_array_equal(a.censored, [False, True, False, False])
        npt.assert_array_equal(a.time_missing, [False, False, True, False])
        npt.assert_array_equal(a.event_missing, [False, False, False, True])
        assert np.isnan(a.time[2])
        assert a.X.shape == (4, 3)

    def test_infers_risks(self):
        ds = datasets.Dataset(self.records())
        assert ds.num_risks == 2 and ds.num_covariates == 2

    def test_event_beyond_labels(self):
        with pytest.raises(ParameterError):
            datasets.Dataset(self.records(), risk_labels=['only'])

    def test_fully_observed(self):
        assert len(datasets.Dataset(self.records()).fully_observed()) == 1

    def test_summary(self):
        s = datasets.Dataset(self.records()).summary()
        assert (s['n'], s['censored_count'], s['missing_time_count'], s['missing_event_count']) == (4, 1, 1, 1)

    def test_mask_event_types(self, small_data1, rng):
        masked, idx = small_data1.mask_event_types(0.5, rng)
        eligible = sum(rec.fully_observed for rec in small_data1)
        assert idx.size == int(round(0.5 * eligible))
        for i in idx:
            assert masked[i].is_event_missing
            assert masked[i].time == small_data1[i].time
        assert masked.metadata['masked_event_fraction'] == 0.5


class TestSimulate:

    def test_data1_shape_and_censoring(self, small_data1):
        assert len(small_data1) == 120
        assert small_data1.num_risks == 2 and small_data1.num_covariates == 3
        for rec in small_data1:
            if rec.is_censored:
                assert rec.time == 3.5
            else:
                assert rec.time < 3.5 and rec.event in (0, 1)

    def test_reproducible(self):
        spec = datasets.SyntheticSpec(generator=datasets.DATA2, n=50, seed=9)
        a = datasets.simulate(spec, np.random.default_rng(9))
        b = datasets.simulate(spec, np.random.default_rng(9))
        assert a == b

    def test_rates(self):
        r1, r2 = datasets.synthetic_rates(datasets.DATA2, np.array([0.0]), np.array([1.0]))
        npt.assert_allclose(r1, [1.0])
        npt.assert_allclose(r2, [np.sinh(1.0)])

    @pytest.mark.parametrize('kwargs', [
        dict(generator='data3'), dict(n=0), dict(beta1=(1.0, 2.0)), dict(censor_time=-1.0)])
    def test_invalid_spec(self, kwargs):
        with pytest.raises(ParameterError):
            datasets.SyntheticSpec(**kwargs)


class TestCsv:

    def test_load(self, tmp_path):
        path = write(tmp_path, """
            time,event,age,dose
            1.5,2,40,0.1
            C3.0,0,51,0.2
            ,1,33,0.0
            2.25,,60,1.5
            """)
        ds = datasets.load_csv(path)
        assert len(ds) == 4
        assert ds.covariate_names == ('age', 'dose')
        assert ds[0].event == 1 and ds[0].time == 1.5
        assert ds[1].is_censored and ds[1].time == 3.0
        assert ds[2].is_time_missing and ds[2].event == 0
        assert ds[3].is_event_missing
        assert ds[0].covariates == (1.0, 40.0, 0.1)

    def test_skips_fully_missing_rows(self, tmp_path, caplog):
        path = write(tmp_path, """
            time,event,x1
            1.0,1,0.5
            ,,0.3
            """)
        ds = datasets.load_csv(path)
        assert len(ds) == 1
        assert ds.metadata['rejected_rows'] == 1
        assert 'skipped 1 rows' in caplog.text

    @pytest.mark.parametrize('row,line,column', [
        ('abc,1,0.5', 3, 'time'),
        ('-1.0,1,0.5', 3, 'time'),
        ('1.0,x,0.5', 3, 'event'),
        ('1.0,0,0.5', 3, 'event'),
        ('C1.0,2,0.5', 3, 'event'),
        ('1.0,1,nan', 3, 'x1'),
        ('1.0,3,0.5', 3, 'event'),
    ])
    def test_malformed(self, tmp_path, row, line, column):
        path = write(tmp_path, "time,event,x1\n1.0,1,0.2\n" + row + "\n")
        with pytest.raises(IngestionError) as info:
            datasets.load_csv(path, datasets.CsvSchema(num_risks=2))
        assert info.value.line == line
        assert info.value.column == column

    def test_missing_column(self, tmp_path):
        path = write(tmp_path, "t,event,x1\n1.0,1,0.2\n")
        with pytest.raises(IngestionError):
            datasets.load_csv(path)

    def test_header_only(self, tmp_path):
        path = write(tmp_path, "time,event,x1\n")
        with pytest.raises(IngestionError):
            datasets.load_csv(path)

    def test_num_risks_fixes_labels(self, tmp_path):
        path = write(tmp_path, "time,event,x1\n1.0,1,0.2\n")
        assert datasets.load_csv(path, datasets.CsvSchema(num_risks=3)).num_risks == 3

    def test_write_then_load_is_exact(self, tmp_path, small_data1):
        masked, _ = small_data1.mask_event_types(0.2, np.random.default_rng(1))
        path = str(tmp_path / 'out.csv')
        datasets.write_csv(masked, path)
        loaded = datasets.load_csv(path, datasets.CsvSchema(num_risks=2))
        assert loaded.records == masked.records
        assert loaded.covariate_names == ('x1', 'x2', 'x3')

    def test_metadata_sidecar(self, tmp_path, small_data1):
        path = str(tmp_path / 'data.meta.json')
        datasets.write_metadata(small_data1, path)
        with open(path) as f:
            doc = json.load(f)
        assert doc['n'] == 120
        assert doc['provenance']['generator'] == 'data1'
        assert doc['covariate_names'] == ['x1', 'x2', 'x3']
