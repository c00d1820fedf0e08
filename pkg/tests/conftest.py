import numpy as np
import pytest

from lomaxrace.v1 import datasets


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow end-to-end tests')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_data1():
    spec = datasets.SyntheticSpec(generator=datasets.DATA1, n=120, seed=3)
    return datasets.simulate(spec, np.random.default_rng(3))
