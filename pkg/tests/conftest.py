import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mmscene import dataio  # noqa: E402

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def dataset():
    ds = dataio.generate_dataset(seed=42)
    dataio.attach_splits(ds, dataio.split_dataset(ds.labels, 42), 42)
    return ds


@pytest.fixture(scope="session")
def timed_training(dataset):
    """Default 30-epoch run, shared by every test that needs a trained model."""
    from mmscene.trainer import TrainConfig, train
    t0 = time.perf_counter()
    res = train(dataset, TrainConfig())
    return res, time.perf_counter() - t0


@pytest.fixture(scope="session")
def trained(timed_training):
    return timed_training[0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
