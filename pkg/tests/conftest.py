import time

import numpy as np
import pytest
import torch

from vidyn.data import build_episode_dataset, write_dataset

SESSION_T0 = time.time()


def pytest_collection_modifyitems(items):
    # the long-running end-to-end gates go last so unit failures surface first
    items.sort(key=lambda item: item.fspath.basename == "test_acceptance.py")


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    # keeps float reductions deterministic across the whole suite
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def session_clock():
    """Suite start time plus a tally of seconds spent in full-scale training."""
    return {"t0": SESSION_T0, "training_seconds": 0.0}


@pytest.fixture(scope="session")
def tiny_dataset():
    """Two-chunk (22 s, 1320 frame) synthetic episode shared across tests."""
    return build_episode_dataset(7, n_chunks=2)


@pytest.fixture(scope="session")
def tiny_dataset_file(tiny_dataset, tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.bin"
    write_dataset(tiny_dataset, path)
    return path


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
